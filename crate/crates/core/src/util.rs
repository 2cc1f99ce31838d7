//! Small numeric and binary-IO helpers shared across the pipeline.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Kahan-Babuska compensated accumulator. Keeps float aggregation
/// independent of row order.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn kahan_total(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for v in values {
        acc.add(v);
    }
    acc.total()
}

/// min/max/mean/std summary of a slice. Empty input yields zeros.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub sum: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary::default();
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut acc = KahanSum::new();
    for &v in values {
        min = min.min(v);
        max = max.max(v);
        acc.add(v);
    }
    let sum = acc.total();
    let mean = sum / values.len() as f64;
    let mut var = KahanSum::new();
    for &v in values {
        var.add((v - mean) * (v - mean));
    }
    let std = (var.total() / values.len() as f64).sqrt();
    Summary { min, max, mean, std, sum }
}

// ---- little-endian binary IO ----------------------------------------------

pub struct BinWriter<W: Write> {
    w: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(mut w: W, magic: &[u8; 4], version: u32) -> Result<Self> {
        w.write_all(magic)?;
        w.write_all(&version.to_le_bytes())?;
        Ok(Self { w })
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.w.write_all(&[v])?;
        Ok(())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn i64(&mut self, v: i64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        self.w.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn u32_slice(&mut self, vs: &[u32]) -> Result<()> {
        self.u64(vs.len() as u64)?;
        for &v in vs {
            self.w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn u64_slice(&mut self, vs: &[u64]) -> Result<()> {
        self.u64(vs.len() as u64)?;
        for &v in vs {
            self.w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn i64_slice(&mut self, vs: &[i64]) -> Result<()> {
        self.u64(vs.len() as u64)?;
        for &v in vs {
            self.w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn f64_slice(&mut self, vs: &[f64]) -> Result<()> {
        self.u64(vs.len() as u64)?;
        for &v in vs {
            self.w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn u8_slice(&mut self, vs: &[u8]) -> Result<()> {
        self.u64(vs.len() as u64)?;
        self.w.write_all(vs)?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.w
    }
}

pub struct BinReader<R: Read> {
    r: R,
}

impl<R: Read> BinReader<R> {
    pub fn new(mut r: R, magic: &[u8; 4], version: u32) -> Result<Self> {
        let mut got = [0u8; 4];
        r.read_exact(&mut got)?;
        if &got != magic {
            return Err(Error::Serde(format!(
                "bad magic: expected {:?}, got {:?}",
                magic, got
            )));
        }
        let mut vb = [0u8; 4];
        r.read_exact(&mut vb)?;
        let got_version = u32::from_le_bytes(vb);
        if got_version != version {
            return Err(Error::Serde(format!(
                "unsupported version {got_version}, expected {version}"
            )));
        }
        Ok(Self { r })
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.r.read_exact(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn i64(&mut self) -> Result<i64> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(i64::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        let mut buf = vec![0u8; len];
        self.r.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn u32_slice(&mut self) -> Result<Vec<u32>> {
        let len = self.u64()? as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.u32()?);
        }
        Ok(out)
    }

    pub fn u64_slice(&mut self) -> Result<Vec<u64>> {
        let len = self.u64()? as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.u64()?);
        }
        Ok(out)
    }

    pub fn i64_slice(&mut self) -> Result<Vec<i64>> {
        let len = self.u64()? as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.i64()?);
        }
        Ok(out)
    }

    pub fn f64_slice(&mut self) -> Result<Vec<f64>> {
        let len = self.u64()? as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    pub fn u8_slice(&mut self) -> Result<Vec<u8>> {
        let len = self.u64()? as usize;
        let mut buf = vec![0u8; len];
        self.r.read_exact(&mut buf)?;
        Ok(buf)
    }
}

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

/// Build a rayon pool with an explicit worker count.
pub fn worker_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_is_order_insensitive() {
        let mut vals: Vec<f64> = (0..1000).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let a = kahan_total(vals.iter().copied());
        vals.reverse();
        let b = kahan_total(vals.iter().copied());
        assert_eq!(a, b);
    }

    #[test]
    fn binio_round_trip() {
        let mut buf = Vec::new();
        {
            let mut w = BinWriter::new(&mut buf, b"TEST", 1).unwrap();
            w.u32(42).unwrap();
            w.f64_slice(&[1.5, -2.25]).unwrap();
            w.str("hello").unwrap();
        }
        let mut r = BinReader::new(buf.as_slice(), b"TEST", 1).unwrap();
        assert_eq!(r.u32().unwrap(), 42);
        assert_eq!(r.f64_slice().unwrap(), vec![1.5, -2.25]);
        assert_eq!(r.str().unwrap(), "hello");
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(BinReader::new(buf.as_slice(), b"TEST", 1).is_err());
    }
}
