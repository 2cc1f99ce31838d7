//! Parsing of transaction tables into a canonical typed dataset, dataset
//! statistics, temporal splits, and the columnar binary cache.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{BinReader, BinWriter, KahanSum};

pub const CACHE_MAGIC: &[u8; 4] = b"TXGC";
pub const CACHE_VERSION: u32 = 1;

/// One timestamped directed payment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub tx_id: u64,
    pub timestamp: i64,
    pub source: u32,
    pub target: u32,
    pub amount: f64,
    pub label: u8,
}

/// Bidirectional raw-account-string <-> dense integer id mapping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub nodes: u64,
    pub edges: u64,
    pub illicit_rate: f64,
    pub timespan_seconds: i64,
    pub timespan_days: f64,
    pub total_amount: f64,
    pub min_timestamp: i64,
    pub max_timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Rows sorted by timestamp ascending, ties in original file order.
    pub transactions: Vec<Transaction>,
    pub id_map: IdMap,
    pub meta: DatasetMeta,
    /// Optional pass-through columns (e.g. payment format category codes),
    /// aligned with `transactions`.
    pub extra_cols: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    IbmAml,
    EthPhishing,
    Generic,
}

impl std::str::FromStr for Schema {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ibm_aml" => Ok(Schema::IbmAml),
            "eth_phishing" => Ok(Schema::EthPhishing),
            "generic" => Ok(Schema::Generic),
            other => Err(Error::config(format!("unknown schema `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    TransactionTemporal,
    AccountTemporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train_fraction: f64,
    pub valid_fraction: f64,
}

impl SplitSpec {
    pub fn new(mode: SplitMode, train: f64, valid: f64) -> Result<Self> {
        if !(train > 0.0 && valid > 0.0 && train + valid < 1.0) {
            return Err(Error::config(format!(
                "split fractions ({train}, {valid}) must be positive with sum < 1"
            )));
        }
        Ok(Self { mode, train_fraction: train, valid_fraction: valid })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Row-index split of a timestamp-sorted dataset. The cut is a pure index
/// cut at floor(train*n) and floor((train+valid)*n).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalSplits {
    pub train_end: usize,
    pub valid_end: usize,
    pub n: usize,
}

impl TemporalSplits {
    pub fn of_row(&self, row: usize) -> Split {
        if row < self.train_end {
            Split::Train
        } else if row < self.valid_end {
            Split::Valid
        } else {
            Split::Test
        }
    }

    pub fn train(&self) -> std::ops::Range<usize> {
        0..self.train_end
    }

    pub fn valid(&self) -> std::ops::Range<usize> {
        self.train_end..self.valid_end
    }

    pub fn test(&self) -> std::ops::Range<usize> {
        self.valid_end..self.n
    }
}

/// Account-level split: per-account assignment plus the induced
/// per-transaction assignment (latest split among the two endpoints).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountSplits {
    pub account_split: Vec<Split>,
    pub train_accounts: Vec<u32>,
    pub valid_accounts: Vec<u32>,
    pub test_accounts: Vec<u32>,
}

impl AccountSplits {
    pub fn of_transaction(&self, t: &Transaction) -> Split {
        let a = self.account_split[t.source as usize];
        let b = self.account_split[t.target as usize];
        match (a, b) {
            (Split::Test, _) | (_, Split::Test) => Split::Test,
            (Split::Valid, _) | (_, Split::Valid) => Split::Valid,
            _ => Split::Train,
        }
    }
}

fn parse_timestamp(raw: &str, line: u64) -> Result<i64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<i64>() {
        return Ok(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        if v.is_finite() {
            return Ok(v as i64);
        }
    }
    for fmt in ["%Y/%m/%d %H:%M:%S", "%Y/%m/%d %H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(Error::Row { line, message: format!("unparseable timestamp `{raw}`") })
}

fn parse_amount(raw: &str, line: u64) -> Result<f64> {
    let cleaned = raw.trim().replace(',', "");
    match cleaned.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(Error::Row { line, message: format!("unparseable amount `{raw}`") }),
    }
}

fn parse_label(raw: &str, line: u64) -> Result<u8> {
    match raw.trim() {
        "0" | "false" | "False" => Ok(0),
        "1" | "true" | "True" => Ok(1),
        other => Err(Error::Row { line, message: format!("unparseable label `{other}`") }),
    }
}

struct ColumnIndex {
    positions: Vec<usize>,
}

impl ColumnIndex {
    /// Resolve the listed column names against the header. Duplicate header
    /// names resolve in order ("Account" twice maps first then second
    /// occurrence); "Name.1" also matches a second occurrence of "Name".
    fn resolve(header: &csv::StringRecord, names: &[&str]) -> Result<Self> {
        let header: Vec<&str> = header.iter().map(|h| h.trim()).collect();
        let mut used = vec![false; header.len()];
        let mut positions = Vec::with_capacity(names.len());
        for name in names {
            let base = name.strip_suffix(".1").unwrap_or(name);
            let pos = header
                .iter()
                .enumerate()
                .find(|&(i, h)| !used[i] && (*h == *name || *h == base))
                .map(|(i, _)| i)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
            used[pos] = true;
            positions.push(pos);
        }
        Ok(Self { positions })
    }

    fn get<'a>(&self, record: &'a csv::StringRecord, col: usize, line: u64) -> Result<&'a str> {
        record
            .get(self.positions[col])
            .ok_or_else(|| Error::Row { line, message: "short row".to_string() })
    }
}

/// Parse a CSV transaction file into a canonical dataset.
pub fn parse_transactions(path: impl AsRef<Path>, schema: Schema) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(BufReader::new(file));
    let header = reader
        .headers()
        .map_err(|e| Error::data(format!("cannot read header: {e}")))?
        .clone();

    let cols = match schema {
        Schema::IbmAml => ColumnIndex::resolve(
            &header,
            &[
                "Timestamp",
                "From Bank",
                "Account",
                "To Bank",
                "Account.1",
                "Amount Paid",
                "Payment Format",
                "Is Laundering",
            ],
        )?,
        Schema::EthPhishing => ColumnIndex::resolve(
            &header,
            &["timestamp", "from_address", "to_address", "value", "is_phishing"],
        )?,
        Schema::Generic => {
            ColumnIndex::resolve(&header, &["timestamp", "source", "target", "amount", "label"])?
        }
    };

    let mut id_map = IdMap::default();
    let mut rows: Vec<Transaction> = Vec::new();
    let mut payment_formats: Vec<f64> = Vec::new();
    let mut format_codes: HashMap<String, f64> = HashMap::new();

    let mut record = csv::StringRecord::new();
    let mut line: u64 = 1; // header line
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                return Err(Error::Row { line: line + 1, message: e.to_string() });
            }
        }
        line += 1;
        let tx_id = rows.len() as u64;
        let tx = match schema {
            Schema::IbmAml => {
                let ts = parse_timestamp(cols.get(&record, 0, line)?, line)?;
                let src_bank = cols.get(&record, 1, line)?.trim();
                let src_acc = cols.get(&record, 2, line)?.trim();
                let dst_bank = cols.get(&record, 3, line)?.trim();
                let dst_acc = cols.get(&record, 4, line)?.trim();
                let amount = parse_amount(cols.get(&record, 5, line)?, line)?;
                let fmt = cols.get(&record, 6, line)?.trim().to_string();
                let label = parse_label(cols.get(&record, 7, line)?, line)?;
                let source = id_map.intern(&format!("{src_bank}|{src_acc}"));
                let target = id_map.intern(&format!("{dst_bank}|{dst_acc}"));
                let next_code = format_codes.len() as f64;
                let code = *format_codes.entry(fmt).or_insert(next_code);
                payment_formats.push(code);
                Transaction { tx_id, timestamp: ts, source, target, amount, label }
            }
            Schema::EthPhishing | Schema::Generic => {
                let ts = parse_timestamp(cols.get(&record, 0, line)?, line)?;
                let source = id_map.intern(cols.get(&record, 1, line)?.trim());
                let target = id_map.intern(cols.get(&record, 2, line)?.trim());
                let amount = parse_amount(cols.get(&record, 3, line)?, line)?;
                let label = parse_label(cols.get(&record, 4, line)?, line)?;
                Transaction { tx_id, timestamp: ts, source, target, amount, label }
            }
        };
        rows.push(tx);
    }

    // Stable sort: timestamp ascending, ties in file order (tx_id).
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| (rows[i].timestamp, rows[i].tx_id));
    let transactions: Vec<Transaction> = order.iter().map(|&i| rows[i]).collect();
    let extra_cols = if schema == Schema::IbmAml {
        vec![(
            "payment_format".to_string(),
            order.iter().map(|&i| payment_formats[i]).collect(),
        )]
    } else {
        Vec::new()
    };

    let mut d = Dataset { transactions, id_map, meta: DatasetMeta::default(), extra_cols };
    if !d.transactions.is_empty() {
        d.meta = dataset_stats(&d)?;
    }
    Ok(d)
}

/// Compute node/edge counts, illicit rate, and timespan for a dataset.
pub fn dataset_stats(d: &Dataset) -> Result<DatasetMeta> {
    if d.transactions.is_empty() {
        return Err(Error::data("empty dataset"));
    }
    let n = d.transactions.len() as u64;
    let mut illicit = 0u64;
    let mut min_ts = i64::MAX;
    let mut max_ts = i64::MIN;
    let mut total = KahanSum::new();
    for t in &d.transactions {
        illicit += t.label as u64;
        min_ts = min_ts.min(t.timestamp);
        max_ts = max_ts.max(t.timestamp);
        total.add(t.amount);
    }
    let timespan = max_ts - min_ts;
    Ok(DatasetMeta {
        nodes: d.id_map.len() as u64,
        edges: n,
        illicit_rate: illicit as f64 / n as f64,
        timespan_seconds: timespan,
        timespan_days: timespan as f64 / 86_400.0,
        total_amount: total.total(),
        min_timestamp: min_ts,
        max_timestamp: max_ts,
    })
}

/// Index-cut temporal split of timestamp-sorted rows.
pub fn temporal_split(d: &Dataset, spec: &SplitSpec) -> Result<TemporalSplits> {
    if spec.mode != SplitMode::TransactionTemporal {
        return Err(Error::config("temporal_split requires transaction_temporal mode"));
    }
    let n = d.transactions.len();
    if n < 5 {
        return Err(Error::data(format!("cannot form three non-empty splits from {n} rows")));
    }
    debug_assert!(d.transactions.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    let train_end = (spec.train_fraction * n as f64).floor() as usize;
    let valid_end = ((spec.train_fraction + spec.valid_fraction) * n as f64).floor() as usize;
    if train_end == 0 || valid_end <= train_end || valid_end >= n {
        return Err(Error::data("split fractions produce an empty split"));
    }
    Ok(TemporalSplits { train_end, valid_end, n })
}

/// Split accounts by their minimum transaction timestamp (ties broken by
/// ascending interned id), then assign each transaction to the latest split
/// among its endpoints.
pub fn account_temporal_split(d: &Dataset, spec: &SplitSpec) -> Result<AccountSplits> {
    if spec.mode != SplitMode::AccountTemporal {
        return Err(Error::config("account_temporal_split requires account_temporal mode"));
    }
    let n_accounts = d.id_map.len();
    if n_accounts < 5 {
        return Err(Error::data(format!(
            "cannot form three non-empty splits from {n_accounts} accounts"
        )));
    }
    let mut min_ts = vec![i64::MAX; n_accounts];
    for t in &d.transactions {
        min_ts[t.source as usize] = min_ts[t.source as usize].min(t.timestamp);
        min_ts[t.target as usize] = min_ts[t.target as usize].min(t.timestamp);
    }
    let mut order: Vec<u32> = (0..n_accounts as u32).collect();
    order.sort_by_key(|&a| (min_ts[a as usize], a));
    let train_end = (spec.train_fraction * n_accounts as f64).floor() as usize;
    let valid_end =
        ((spec.train_fraction + spec.valid_fraction) * n_accounts as f64).floor() as usize;
    if train_end == 0 || valid_end <= train_end || valid_end >= n_accounts {
        return Err(Error::data("split fractions produce an empty account split"));
    }
    let mut account_split = vec![Split::Train; n_accounts];
    for (rank, &a) in order.iter().enumerate() {
        account_split[a as usize] = if rank < train_end {
            Split::Train
        } else if rank < valid_end {
            Split::Valid
        } else {
            Split::Test
        };
    }
    Ok(AccountSplits {
        train_accounts: order[..train_end].to_vec(),
        valid_accounts: order[train_end..valid_end].to_vec(),
        test_accounts: order[valid_end..].to_vec(),
        account_split,
    })
}

// ---- columnar binary cache --------------------------------------------------

pub fn write_cache(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BinWriter::new(BufWriter::new(file), CACHE_MAGIC, CACHE_VERSION)?;
    w.u64(d.id_map.len() as u64)?;
    for i in 0..d.id_map.len() {
        w.str(d.id_map.name(i as u32).unwrap())?;
    }
    let n = d.transactions.len();
    w.u64_slice(&d.transactions.iter().map(|t| t.tx_id).collect::<Vec<_>>())?;
    w.i64_slice(&d.transactions.iter().map(|t| t.timestamp).collect::<Vec<_>>())?;
    w.u32_slice(&d.transactions.iter().map(|t| t.source).collect::<Vec<_>>())?;
    w.u32_slice(&d.transactions.iter().map(|t| t.target).collect::<Vec<_>>())?;
    w.f64_slice(&d.transactions.iter().map(|t| t.amount).collect::<Vec<_>>())?;
    w.u8_slice(&d.transactions.iter().map(|t| t.label).collect::<Vec<_>>())?;
    w.u64(d.extra_cols.len() as u64)?;
    for (name, col) in &d.extra_cols {
        debug_assert_eq!(col.len(), n);
        w.str(name)?;
        w.f64_slice(col)?;
    }

    // JSON stats sidecar next to the cache file.
    let sidecar = path.as_ref().with_extension("stats.json");
    let json = serde_json::to_string_pretty(&d.meta)?;
    std::fs::write(sidecar, json)?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    let mut r = BinReader::new(BufReader::new(file), CACHE_MAGIC, CACHE_VERSION)?;
    let n_names = r.u64()? as usize;
    let mut id_map = IdMap::default();
    for _ in 0..n_names {
        let name = r.str()?;
        id_map.intern(&name);
    }
    let tx_ids = r.u64_slice()?;
    let timestamps = r.i64_slice()?;
    let sources = r.u32_slice()?;
    let targets = r.u32_slice()?;
    let amounts = r.f64_slice()?;
    let labels = r.u8_slice()?;
    let n = tx_ids.len();
    if [timestamps.len(), sources.len(), targets.len(), amounts.len(), labels.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::Serde("cache column length mismatch".to_string()));
    }
    let transactions: Vec<Transaction> = (0..n)
        .map(|i| Transaction {
            tx_id: tx_ids[i],
            timestamp: timestamps[i],
            source: sources[i],
            target: targets[i],
            amount: amounts[i],
            label: labels[i],
        })
        .collect();
    let n_extra = r.u64()? as usize;
    let mut extra_cols = Vec::with_capacity(n_extra);
    for _ in 0..n_extra {
        let name = r.str()?;
        extra_cols.push((name, r.f64_slice()?));
    }
    let mut d = Dataset { transactions, id_map, meta: DatasetMeta::default(), extra_cols };
    if !d.transactions.is_empty() {
        d.meta = dataset_stats(&d)?;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn generic_csv(rows: &[(i64, &str, &str, f64, u8)]) -> tempfile::NamedTempFile {
        let mut s = String::from("timestamp,source,target,amount,label\n");
        for (ts, src, dst, amt, lbl) in rows {
            s.push_str(&format!("{ts},{src},{dst},{amt},{lbl}\n"));
        }
        write_csv(&s)
    }

    #[test]
    fn three_row_readback() {
        let f = generic_csv(&[(1, "a", "b", 10.0, 0), (2, "b", "c", 20.0, 0), (3, "c", "a", 30.0, 1)]);
        let d = parse_transactions(f.path(), Schema::Generic).unwrap();
        assert_eq!(d.transactions.len(), 3);
        assert!((d.meta.total_amount - 60.0).abs() < 1e-12);
        assert_eq!(d.meta.nodes, 3);
    }

    #[test]
    fn interning_identity() {
        let f = generic_csv(&[(1, "ACC1", "b", 1.0, 0), (2, "ACC1", "c", 1.0, 0)]);
        let d = parse_transactions(f.path(), Schema::Generic).unwrap();
        assert_eq!(d.transactions[0].source, d.transactions[1].source);
    }

    #[test]
    fn missing_column_named() {
        let f = write_csv("timestamp,source,target,amount\n1,a,b,1,0\n");
        let err = parse_transactions(f.path(), Schema::Generic).unwrap_err();
        match err {
            Error::MissingColumn(c) => assert_eq!(c, "label"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_amount_reports_line() {
        let f = write_csv("timestamp,source,target,amount,label\n1,a,b,1.0,0\n2,a,b,oops,0\n");
        let err = parse_transactions(f.path(), Schema::Generic).unwrap_err();
        match err {
            Error::Row { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ibm_schema_parses_and_uses_amount_paid() {
        let f = write_csv(
            "Timestamp,From Bank,Account,To Bank,Account,Amount Received,Receiving Currency,\
             Amount Paid,Payment Currency,Payment Format,Is Laundering\n\
             2022/09/01 00:20,10,A1,11,B1,95.0,Euro,100.0,US Dollar,Cheque,0\n\
             2022/09/01 00:21,10,A1,12,C1,50.0,Euro,50.0,Euro,Wire,1\n",
        );
        let d = parse_transactions(f.path(), Schema::IbmAml).unwrap();
        assert_eq!(d.transactions.len(), 2);
        assert_eq!(d.transactions[0].amount, 100.0);
        assert_eq!(d.transactions[0].source, d.transactions[1].source);
        assert_eq!(d.meta.nodes, 3);
        assert_eq!(d.extra_cols.len(), 1);
    }

    #[test]
    fn rows_sorted_by_timestamp_with_stable_ties() {
        let f = generic_csv(&[(5, "a", "b", 1.0, 0), (1, "b", "c", 2.0, 0), (5, "c", "d", 3.0, 0)]);
        let d = parse_transactions(f.path(), Schema::Generic).unwrap();
        let ts: Vec<i64> = d.transactions.iter().map(|t| t.timestamp).collect();
        assert_eq!(ts, vec![1, 5, 5]);
        // ties keep file order
        assert_eq!(d.transactions[1].tx_id, 0);
        assert_eq!(d.transactions[2].tx_id, 2);
    }

    #[test]
    fn stats_basics() {
        let f = generic_csv(&[(0, "a", "b", 1.0, 0), (86_400, "a", "b", 1.0, 1)]);
        let d = parse_transactions(f.path(), Schema::Generic).unwrap();
        let m = dataset_stats(&d).unwrap();
        assert_eq!(m.illicit_rate, 0.5);
        assert_eq!(m.timespan_days, 1.0);
        assert_eq!(m.edges, 2);
        assert_eq!(m.nodes, 2);
    }

    #[test]
    fn stats_single_row_timespan_zero() {
        let f = generic_csv(&[(7, "a", "b", 1.0, 0)]);
        let d = parse_transactions(f.path(), Schema::Generic).unwrap();
        assert_eq!(d.meta.timespan_days, 0.0);
    }

    #[test]
    fn illicit_rate_matches_label_mean() {
        let rows: Vec<(i64, String, String, f64, u8)> = (0..137)
            .map(|i| (i as i64, format!("s{}", i % 11), format!("t{}", i % 7), 1.0, (i % 9 == 0) as u8))
            .collect();
        let refs: Vec<(i64, &str, &str, f64, u8)> =
            rows.iter().map(|(a, b, c, d, e)| (*a, b.as_str(), c.as_str(), *d, *e)).collect();
        let f = generic_csv(&refs);
        let d = parse_transactions(f.path(), Schema::Generic).unwrap();
        let mean =
            d.transactions.iter().map(|t| t.label as f64).sum::<f64>() / d.transactions.len() as f64;
        assert!((d.meta.illicit_rate - mean).abs() < 1e-12);
    }

    #[test]
    fn temporal_split_exact_fractions() {
        let rows: Vec<(i64, String, String, f64, u8)> =
            (1..=10).map(|i| (i as i64, format!("a{i}"), format!("b{i}"), 1.0, 0)).collect();
        let refs: Vec<(i64, &str, &str, f64, u8)> =
            rows.iter().map(|(a, b, c, d, e)| (*a, b.as_str(), c.as_str(), *d, *e)).collect();
        let f = generic_csv(&refs);
        let d = parse_transactions(f.path(), Schema::Generic).unwrap();
        let s = temporal_split(
            &d,
            &SplitSpec::new(SplitMode::TransactionTemporal, 0.6, 0.2).unwrap(),
        )
        .unwrap();
        assert_eq!((s.train().len(), s.valid().len(), s.test().len()), (6, 2, 2));

        // floor-index oracle for (0.65, 0.15): floor(6.5)=6, floor(8.0)=8
        let s2 = temporal_split(
            &d,
            &SplitSpec::new(SplitMode::TransactionTemporal, 0.65, 0.15).unwrap(),
        )
        .unwrap();
        assert_eq!((s2.train().len(), s2.valid().len(), s2.test().len()), (6, 2, 2));
    }

    #[test]
    fn temporal_split_five_rows() {
        let rows: Vec<(i64, String, String, f64, u8)> =
            (1..=5).map(|i| (i as i64, format!("a{i}"), format!("b{i}"), 1.0, 0)).collect();
        let refs: Vec<(i64, &str, &str, f64, u8)> =
            rows.iter().map(|(a, b, c, d, e)| (*a, b.as_str(), c.as_str(), *d, *e)).collect();
        let f = generic_csv(&refs);
        let d = parse_transactions(f.path(), Schema::Generic).unwrap();
        let s = temporal_split(
            &d,
            &SplitSpec::new(SplitMode::TransactionTemporal, 0.6, 0.2).unwrap(),
        )
        .unwrap();
        assert_eq!((s.train().len(), s.valid().len(), s.test().len()), (3, 1, 1));
    }

    #[test]
    fn temporal_split_too_small() {
        let f = generic_csv(&[(1, "a", "b", 1.0, 0), (2, "b", "c", 1.0, 0)]);
        let d = parse_transactions(f.path(), Schema::Generic).unwrap();
        assert!(temporal_split(
            &d,
            &SplitSpec::new(SplitMode::TransactionTemporal, 0.6, 0.2).unwrap()
        )
        .is_err());
    }

    #[test]
    fn account_split_by_min_timestamp() {
        // A(min 1), B(2), C(3), D(4), E(5); (0.6, 0.2) -> {A,B,C} | {D} | {E}
        let f = generic_csv(&[
            (1, "A", "B", 1.0, 0),
            (2, "B", "C", 1.0, 0),
            (3, "C", "D", 1.0, 0),
            (4, "D", "E", 1.0, 0),
            (5, "E", "A", 1.0, 0),
        ]);
        let mut d = parse_transactions(f.path(), Schema::Generic).unwrap();
        // B first appears at ts 1 as a target; adjust so mins are 1..5
        // by reconstructing explicit transactions.
        d.transactions = vec![
            Transaction { tx_id: 0, timestamp: 1, source: 0, target: 0, amount: 1.0, label: 0 },
            Transaction { tx_id: 1, timestamp: 2, source: 1, target: 1, amount: 1.0, label: 0 },
            Transaction { tx_id: 2, timestamp: 3, source: 2, target: 2, amount: 1.0, label: 0 },
            Transaction { tx_id: 3, timestamp: 4, source: 3, target: 3, amount: 1.0, label: 0 },
            Transaction { tx_id: 4, timestamp: 5, source: 4, target: 4, amount: 1.0, label: 0 },
        ];
        let s = account_temporal_split(
            &d,
            &SplitSpec::new(SplitMode::AccountTemporal, 0.6, 0.2).unwrap(),
        )
        .unwrap();
        assert_eq!(s.train_accounts, vec![0, 1, 2]);
        assert_eq!(s.valid_accounts, vec![3]);
        assert_eq!(s.test_accounts, vec![4]);
    }

    #[test]
    fn account_split_tie_breaks_by_id() {
        let f = generic_csv(&[
            (1, "E", "D", 1.0, 0),
            (1, "C", "B", 1.0, 0),
            (2, "A", "B", 1.0, 0),
        ]);
        let d = parse_transactions(f.path(), Schema::Generic).unwrap();
        let s = account_temporal_split(
            &d,
            &SplitSpec::new(SplitMode::AccountTemporal, 0.6, 0.2).unwrap(),
        )
        .unwrap();
        // all of E(0),D(1),C(2),B(3) tie at ts 1 -> ordered by id
        assert_eq!(s.train_accounts, vec![0, 1, 2]);
        assert_eq!(s.valid_accounts, vec![3]);
    }

    #[test]
    fn transaction_assigned_to_latest_endpoint_split() {
        let account_split = vec![Split::Train, Split::Test];
        let s = AccountSplits {
            account_split,
            train_accounts: vec![0],
            valid_accounts: vec![],
            test_accounts: vec![1],
        };
        let t = Transaction { tx_id: 0, timestamp: 0, source: 0, target: 1, amount: 1.0, label: 0 };
        assert_eq!(s.of_transaction(&t), Split::Test);
    }

    #[test]
    fn cache_round_trip() {
        let f = generic_csv(&[(3, "a", "b", 10.5, 0), (1, "b", "c", 0.0, 1), (2, "c", "a", 7.25, 0)]);
        let d = parse_transactions(f.path(), Schema::Generic).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("d.txgc");
        write_cache(&d, &cache).unwrap();
        let back = read_cache(&cache).unwrap();
        assert_eq!(d, back);
        assert!(cache.with_extension("stats.json").exists());
    }
}
