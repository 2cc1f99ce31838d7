//! Isolation-forest anomaly scoring over node feature vectors plus
//! source/target interaction columns for transactions.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::Transaction;
use crate::util::{BinReader, BinWriter, Matrix};

pub const FOREST_MAGIC: &[u8; 4] = b"TXIF";
pub const FOREST_VERSION: u32 = 1;

/// Euler–Mascheroni constant.
const GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalyScore {
    pub node: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum TreeNode {
    Leaf {
        size: u32,
    },
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
        left_mass: u32,
        right_mass: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct IsoTree {
    nodes: Vec<TreeNode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForest {
    trees: Vec<IsoTree>,
    /// effective subsample size used for the score normalization
    sample_size: usize,
    n_features: usize,
}

fn harmonic(k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    if k < 32 {
        (1..=k).map(|i| 1.0 / i as f64).sum()
    } else {
        (k as f64).ln() + GAMMA + 1.0 / (2.0 * k as f64)
    }
}

/// Average unsuccessful-search path length c(n) of a binary search tree;
/// c(2) = 1 exactly, c(n<=1) = 0.
pub fn average_path_normalizer(n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * harmonic(n - 1) - 2.0 * (n - 1) as f64 / n as f64
    }
}

fn build_tree(
    x: &Matrix,
    rows: &mut Vec<usize>,
    rng: &mut ChaCha8Rng,
    height_limit: usize,
) -> IsoTree {
    let mut nodes = Vec::new();
    build_node(x, rows, rng, height_limit, 0, &mut nodes);
    IsoTree { nodes }
}

fn build_node(
    x: &Matrix,
    rows: &[usize],
    rng: &mut ChaCha8Rng,
    height_limit: usize,
    depth: usize,
    nodes: &mut Vec<TreeNode>,
) -> u32 {
    let id = nodes.len() as u32;
    if rows.len() <= 1 || depth >= height_limit {
        nodes.push(TreeNode::Leaf { size: rows.len() as u32 });
        return id;
    }
    // candidate features: finite values with spread among these rows
    let mut ranges: Vec<(usize, f64, f64)> = Vec::new();
    for j in 0..x.cols {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &r in rows {
            let v = x.get(r, j);
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if hi > lo {
            ranges.push((j, lo, hi));
        }
    }
    if ranges.is_empty() {
        nodes.push(TreeNode::Leaf { size: rows.len() as u32 });
        return id;
    }
    let &(feature, lo, hi) = &ranges[rng.gen_range(0..ranges.len())];
    let threshold = lo + rng.gen::<f64>() * (hi - lo);

    let mut left_rows = Vec::new();
    let mut right_rows = Vec::new();
    let mut nan_rows = Vec::new();
    for &r in rows {
        let v = x.get(r, feature);
        if v.is_nan() {
            nan_rows.push(r);
        } else if v < threshold {
            left_rows.push(r);
        } else {
            right_rows.push(r);
        }
    }
    // NaNs follow the heavier side (ties go left)
    if left_rows.len() >= right_rows.len() {
        left_rows.extend(nan_rows);
    } else {
        right_rows.extend(nan_rows);
    }
    if left_rows.is_empty() || right_rows.is_empty() {
        // degenerate cut (threshold at the boundary); stop here
        nodes.push(TreeNode::Leaf { size: rows.len() as u32 });
        return id;
    }
    nodes.push(TreeNode::Leaf { size: 0 }); // placeholder
    let left = build_node(x, &left_rows, rng, height_limit, depth + 1, nodes);
    let right = build_node(x, &right_rows, rng, height_limit, depth + 1, nodes);
    nodes[id as usize] = TreeNode::Split {
        feature: feature as u32,
        threshold,
        left,
        right,
        left_mass: left_rows.len() as u32,
        right_mass: right_rows.len() as u32,
    };
    id
}

fn path_length(tree: &IsoTree, row: &[f64]) -> f64 {
    let mut node = 0usize;
    let mut depth = 0.0f64;
    loop {
        match &tree.nodes[node] {
            TreeNode::Leaf { size } => {
                return depth + average_path_normalizer(*size as usize);
            }
            TreeNode::Split { feature, threshold, left, right, left_mass, right_mass } => {
                let v = row[*feature as usize];
                let go_left = if v.is_nan() {
                    left_mass >= right_mass
                } else {
                    v < *threshold
                };
                node = if go_left { *left as usize } else { *right as usize };
                depth += 1.0;
            }
        }
    }
}

/// Fit an isolation forest: `trees` random trees, each on a uniform
/// subsample of `sample_size` rows without replacement, with uniform
/// axis-aligned splits. Deterministic under a fixed seed for any worker
/// count (per-tree seeds are derived from the forest seed).
pub fn fit_isolation_forest(
    x: &Matrix,
    trees: usize,
    sample_size: usize,
    seed: u64,
) -> Result<IsolationForest> {
    if x.rows < 2 {
        return Err(Error::data("isolation forest needs at least 2 rows"));
    }
    if trees == 0 {
        return Err(Error::config("isolation forest needs at least 1 tree"));
    }
    let psi = sample_size.min(x.rows).max(2);
    let height_limit = (psi as f64).log2().ceil() as usize;
    let built: Vec<IsoTree> = (0..trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut rows: Vec<usize> = (0..x.rows).collect();
            rows.shuffle(&mut rng);
            rows.truncate(psi);
            rows.sort_unstable();
            build_tree(x, &mut rows, &mut rng, height_limit)
        })
        .collect();
    Ok(IsolationForest { trees: built, sample_size: psi, n_features: x.cols })
}

impl IsolationForest {
    /// score = 2^(-E[path length] / c(sample_size)), clamped to [0,1].
    pub fn score_matrix(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols != self.n_features {
            return Err(Error::data(format!(
                "feature dimension mismatch: model has {}, input has {}",
                self.n_features, x.cols
            )));
        }
        let c = average_path_normalizer(self.sample_size);
        let scores: Vec<f64> = (0..x.rows)
            .into_par_iter()
            .map(|i| {
                let row = x.row(i);
                let mean_path: f64 =
                    self.trees.iter().map(|t| path_length(t, row)).sum::<f64>()
                        / self.trees.len() as f64;
                let s = if c > 0.0 { 2f64.powf(-mean_path / c) } else { 1.0 };
                s.clamp(0.0, 1.0)
            })
            .collect();
        Ok(scores)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut w = BinWriter::new(f, FOREST_MAGIC, FOREST_VERSION)?;
        w.u64(self.sample_size as u64)?;
        w.u64(self.n_features as u64)?;
        w.u64(self.trees.len() as u64)?;
        for t in &self.trees {
            w.u64(t.nodes.len() as u64)?;
            for n in &t.nodes {
                match n {
                    TreeNode::Leaf { size } => {
                        w.u8(0)?;
                        w.u32(*size)?;
                    }
                    TreeNode::Split { feature, threshold, left, right, left_mass, right_mass } => {
                        w.u8(1)?;
                        w.u32(*feature)?;
                        w.f64(*threshold)?;
                        w.u32(*left)?;
                        w.u32(*right)?;
                        w.u32(*left_mass)?;
                        w.u32(*right_mass)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut r = BinReader::new(f, FOREST_MAGIC, FOREST_VERSION)?;
        let sample_size = r.u64()? as usize;
        let n_features = r.u64()? as usize;
        let n_trees = r.u64()? as usize;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let n_nodes = r.u64()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                nodes.push(match r.u8()? {
                    0 => TreeNode::Leaf { size: r.u32()? },
                    _ => TreeNode::Split {
                        feature: r.u32()?,
                        threshold: r.f64()?,
                        left: r.u32()?,
                        right: r.u32()?,
                        left_mass: r.u32()?,
                        right_mass: r.u32()?,
                    },
                });
            }
            trees.push(IsoTree { nodes });
        }
        Ok(Self { trees, sample_size, n_features })
    }
}

pub const INTERACTION_FEATURE_NAMES: &[&str] = &[
    "src_score",
    "tgt_score",
    "score_product",
    "score_max",
    "score_min",
    "score_abs_diff",
    "score_imputed",
];

/// Per-transaction interaction columns from endpoint anomaly scores.
/// Endpoints without a score take the median score, with the imputed flag
/// set on the row.
pub fn interaction_features(
    scores: &HashMap<u32, f64>,
    transactions: &[Transaction],
) -> Vec<[f64; 7]> {
    let mut sorted: Vec<f64> = scores.values().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.is_empty() {
        0.5
    } else {
        sorted[(sorted.len() - 1) / 2]
    };
    transactions
        .iter()
        .map(|t| {
            let mut imputed = 0.0;
            let mut lookup = |node: u32| match scores.get(&node) {
                Some(&s) => s,
                None => {
                    imputed = 1.0;
                    median
                }
            };
            let s = lookup(t.source);
            let g = lookup(t.target);
            [s, g, s * g, s.max(g), s.min(g), (s - g).abs(), imputed]
        })
        .collect()
}

/// Export scores as CSV (node, score).
pub fn export_scores_csv(scores: &[AnomalyScore], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "node,score")?;
    for s in scores {
        writeln!(f, "{},{}", s.node, s.score)?;
    }
    Ok(())
}
