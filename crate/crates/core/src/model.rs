//! Transaction-level feature assembly, gradient-boosted tree training, and
//! minority-class evaluation with threshold tuning and the ablation grid.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::{interaction_features, INTERACTION_FEATURE_NAMES};
use crate::error::{Error, Result};
use crate::ingest::{AccountSplits, Dataset, Split, TemporalSplits};
use crate::util::{BinReader, BinWriter, Matrix};

pub const MODEL_MAGIC: &[u8; 4] = b"TXGB";
pub const MODEL_VERSION: u32 = 1;

pub const ABLATION_GROUPS: &[&str] =
    &["transaction", "random_walk", "modularity", "flows", "anomaly"];

// ---- feature assembly --------------------------------------------------------

/// One block of per-node features: column names plus one row per node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatureBlock {
    pub names: Vec<String>,
    pub rows: Vec<(u32, Vec<f64>)>,
}

/// Concatenate blocks column-wise over the union of nodes; a node absent
/// from a block gets NaN for that block's columns.
pub fn merge_blocks(blocks: &[&NodeFeatureBlock]) -> Result<NodeFeatureBlock> {
    let mut names = Vec::new();
    for b in blocks {
        names.extend(b.names.iter().cloned());
    }
    let mut nodes: Vec<u32> = blocks.iter().flat_map(|b| b.rows.iter().map(|r| r.0)).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let mut maps = Vec::with_capacity(blocks.len());
    for b in blocks {
        let mut m: HashMap<u32, &Vec<f64>> = HashMap::with_capacity(b.rows.len());
        for (n, v) in &b.rows {
            if v.len() != b.names.len() {
                return Err(Error::data("node feature row width mismatch"));
            }
            if m.insert(*n, v).is_some() {
                return Err(Error::data(format!("duplicate node feature row for node {n}")));
            }
        }
        maps.push(m);
    }
    let rows = nodes
        .iter()
        .map(|&n| {
            let mut v = Vec::with_capacity(names.len());
            for (b, m) in blocks.iter().zip(&maps) {
                match m.get(&n) {
                    Some(r) => v.extend_from_slice(r),
                    None => v.extend(std::iter::repeat(f64::NAN).take(b.names.len())),
                }
            }
            (n, v)
        })
        .collect();
    Ok(NodeFeatureBlock { names, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub x: Matrix,
    pub labels: Vec<u8>,
    pub tx_ids: Vec<u64>,
}

/// Transaction row indices per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRows {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitRows {
    pub fn from_temporal(s: &TemporalSplits) -> Self {
        Self { train: s.train().collect(), valid: s.valid().collect(), test: s.test().collect() }
    }

    pub fn from_account(s: &AccountSplits, d: &Dataset) -> Self {
        let mut out = Self { train: vec![], valid: vec![], test: vec![] };
        for (i, t) in d.transactions.iter().enumerate() {
            match s.of_transaction(t) {
                Split::Train => out.train.push(i),
                Split::Valid => out.valid.push(i),
                Split::Test => out.test.push(i),
            }
        }
        out
    }
}

fn column_median(values: &mut Vec<f64>) -> f64 {
    values.retain(|v| v.is_finite());
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[(values.len() - 1) / 2]
}

/// Build the per-transaction feature matrix for one split: base transaction
/// columns, the node feature vector joined once for the source and once for
/// the target (median-imputed with a flag when an endpoint is unknown), and
/// the anomaly interaction columns when scores are given. Rows are sorted by
/// tx_id so assembly is order-independent.
pub fn assemble_features(
    d: &Dataset,
    rows: &[usize],
    node_block: Option<&NodeFeatureBlock>,
    scores: Option<&HashMap<u32, f64>>,
) -> Result<FeatureMatrix> {
    let mut order: Vec<usize> = rows.to_vec();
    order.sort_by_key(|&i| d.transactions[i].tx_id);

    let mut names: Vec<String> =
        vec!["amount".into(), "time_of_day".into(), "time_trend".into()];
    for (n, _) in &d.extra_cols {
        names.push(n.clone());
    }
    names.push("src_join_missing".into());
    names.push("tgt_join_missing".into());
    let node_dim = node_block.map_or(0, |b| b.names.len());
    if let Some(b) = node_block {
        for n in &b.names {
            names.push(format!("src_{n}"));
        }
        for n in &b.names {
            names.push(format!("tgt_{n}"));
        }
    }
    if scores.is_some() {
        names.extend(INTERACTION_FEATURE_NAMES.iter().map(|s| s.to_string()));
    }

    // node join map + per-column medians for imputation
    let (node_map, medians) = match node_block {
        Some(b) => {
            let mut m: HashMap<u32, &Vec<f64>> = HashMap::with_capacity(b.rows.len());
            for (n, v) in &b.rows {
                if v.len() != b.names.len() {
                    return Err(Error::data("node feature row width mismatch"));
                }
                if m.insert(*n, v).is_some() {
                    return Err(Error::data(format!(
                        "duplicate node feature row for node {n}"
                    )));
                }
            }
            let med: Vec<f64> = (0..node_dim)
                .map(|j| column_median(&mut b.rows.iter().map(|(_, v)| v[j]).collect()))
                .collect();
            (m, med)
        }
        None => (HashMap::new(), Vec::new()),
    };

    let interactions = scores.map(|s| {
        let txs: Vec<_> = order.iter().map(|&i| d.transactions[i]).collect();
        interaction_features(s, &txs)
    });

    let mut x = Matrix::zeros(order.len(), names.len());
    let mut labels = Vec::with_capacity(order.len());
    let mut tx_ids = Vec::with_capacity(order.len());
    for (r, &i) in order.iter().enumerate() {
        let t = &d.transactions[i];
        let mut row = Vec::with_capacity(names.len());
        row.push(t.amount);
        row.push((t.timestamp.rem_euclid(86_400)) as f64);
        row.push((t.timestamp - d.meta.min_timestamp) as f64);
        for (_, col) in &d.extra_cols {
            row.push(col[i]);
        }
        let mut flags = [0.0f64; 2];
        let mut joined: Vec<f64> = Vec::with_capacity(node_dim * 2);
        if node_block.is_some() {
            for (side, node) in [(0usize, t.source), (1usize, t.target)] {
                match node_map.get(&node) {
                    Some(v) => joined.extend_from_slice(v),
                    None => {
                        flags[side] = 1.0;
                        joined.extend_from_slice(&medians);
                    }
                }
            }
        }
        row.extend_from_slice(&flags);
        row.extend_from_slice(&joined);
        if let Some(inter) = &interactions {
            row.extend_from_slice(&inter[r]);
        }
        x.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&row);
        labels.push(t.label);
        tx_ids.push(t.tx_id);
    }
    Ok(FeatureMatrix { names, x, labels, tx_ids })
}

// ---- gradient-boosted trees ----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbdtParams {
    pub rounds: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub early_stopping_rounds: usize,
    pub n_bins: usize,
    pub subsample: f64,
    pub lambda: f64,
    /// positive-class weight; None = N_neg / N_pos
    pub pos_weight: Option<f64>,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            rounds: 500,
            depth: 8,
            learning_rate: 0.1,
            early_stopping_rounds: 50,
            n_bins: 256,
            subsample: 0.8,
            lambda: 1.0,
            pos_weight: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum GNode {
    Leaf { value: f64 },
    Split { feature: u32, bin: u16, left: u32, right: u32 },
}

#[derive(Debug, Clone, PartialEq)]
struct GTree {
    nodes: Vec<GNode>,
}

/// Binned-histogram gradient-boosted trees with logistic loss. Missing
/// values occupy bin 0 and always follow the left branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gbdt {
    bin_edges: Vec<Vec<f64>>,
    trees: Vec<GTree>,
    learning_rate: f64,
    pub best_round: usize,
    pub best_valid_f1: f64,
}

fn bin_value(edges: &[f64], v: f64) -> u16 {
    if v.is_nan() {
        0
    } else {
        1 + edges.partition_point(|&e| e < v) as u16
    }
}

fn build_edges(x: &Matrix, n_bins: usize) -> Vec<Vec<f64>> {
    (0..x.cols)
        .map(|j| {
            let mut vals: Vec<f64> =
                (0..x.rows).map(|i| x.get(i, j)).filter(|v| v.is_finite()).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            if vals.len() <= 1 {
                return Vec::new();
            }
            vals.pop(); // a cut at the max would send every row left
            let max_edges = n_bins.saturating_sub(2).max(1);
            if vals.len() <= max_edges {
                vals
            } else {
                (0..max_edges)
                    .map(|k| vals[k * vals.len() / max_edges])
                    .collect::<Vec<f64>>()
            }
        })
        .collect()
}

fn bin_matrix(x: &Matrix, edges: &[Vec<f64>]) -> Vec<u16> {
    let mut out = vec![0u16; x.rows * x.cols];
    for i in 0..x.rows {
        for j in 0..x.cols {
            out[i * x.cols + j] = bin_value(&edges[j], x.get(i, j));
        }
    }
    out
}

struct TreeBuilder<'a> {
    binned: &'a [u16],
    cols: usize,
    grad: &'a [f64],
    hess: &'a [f64],
    n_bins: usize,
    depth: usize,
    lambda: f64,
}

impl TreeBuilder<'_> {
    fn build(&self, rows: Vec<usize>) -> GTree {
        let mut nodes = Vec::new();
        self.node(rows, 0, &mut nodes);
        GTree { nodes }
    }

    fn node(&self, rows: Vec<usize>, depth: usize, nodes: &mut Vec<GNode>) -> u32 {
        let id = nodes.len() as u32;
        let mut g = 0.0;
        let mut h = 0.0;
        for &r in &rows {
            g += self.grad[r];
            h += self.hess[r];
        }
        let leaf = |nodes: &mut Vec<GNode>| {
            nodes.push(GNode::Leaf { value: -g / (h + self.lambda) });
        };
        if depth >= self.depth || rows.len() < 2 {
            leaf(nodes);
            return id;
        }

        // per-feature gradient histograms; best split by gain
        let best = (0..self.cols)
            .into_par_iter()
            .map(|j| {
                let mut gh = vec![0.0f64; self.n_bins];
                let mut hh = vec![0.0f64; self.n_bins];
                for &r in &rows {
                    let b = self.binned[r * self.cols + j] as usize;
                    gh[b] += self.grad[r];
                    hh[b] += self.hess[r];
                }
                let parent = g * g / (h + self.lambda);
                let mut gl = 0.0;
                let mut hl = 0.0;
                let mut best: Option<(f64, u16)> = None;
                for s in 0..self.n_bins - 1 {
                    gl += gh[s];
                    hl += hh[s];
                    let (gr, hr) = (g - gl, h - hl);
                    if hl <= 0.0 || hr <= 0.0 {
                        continue;
                    }
                    let gain =
                        gl * gl / (hl + self.lambda) + gr * gr / (hr + self.lambda) - parent;
                    if gain > best.map_or(1e-12, |b| b.0) {
                        best = Some((gain, s as u16));
                    }
                }
                best.map(|(gain, s)| (gain, j as u32, s))
            })
            .reduce(
                || None,
                |a, b| match (a, b) {
                    (None, x) | (x, None) => x,
                    (Some(p), Some(q)) => {
                        // ties broken by lowest feature id for determinism
                        if q.0 > p.0 || (q.0 == p.0 && q.1 < p.1) {
                            Some(q)
                        } else {
                            Some(p)
                        }
                    }
                },
            );

        let Some((_, feature, bin)) = best else {
            leaf(nodes);
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&r| self.binned[r * self.cols + feature as usize] <= bin);
        if left_rows.is_empty() || right_rows.is_empty() {
            leaf(nodes);
            return id;
        }
        nodes.push(GNode::Leaf { value: 0.0 }); // placeholder
        let left = self.node(left_rows, depth + 1, nodes);
        let right = self.node(right_rows, depth + 1, nodes);
        nodes[id as usize] = GNode::Split { feature, bin, left, right };
        id
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Gbdt {
    fn tree_output(&self, tree: &GTree, row_bins: &[u16]) -> f64 {
        let mut n = 0usize;
        loop {
            match &tree.nodes[n] {
                GNode::Leaf { value } => return *value,
                GNode::Split { feature, bin, left, right } => {
                    n = if row_bins[*feature as usize] <= *bin {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    fn margins_binned(&self, binned: &[u16], rows: usize, cols: usize) -> Vec<f64> {
        (0..rows)
            .into_par_iter()
            .map(|i| {
                let rb = &binned[i * cols..(i + 1) * cols];
                self.trees.iter().map(|t| self.tree_output(t, rb)).sum::<f64>()
                    * self.learning_rate
            })
            .collect()
    }

    /// Predicted probability of the positive (illicit) class per row.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols != self.bin_edges.len() {
            return Err(Error::data(format!(
                "feature dimension mismatch: model has {}, input has {}",
                self.bin_edges.len(),
                x.cols
            )));
        }
        let binned = bin_matrix(x, &self.bin_edges);
        Ok(self.margins_binned(&binned, x.rows, x.cols).into_iter().map(sigmoid).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut w = BinWriter::new(f, MODEL_MAGIC, MODEL_VERSION)?;
        w.f64(self.learning_rate)?;
        w.u64(self.best_round as u64)?;
        w.f64(self.best_valid_f1)?;
        w.u64(self.bin_edges.len() as u64)?;
        for e in &self.bin_edges {
            w.f64_slice(e)?;
        }
        w.u64(self.trees.len() as u64)?;
        for t in &self.trees {
            w.u64(t.nodes.len() as u64)?;
            for n in &t.nodes {
                match n {
                    GNode::Leaf { value } => {
                        w.u8(0)?;
                        w.f64(*value)?;
                    }
                    GNode::Split { feature, bin, left, right } => {
                        w.u8(1)?;
                        w.u32(*feature)?;
                        w.u32(*bin as u32)?;
                        w.u32(*left)?;
                        w.u32(*right)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut r = BinReader::new(f, MODEL_MAGIC, MODEL_VERSION)?;
        let learning_rate = r.f64()?;
        let best_round = r.u64()? as usize;
        let best_valid_f1 = r.f64()?;
        let n_features = r.u64()? as usize;
        let mut bin_edges = Vec::with_capacity(n_features);
        for _ in 0..n_features {
            bin_edges.push(r.f64_slice()?);
        }
        let n_trees = r.u64()? as usize;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let n_nodes = r.u64()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                nodes.push(match r.u8()? {
                    0 => GNode::Leaf { value: r.f64()? },
                    _ => GNode::Split {
                        feature: r.u32()?,
                        bin: r.u32()? as u16,
                        left: r.u32()?,
                        right: r.u32()?,
                    },
                });
            }
            trees.push(GTree { nodes });
        }
        Ok(Self { bin_edges, trees, learning_rate, best_round, best_valid_f1 })
    }
}

/// Train with logistic loss, per-round 0.8 row subsampling, and early
/// stopping on validation minority-F1 at the tuned threshold.
pub fn train_classifier(
    train: &FeatureMatrix,
    valid: &FeatureMatrix,
    params: &GbdtParams,
    seed: u64,
) -> Result<Gbdt> {
    let n = train.x.rows;
    let pos = train.labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == n {
        return Err(Error::data("training data has a single class"));
    }
    if train.names != valid.names {
        return Err(Error::data("train/valid column mismatch"));
    }
    let pos_weight = params.pos_weight.unwrap_or((n - pos) as f64 / pos as f64);

    let edges = build_edges(&train.x, params.n_bins);
    let binned = bin_matrix(&train.x, &edges);
    let valid_binned = bin_matrix(&valid.x, &edges);
    let mut model = Gbdt {
        bin_edges: edges,
        trees: Vec::new(),
        learning_rate: params.learning_rate,
        best_round: 0,
        best_valid_f1: f64::NEG_INFINITY,
    };

    let mut margins = vec![0.0f64; n];
    let mut valid_margins = vec![0.0f64; valid.x.rows];
    let mut grad = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n];
    let mut rounds_since_best = 0usize;

    for round in 0..params.rounds {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            let w = if train.labels[i] == 1 { pos_weight } else { 1.0 };
            grad[i] = w * (p - train.labels[i] as f64);
            hess[i] = w * p * (1.0 - p);
        }
        let rows: Vec<usize> = if params.subsample < 1.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(round as u64));
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(((n as f64) * params.subsample).ceil() as usize);
            all.sort_unstable();
            all
        } else {
            (0..n).collect()
        };
        let builder = TreeBuilder {
            binned: &binned,
            cols: train.x.cols,
            grad: &grad,
            hess: &hess,
            n_bins: params.n_bins,
            depth: params.depth,
            lambda: params.lambda,
        };
        let tree = builder.build(rows);
        for i in 0..n {
            let rb = &binned[i * train.x.cols..(i + 1) * train.x.cols];
            margins[i] += params.learning_rate * model_output(&tree, rb);
        }
        for i in 0..valid.x.rows {
            let rb = &valid_binned[i * valid.x.cols..(i + 1) * valid.x.cols];
            valid_margins[i] += params.learning_rate * model_output(&tree, rb);
        }
        model.trees.push(tree);

        let scores: Vec<f64> = valid_margins.iter().map(|&m| sigmoid(m)).collect();
        let (_, conf) = tune_threshold(&scores, &valid.labels);
        let f1 = conf.f1();
        if f1 > model.best_valid_f1 {
            model.best_valid_f1 = f1;
            model.best_round = round + 1;
            rounds_since_best = 0;
        } else {
            rounds_since_best += 1;
            if rounds_since_best >= params.early_stopping_rounds {
                break;
            }
        }
    }
    model.trees.truncate(model.best_round.max(1));
    Ok(model)
}

fn model_output(tree: &GTree, row_bins: &[u16]) -> f64 {
    let mut n = 0usize;
    loop {
        match &tree.nodes[n] {
            GNode::Leaf { value } => return *value,
            GNode::Split { feature, bin, left, right } => {
                n = if row_bins[*feature as usize] <= *bin {
                    *left as usize
                } else {
                    *right as usize
                };
            }
        }
    }
}

// ---- evaluation ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_predictions(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (s, &l) in scores.iter().zip(labels) {
            match (*s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Threshold maximizing minority-class F1 on the given scores; ties go to
/// the highest threshold. Returns the threshold and its confusion matrix.
pub fn tune_threshold(scores: &[f64], labels: &[u8]) -> (f64, Confusion) {
    let total_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));

    // sweep from the highest score down; each distinct score is a candidate
    let mut best = (f64::INFINITY, Confusion { tp: 0, fp: 0, fn_: total_pos, tn: scores.len() as u64 - total_pos }, 0.0f64);
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0usize;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let c = Confusion {
            tp,
            fp,
            fn_: total_pos - tp,
            tn: scores.len() as u64 - total_pos - fp,
        };
        let f1 = c.f1();
        if f1 > best.2 {
            best = (thr, c, f1);
        }
    }
    (best.0, best.1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// pooled over seeds, so f1 is exactly the harmonic mean of these
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub per_seed: Vec<SeedResult>,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
}

impl EvalReport {
    /// "78.90 ± 0.35" (percents, two decimals)
    pub fn f1_mean_std(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.f1_mean, 100.0 * self.f1_std)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Tune the decision threshold on the validation split and apply it
/// unchanged to the test split.
pub fn evaluate(model: &Gbdt, valid: &FeatureMatrix, test: &FeatureMatrix) -> Result<(f64, Confusion)> {
    let valid_scores = model.predict_proba(&valid.x)?;
    let (threshold, _) = tune_threshold(&valid_scores, &valid.labels);
    let test_scores = model.predict_proba(&test.x)?;
    Ok((threshold, Confusion::from_predictions(&test_scores, &test.labels, threshold)))
}

/// Train and evaluate once per seed; report pooled precision/recall/F1 and
/// the per-seed mean ± std.
pub fn evaluate_seeds(
    train: &FeatureMatrix,
    valid: &FeatureMatrix,
    test: &FeatureMatrix,
    params: &GbdtParams,
    seeds: &[u64],
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::config("at least one seed required"));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut pooled = Confusion::default();
    for &seed in seeds {
        let model = train_classifier(train, valid, params, seed)?;
        let (threshold, conf) = evaluate(&model, valid, test)?;
        pooled.tp += conf.tp;
        pooled.fp += conf.fp;
        pooled.fn_ += conf.fn_;
        pooled.tn += conf.tn;
        per_seed.push(SeedResult {
            seed,
            threshold,
            precision: conf.precision(),
            recall: conf.recall(),
            f1: conf.f1(),
            rounds: model.best_round,
        });
    }
    let (f1_mean, f1_std) = mean_std(&per_seed.iter().map(|s| s.f1).collect::<Vec<_>>());
    let (recall_mean, recall_std) =
        mean_std(&per_seed.iter().map(|s| s.recall).collect::<Vec<_>>());
    Ok(EvalReport {
        train_size: train.x.rows,
        valid_size: valid.x.rows,
        test_size: test.x.rows,
        precision: pooled.precision(),
        recall: pooled.recall(),
        f1: pooled.f1(),
        threshold: per_seed[0].threshold,
        per_seed,
        f1_mean,
        f1_std,
        recall_mean,
        recall_std,
    })
}

/// Export predictions as CSV (tx_id, score, prediction, label).
pub fn export_predictions_csv(
    m: &FeatureMatrix,
    scores: &[f64],
    threshold: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "tx_id,score,prediction,label")?;
    for i in 0..m.x.rows {
        writeln!(
            f,
            "{},{},{},{}",
            m.tx_ids[i],
            scores[i],
            u8::from(scores[i] >= threshold),
            m.labels[i]
        )?;
    }
    Ok(())
}

// ---- ablation -----------------------------------------------------------------

/// Per-group node feature blocks plus the anomaly scores used for
/// interaction columns when the anomaly group is active.
#[derive(Debug, Clone, Default)]
pub struct AblationInputs {
    pub blocks: HashMap<String, NodeFeatureBlock>,
    pub scores: HashMap<u32, f64>,
}

fn assemble_for_groups(
    d: &Dataset,
    rows: &[usize],
    active: &[&str],
    inputs: &AblationInputs,
) -> Result<FeatureMatrix> {
    let block_refs: Vec<&NodeFeatureBlock> = active
        .iter()
        .filter(|g| **g != "transaction" && **g != "anomaly")
        .filter_map(|g| inputs.blocks.get(*g))
        .collect();
    let merged;
    let node_block = if block_refs.is_empty() {
        None
    } else {
        merged = merge_blocks(&block_refs)?;
        Some(&merged)
    };
    let scores = active.contains(&"anomaly").then_some(&inputs.scores);
    assemble_features(d, rows, node_block, scores)
}

/// One train/evaluate per cumulative prefix of `groups`, plus the
/// standalone transaction+anomaly run when anomaly is among the groups.
/// Returns (label, test minority F1) rows.
pub fn ablation_run(
    d: &Dataset,
    splits: &SplitRows,
    groups: &[String],
    inputs: &AblationInputs,
    params: &GbdtParams,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    for g in groups {
        if !ABLATION_GROUPS.contains(&g.as_str()) {
            return Err(Error::config(format!("unknown feature group '{g}'")));
        }
    }
    let mut runs: Vec<(String, Vec<&str>)> = Vec::new();
    let mut prefix: Vec<&str> = Vec::new();
    for g in groups {
        prefix.push(g.as_str());
        runs.push((prefix.join("+"), prefix.clone()));
    }
    if groups.iter().any(|g| g == "anomaly") && groups.len() > 2 {
        runs.push(("transaction+anomaly".into(), vec!["transaction", "anomaly"]));
    }

    let mut out = Vec::with_capacity(runs.len());
    for (label, active) in runs {
        let train = assemble_for_groups(d, &splits.train, &active, inputs)?;
        let valid = assemble_for_groups(d, &splits.valid, &active, inputs)?;
        let test = assemble_for_groups(d, &splits.test, &active, inputs)?;
        let model = train_classifier(&train, &valid, params, seed)?;
        let (_, conf) = evaluate(&model, &valid, &test)?;
        out.push((label, conf.f1()));
    }
    Ok(out)
}

// ---- leakage audit --------------------------------------------------------------

/// For account-based splits: verify that every transaction used to build
/// features is train/valid-visible and touches no test-assigned account, so
/// no test-account label or activity can influence a train-row feature.
pub fn leakage_audit(
    d: &Dataset,
    splits: &AccountSplits,
    feature_tx_rows: &[usize],
) -> Result<()> {
    for &i in feature_tx_rows {
        let t = &d.transactions[i];
        if splits.of_transaction(t) == Split::Test {
            return Err(Error::data(format!(
                "feature build uses test-split transaction {}",
                t.tx_id
            )));
        }
        for node in [t.source, t.target] {
            if splits.account_split[node as usize] == Split::Test {
                return Err(Error::data(format!(
                    "feature build touches test-split account {node}"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{DatasetMeta, IdMap, Transaction};
    use rand::Rng;

    fn toy_dataset(txs: Vec<Transaction>) -> Dataset {
        let n_nodes = txs
            .iter()
            .flat_map(|t| [t.source, t.target])
            .max()
            .map_or(0, |m| m as u64 + 1);
        let mut id_map = IdMap::default();
        for i in 0..n_nodes {
            id_map.intern(&format!("acct{i}"));
        }
        let min_ts = txs.iter().map(|t| t.timestamp).min().unwrap_or(0);
        let max_ts = txs.iter().map(|t| t.timestamp).max().unwrap_or(0);
        let meta = DatasetMeta {
            nodes: n_nodes,
            edges: txs.len() as u64,
            illicit_rate: 0.0,
            timespan_seconds: max_ts - min_ts,
            timespan_days: 0.0,
            total_amount: txs.iter().map(|t| t.amount).sum(),
            min_timestamp: min_ts,
            max_timestamp: max_ts,
        };
        Dataset { transactions: txs, id_map, meta, extra_cols: vec![] }
    }

    fn tx(id: u64, ts: i64, s: u32, t: u32, a: f64, label: u8) -> Transaction {
        Transaction { tx_id: id, timestamp: ts, source: s, target: t, amount: a, label }
    }

    fn three_feature_block() -> NodeFeatureBlock {
        NodeFeatureBlock {
            names: vec!["f0".into(), "f1".into(), "f2".into()],
            rows: vec![
                (0, vec![1.0, 2.0, 3.0]),
                (1, vec![4.0, 5.0, 6.0]),
                (2, vec![7.0, 8.0, 9.0]),
            ],
        }
    }

    #[test]
    fn column_arithmetic() {
        let d = toy_dataset(vec![tx(0, 10, 0, 1, 5.0, 0), tx(1, 20, 1, 2, 6.0, 1)]);
        let block = three_feature_block();
        let scores: HashMap<u32, f64> = [(0, 0.1), (1, 0.2), (2, 0.3)].into();
        let m = assemble_features(&d, &[0, 1], Some(&block), Some(&scores)).unwrap();
        // base (amount, time_of_day, trend, 2 join flags) + 3 src + 3 tgt
        // + 6 interactions + imputed flag
        assert_eq!(m.x.rows, 2);
        assert_eq!(m.names.len(), 5 + 3 + 3 + 6 + 1);
    }

    #[test]
    fn unseen_account_imputed_with_flag() {
        let d = toy_dataset(vec![tx(0, 10, 0, 3, 5.0, 0)]);
        let block = three_feature_block();
        let m = assemble_features(&d, &[0], Some(&block), None).unwrap();
        let flag_col = m.names.iter().position(|n| n == "tgt_join_missing").unwrap();
        assert_eq!(m.x.get(0, flag_col), 1.0);
        // median of {1,4,7} = 4 imputed into the first target column
        let tgt0 = m.names.iter().position(|n| n == "tgt_f0").unwrap();
        assert_eq!(m.x.get(0, tgt0), 4.0);
        assert_eq!(m.x.get(0, m.names.iter().position(|n| n == "src_join_missing").unwrap()), 0.0);
    }

    #[test]
    fn row_order_is_tx_id_sorted() {
        let d = toy_dataset(vec![tx(5, 10, 0, 1, 5.0, 0), tx(2, 20, 1, 2, 6.0, 1)]);
        let a = assemble_features(&d, &[0, 1], None, None).unwrap();
        let b = assemble_features(&d, &[1, 0], None, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tx_ids, vec![2, 5]);
    }

    #[test]
    fn duplicate_node_rows_rejected() {
        let d = toy_dataset(vec![tx(0, 10, 0, 1, 5.0, 0)]);
        let mut block = three_feature_block();
        block.rows.push((1, vec![0.0, 0.0, 0.0]));
        assert!(assemble_features(&d, &[0], Some(&block), None).is_err());
    }

    #[test]
    fn merge_blocks_fills_missing_with_nan() {
        let a = NodeFeatureBlock { names: vec!["a".into()], rows: vec![(0, vec![1.0])] };
        let b = NodeFeatureBlock { names: vec!["b".into()], rows: vec![(1, vec![2.0])] };
        let m = merge_blocks(&[&a, &b]).unwrap();
        assert_eq!(m.names, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(m.rows.len(), 2);
        assert!(m.rows[0].1[1].is_nan());
        assert!(m.rows[1].1[0].is_nan());
    }

    fn separable_matrices() -> (FeatureMatrix, FeatureMatrix) {
        // y = 1 iff feature0 > 0.5, clearly separable
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let make = |n: usize, rng: &mut ChaCha8Rng| {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..n {
                let y = rng.gen_bool(0.3);
                let x0 = if y { rng.gen_range(0.6..1.0) } else { rng.gen_range(0.0..0.4) };
                rows.push(vec![x0, rng.gen::<f64>()]);
                labels.push(u8::from(y));
            }
            FeatureMatrix {
                names: vec!["x0".into(), "x1".into()],
                x: Matrix::from_rows(&rows),
                labels,
                tx_ids: (0..n as u64).collect(),
            }
        };
        (make(300, &mut rng), make(100, &mut rng))
    }

    #[test]
    fn separable_toy_perfect_f1() {
        let (train, valid) = separable_matrices();
        let params = GbdtParams { rounds: 20, depth: 3, ..Default::default() };
        let model = train_classifier(&train, &valid, &params, 1).unwrap();
        let scores = model.predict_proba(&train.x).unwrap();
        let (_, conf) = tune_threshold(&scores, &train.labels);
        assert_eq!(conf.f1(), 1.0);
    }

    #[test]
    fn single_class_training_errors() {
        let (mut train, valid) = separable_matrices();
        train.labels.iter_mut().for_each(|l| *l = 0);
        assert!(train_classifier(&train, &valid, &GbdtParams::default(), 1).is_err());
    }

    #[test]
    fn fixed_seed_deterministic() {
        let (train, valid) = separable_matrices();
        let params = GbdtParams { rounds: 15, depth: 3, ..Default::default() };
        let a = train_classifier(&train, &valid, &params, 7).unwrap();
        let b = train_classifier(&train, &valid, &params, 7).unwrap();
        assert_eq!(a, b);
    }

    fn noisy_imbalanced() -> (FeatureMatrix, FeatureMatrix, FeatureMatrix) {
        // weak signal + 5% positives so class weighting matters
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut make = |n: usize| {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..n {
                let y = rng.gen_bool(0.05);
                let base = if y { 0.6 } else { 0.4 };
                rows.push(vec![base + rng.gen_range(-0.35..0.35), rng.gen::<f64>()]);
                labels.push(u8::from(y));
            }
            FeatureMatrix {
                names: vec!["x0".into(), "x1".into()],
                x: Matrix::from_rows(&rows),
                labels,
                tx_ids: (0..n as u64).collect(),
            }
        };
        (make(2000), make(600), make(600))
    }

    #[test]
    fn class_weight_does_not_hurt_recall() {
        let (train, valid, test) = noisy_imbalanced();
        let weighted = GbdtParams { rounds: 40, depth: 3, ..Default::default() };
        let unweighted =
            GbdtParams { rounds: 40, depth: 3, pos_weight: Some(1.0), ..Default::default() };
        let mw = train_classifier(&train, &valid, &weighted, 1).unwrap();
        let mu = train_classifier(&train, &valid, &unweighted, 1).unwrap();
        // same fixed threshold for a like-for-like comparison of the raw scores
        let rw = Confusion::from_predictions(
            &mw.predict_proba(&test.x).unwrap(),
            &test.labels,
            0.5,
        );
        let ru = Confusion::from_predictions(
            &mu.predict_proba(&test.x).unwrap(),
            &test.labels,
            0.5,
        );
        assert!(rw.recall() >= ru.recall(), "{} < {}", rw.recall(), ru.recall());
    }

    #[test]
    fn confusion_arithmetic() {
        let c = Confusion { tp: 7, fp: 3, fn_: 3, tn: 100 };
        assert!((c.precision() - 0.7).abs() < 1e-12);
        assert!((c.recall() - 0.7).abs() < 1e-12);
        assert!((c.f1() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_degenerate_predictions() {
        let labels = vec![0, 1, 0, 1];
        let perfect = Confusion::from_predictions(&[0.1, 0.9, 0.2, 0.8], &labels, 0.5);
        assert_eq!(perfect.f1(), 1.0);
        assert_eq!(perfect.recall(), 1.0);
        let none = Confusion::from_predictions(&[0.1, 0.2, 0.2, 0.1], &labels, 0.5);
        assert_eq!(none.f1(), 0.0);
        assert_eq!(none.recall(), 0.0);
    }

    #[test]
    fn f1_is_harmonic_mean() {
        let (train, valid) = separable_matrices();
        let params = GbdtParams { rounds: 10, depth: 3, ..Default::default() };
        let report = evaluate_seeds(&train, &valid, &valid, &params, &[1, 2, 3]).unwrap();
        let harmonic = 2.0 * report.precision * report.recall
            / (report.precision + report.recall);
        assert!((report.f1 - harmonic).abs() < 1e-9);
        assert_eq!(report.per_seed.len(), 3);
        assert!(report.f1_mean_std().contains('±'));
    }

    #[test]
    fn threshold_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let scores: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<u8> = scores.iter().map(|&s| u8::from(s + rng.gen::<f64>() > 1.0)).collect();
        let (t1, c1) = tune_threshold(&scores, &labels);
        let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s + 1.0).tanh()).collect();
        let (t2, c2) = tune_threshold(&transformed, &labels);
        assert_eq!(c1, c2);
        assert!((t2 - (3.0 * t1 + 1.0).tanh()).abs() < 1e-12);
    }

    #[test]
    fn model_round_trips() {
        let (train, valid) = separable_matrices();
        let params = GbdtParams { rounds: 10, depth: 3, ..Default::default() };
        let model = train_classifier(&train, &valid, &params, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        model.save(&path).unwrap();
        let loaded = Gbdt::load(&path).unwrap();
        assert_eq!(model, loaded);
        let a = model.predict_proba(&valid.x).unwrap();
        let b = loaded.predict_proba(&valid.x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    fn ablation_fixture() -> (Dataset, SplitRows, AblationInputs) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut txs = Vec::new();
        for i in 0..300u64 {
            let s = rng.gen_range(0..10u32);
            let mut t = rng.gen_range(0..10u32);
            if t == s {
                t = (t + 1) % 10;
            }
            let label = u8::from(rng.gen_bool(0.2));
            let amount = if label == 1 { rng.gen_range(50.0..60.0) } else { rng.gen_range(1.0..40.0) };
            txs.push(tx(i, i as i64 * 10, s, t, amount, label));
        }
        let d = toy_dataset(txs);
        let n = d.transactions.len();
        let splits = SplitRows {
            train: (0..n * 6 / 10).collect(),
            valid: (n * 6 / 10..n * 8 / 10).collect(),
            test: (n * 8 / 10..n).collect(),
        };
        let mut inputs = AblationInputs::default();
        inputs.blocks.insert(
            "random_walk".into(),
            NodeFeatureBlock {
                names: vec!["deg".into()],
                rows: (0..10).map(|i| (i, vec![i as f64])).collect(),
            },
        );
        for i in 0..10u32 {
            inputs.scores.insert(i, i as f64 / 10.0);
        }
        (d, splits, inputs)
    }

    #[test]
    fn single_group_single_row() {
        let (d, splits, inputs) = ablation_fixture();
        let params = GbdtParams { rounds: 5, depth: 3, ..Default::default() };
        let rows =
            ablation_run(&d, &splits, &["transaction".into()], &inputs, &params, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, "transaction");
    }

    #[test]
    fn unknown_group_rejected() {
        let (d, splits, inputs) = ablation_fixture();
        let err = ablation_run(
            &d,
            &splits,
            &["transaction".into(), "bogus".into()],
            &inputs,
            &GbdtParams::default(),
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn full_grid_adds_standalone_anomaly_row() {
        let (d, splits, inputs) = ablation_fixture();
        let params = GbdtParams { rounds: 5, depth: 3, ..Default::default() };
        let groups: Vec<String> =
            vec!["transaction".into(), "random_walk".into(), "anomaly".into()];
        let rows = ablation_run(&d, &splits, &groups, &inputs, &params, 1).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.last().unwrap().0, "transaction+anomaly");
    }

    #[test]
    fn leakage_audit_flags_test_rows() {
        let d = toy_dataset(vec![
            tx(0, 10, 0, 1, 5.0, 0),
            tx(1, 20, 1, 2, 6.0, 0),
            tx(2, 30, 2, 3, 7.0, 1),
        ]);
        let splits = AccountSplits {
            account_split: vec![Split::Train, Split::Train, Split::Valid, Split::Test],
            train_accounts: vec![0, 1],
            valid_accounts: vec![2],
            test_accounts: vec![3],
        };
        assert!(leakage_audit(&d, &splits, &[0, 1]).is_ok());
        // row 2 touches the test account 3
        assert!(leakage_audit(&d, &splits, &[0, 1, 2]).is_err());
    }
}
