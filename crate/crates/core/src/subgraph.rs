//! Per-community feature extraction on induced subgraphs, run as a
//! deterministic parallel map with an optional on-disk spill store for the
//! materialized edge slices.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::communities::{CommunityTable, CommunityType};
use crate::error::{Error, Result};
use crate::flow::{classify_account_type, AccountType};
use crate::graph::{AggregatedGraph, MultiGraph};
use crate::util::{summarize, worker_pool, BinReader, BinWriter, KahanSum, Summary};

pub const SPILL_MAGIC: &[u8; 4] = b"TXSP";
pub const SPILL_VERSION: u32 = 1;

/// One multigraph edge of an induced slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceEdge {
    pub src: u32,
    pub dst: u32,
    pub amount: f64,
    pub timestamp: i64,
}

/// All multigraph edges with both endpoints in `members`.
pub fn induced_subgraph(mg: &MultiGraph, members: &[u32]) -> Vec<SliceEdge> {
    let member_set: HashSet<u32> = members.iter().copied().collect();
    let mut out = Vec::new();
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &m in &sorted {
        if (m as usize) < mg.node_count {
            for e in mg.out_range(m) {
                if member_set.contains(&mg.dst[e]) {
                    out.push(SliceEdge {
                        src: mg.src[e],
                        dst: mg.dst[e],
                        amount: mg.amount[e],
                        timestamp: mg.timestamp[e],
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeBlock {
    pub in_degree: Summary,
    pub out_degree: Summary,
    pub total_degree: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityFeatures {
    pub community_type: CommunityType,
    pub community_id: u32,
    pub member_count: u64,
    pub edge_count: u64,
    // membership by account type
    pub n_dispenser: u64,
    pub n_passthrough: u64,
    pub n_sink: u64,
    pub n_mixed: u64,
    pub n_inactive: u64,
    pub degrees: DegreeBlock,
    pub diameter: u32,
    pub diameter_approx: bool,
    pub assortativity: Option<f64>,
    pub biconnected_count: u64,
    pub articulation_count: u64,
    /// per-aggregated-edge amount stats inside the community
    pub edge_amount: Summary,
    /// |sum entering the member set - sum leaving it|, against the full graph
    pub boundary_turnover: f64,
    /// amount-weighted mean / std / lower median of shifted timestamps
    pub time_mean: f64,
    pub time_std: f64,
    pub time_median: f64,
    /// set when total amount was zero and unweighted stats were used
    pub time_unweighted_fallback: bool,
}

/// Flat feature vector layout used when joining community features onto
/// nodes. Assortativity None maps to NaN (the missing marker).
pub const COMMUNITY_FEATURE_NAMES: &[&str] = &[
    "member_count",
    "edge_count",
    "n_dispenser",
    "n_passthrough",
    "n_sink",
    "n_mixed",
    "n_inactive",
    "in_deg_min",
    "in_deg_max",
    "in_deg_mean",
    "in_deg_std",
    "out_deg_min",
    "out_deg_max",
    "out_deg_mean",
    "out_deg_std",
    "tot_deg_min",
    "tot_deg_max",
    "tot_deg_mean",
    "tot_deg_std",
    "diameter",
    "assortativity",
    "biconnected_count",
    "articulation_count",
    "edge_amount_min",
    "edge_amount_max",
    "edge_amount_mean",
    "edge_amount_sum",
    "boundary_turnover",
    "time_mean",
    "time_std",
    "time_median",
];

impl CommunityFeatures {
    pub fn to_feature_vec(&self) -> Vec<f64> {
        vec![
            self.member_count as f64,
            self.edge_count as f64,
            self.n_dispenser as f64,
            self.n_passthrough as f64,
            self.n_sink as f64,
            self.n_mixed as f64,
            self.n_inactive as f64,
            self.degrees.in_degree.min,
            self.degrees.in_degree.max,
            self.degrees.in_degree.mean,
            self.degrees.in_degree.std,
            self.degrees.out_degree.min,
            self.degrees.out_degree.max,
            self.degrees.out_degree.mean,
            self.degrees.out_degree.std,
            self.degrees.total_degree.min,
            self.degrees.total_degree.max,
            self.degrees.total_degree.mean,
            self.degrees.total_degree.std,
            self.diameter as f64,
            self.assortativity.unwrap_or(f64::NAN),
            self.biconnected_count as f64,
            self.articulation_count as f64,
            self.edge_amount.min,
            self.edge_amount.max,
            self.edge_amount.mean,
            self.edge_amount.sum,
            self.boundary_turnover,
            self.time_mean,
            self.time_std,
            self.time_median,
        ]
    }
}

// ---- graph metrics on a slice ----------------------------------------------

/// Local view of the slice: dense local ids, undirected simple adjacency,
/// and directed simple degree counts.
struct LocalGraph {
    n: usize,
    undirected: Vec<Vec<usize>>,
    in_deg: Vec<f64>,
    out_deg: Vec<f64>,
}

fn build_local(members: &[u32], edges: &[SliceEdge]) -> LocalGraph {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let n = sorted.len();
    let local = |g: u32| sorted.binary_search(&g).expect("member") as usize;

    let mut directed: HashSet<(usize, usize)> = HashSet::new();
    for e in edges {
        directed.insert((local(e.src), local(e.dst)));
    }
    let mut in_deg = vec![0.0f64; n];
    let mut out_deg = vec![0.0f64; n];
    let mut undirected_set: HashSet<(usize, usize)> = HashSet::new();
    for &(s, t) in &directed {
        out_deg[s] += 1.0;
        in_deg[t] += 1.0;
        undirected_set.insert((s.min(t), s.max(t)));
    }
    let mut undirected: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in &undirected_set {
        undirected[a].push(b);
        undirected[b].push(a);
    }
    for l in undirected.iter_mut() {
        l.sort_unstable();
    }
    LocalGraph { n, undirected, in_deg, out_deg }
}

pub fn degree_stats(members: &[u32], edges: &[SliceEdge]) -> DegreeBlock {
    let g = build_local(members, edges);
    let total: Vec<f64> = g.in_deg.iter().zip(&g.out_deg).map(|(a, b)| a + b).collect();
    DegreeBlock {
        in_degree: summarize(&g.in_deg),
        out_degree: summarize(&g.out_deg),
        total_degree: summarize(&total),
    }
}

fn bfs_ecc(adj: &[Vec<usize>], start: usize, dist: &mut [u32]) -> (usize, u32) {
    for d in dist.iter_mut() {
        *d = u32::MAX;
    }
    dist[start] = 0;
    let mut queue = std::collections::VecDeque::from([start]);
    let mut far = (start, 0u32);
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v] {
            if dist[u] == u32::MAX {
                dist[u] = dist[v] + 1;
                if dist[u] > far.1 || (dist[u] == far.1 && u < far.0) {
                    far = (u, dist[u]);
                }
                queue.push_back(u);
            }
        }
    }
    far
}

/// Longest shortest path on the undirected simple projection, max over
/// connected components. Above `node_cap`, a double-BFS lower bound is used
/// and the result flagged approximate.
pub fn diameter(members: &[u32], edges: &[SliceEdge], node_cap: usize) -> (u32, bool) {
    let g = build_local(members, edges);
    if g.n == 0 {
        return (0, false);
    }
    let approx = g.n > node_cap;
    let mut dist = vec![u32::MAX; g.n];
    let mut best = 0u32;
    if approx {
        // 2-sweep per component
        let mut seen = vec![false; g.n];
        for start in 0..g.n {
            if seen[start] {
                continue;
            }
            let (far, _) = bfs_ecc(&g.undirected, start, &mut dist);
            for (i, &d) in dist.iter().enumerate() {
                if d != u32::MAX {
                    seen[i] = true;
                }
            }
            let (_, ecc) = bfs_ecc(&g.undirected, far, &mut dist);
            best = best.max(ecc);
        }
    } else {
        for start in 0..g.n {
            let (_, ecc) = bfs_ecc(&g.undirected, start, &mut dist);
            best = best.max(ecc);
        }
    }
    (best, approx)
}

/// Pearson correlation of endpoint total degrees over undirected simple
/// edges (both orientations). None when degenerate.
pub fn assortativity(members: &[u32], edges: &[SliceEdge]) -> Option<f64> {
    let g = build_local(members, edges);
    let total: Vec<f64> = g.in_deg.iter().zip(&g.out_deg).map(|(a, b)| a + b).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for v in 0..g.n {
        for &u in &g.undirected[v] {
            xs.push(total[v]);
            ys.push(total[u]);
        }
    }
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (xs[i] - mx) * (ys[i] - my);
        vx += (xs[i] - mx) * (xs[i] - mx);
        vy += (ys[i] - my) * (ys[i] - my);
    }
    let denom = (vx * vy).sqrt();
    if denom < 1e-12 {
        None
    } else {
        Some(cov / denom)
    }
}

/// Biconnected component and articulation point counts via iterative
/// low-link DFS on the undirected simple projection.
pub fn biconnected_components(members: &[u32], edges: &[SliceEdge]) -> (u64, u64) {
    let g = build_local(members, edges);
    let n = g.n;
    let adj = &g.undirected;
    let mut disc = vec![0usize; n];
    let mut low = vec![0usize; n];
    let mut parent = vec![usize::MAX; n];
    let mut ptr = vec![0usize; n];
    let mut is_artic = vec![false; n];
    let mut edge_stack: Vec<(usize, usize)> = Vec::new();
    let mut timer = 1usize;
    let mut bcc = 0u64;

    for root in 0..n {
        if disc[root] != 0 {
            continue;
        }
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        let mut root_children = 0usize;
        let mut stack = vec![root];
        while let Some(&v) = stack.last() {
            if ptr[v] < adj[v].len() {
                let u = adj[v][ptr[v]];
                ptr[v] += 1;
                if disc[u] == 0 {
                    parent[u] = v;
                    edge_stack.push((v, u));
                    disc[u] = timer;
                    low[u] = timer;
                    timer += 1;
                    stack.push(u);
                } else if u != parent[v] && disc[u] < disc[v] {
                    edge_stack.push((v, u));
                    low[v] = low[v].min(disc[u]);
                }
            } else {
                stack.pop();
                if let Some(&p) = stack.last() {
                    low[p] = low[p].min(low[v]);
                    if low[v] >= disc[p] {
                        bcc += 1;
                        while let Some(e) = edge_stack.pop() {
                            if e == (p, v) {
                                break;
                            }
                        }
                        if p == root {
                            root_children += 1;
                        } else {
                            is_artic[p] = true;
                        }
                    }
                }
            }
        }
        if root_children >= 2 {
            is_artic[root] = true;
        }
    }
    (bcc, is_artic.iter().filter(|&&a| a).count() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurnoverBlock {
    pub edge_amount: Summary,
    pub boundary_turnover: f64,
}

/// Per-aggregated-edge amount stats inside the community plus the absolute
/// in/out imbalance of the member set against the full graph.
pub fn turnover(edges: &[SliceEdge], members: &[u32], ag: &AggregatedGraph) -> TurnoverBlock {
    let mut by_pair: HashMap<(u32, u32), KahanSum> = HashMap::new();
    for e in edges {
        by_pair.entry((e.src, e.dst)).or_insert_with(KahanSum::new).add(e.amount);
    }
    let amounts: Vec<f64> = {
        let mut pairs: Vec<((u32, u32), f64)> =
            by_pair.into_iter().map(|(k, v)| (k, v.total())).collect();
        pairs.sort_by_key(|&(k, _)| k);
        pairs.into_iter().map(|(_, a)| a).collect()
    };

    let member_set: HashSet<u32> = members.iter().copied().collect();
    let mut inflow = KahanSum::new();
    let mut outflow = KahanSum::new();
    for &m in &member_set {
        if (m as usize) >= ag.node_count {
            continue;
        }
        for e in ag.out_range(m) {
            if !member_set.contains(&ag.dst[e]) {
                outflow.add(ag.amount[e]);
            }
        }
        for pos in ag.in_range(m) {
            let e = ag.in_edges[pos] as usize;
            if !member_set.contains(&ag.src[e]) {
                inflow.add(ag.amount[e]);
            }
        }
    }
    TurnoverBlock {
        edge_amount: summarize(&amounts),
        boundary_turnover: (inflow.total() - outflow.total()).abs(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeBlock {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub unweighted_fallback: bool,
}

/// Amount-weighted mean, std, and lower median of timestamps shifted by the
/// dataset-global minimum. Falls back to unweighted stats when the total
/// amount is zero.
pub fn weighted_time_features(edges: &[SliceEdge], global_min_ts: i64) -> TimeBlock {
    if edges.is_empty() {
        return TimeBlock { mean: 0.0, std: 0.0, median: 0.0, unweighted_fallback: false };
    }
    let chi: Vec<f64> = edges.iter().map(|e| (e.timestamp - global_min_ts) as f64).collect();
    let mut total = KahanSum::new();
    for e in edges {
        total.add(e.amount);
    }
    let total = total.total();
    let (weights, fallback) = if total > 0.0 {
        (edges.iter().map(|e| e.amount).collect::<Vec<f64>>(), false)
    } else {
        (vec![1.0; edges.len()], true)
    };
    let wsum: f64 = if total > 0.0 { total } else { edges.len() as f64 };

    let mut mean_acc = KahanSum::new();
    for (x, w) in chi.iter().zip(&weights) {
        mean_acc.add(x * w);
    }
    let mean = mean_acc.total() / wsum;
    let mut var_acc = KahanSum::new();
    for (x, w) in chi.iter().zip(&weights) {
        var_acc.add(w * (x - mean) * (x - mean));
    }
    let std = (var_acc.total() / wsum).sqrt();

    // lower weighted median: smallest chi with cumulative weight >= half
    let mut order: Vec<usize> = (0..chi.len()).collect();
    order.sort_by(|&a, &b| chi[a].partial_cmp(&chi[b]).unwrap_or(std::cmp::Ordering::Equal));
    let half = wsum / 2.0;
    let mut cum = 0.0;
    let mut median = chi[*order.last().unwrap()];
    for &i in &order {
        cum += weights[i];
        if cum >= half {
            median = chi[i];
            break;
        }
    }
    TimeBlock { mean, std, median, unweighted_fallback: fallback }
}

// ---- feature assembly per community -----------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMapConfig {
    pub workers: usize,
    /// communities larger than this use the approximate diameter
    pub diameter_node_cap: usize,
    /// in-memory fast path while total slice bytes stay under this budget
    pub memory_budget_bytes: usize,
    pub spill_dir: Option<PathBuf>,
    pub theta_pass: f64,
    pub theta_ratio: f64,
}

impl Default for FeatureMapConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            diameter_node_cap: 10_000,
            memory_budget_bytes: 512 << 20,
            spill_dir: None,
            theta_pass: 0.8,
            theta_ratio: 0.1,
        }
    }
}

fn community_features(
    ty: CommunityType,
    id: u32,
    members: &[u32],
    edges: &[SliceEdge],
    ag: &AggregatedGraph,
    global_min_ts: i64,
    cfg: &FeatureMapConfig,
) -> CommunityFeatures {
    let mut counts = [0u64; 5];
    for &m in members {
        let t = classify_account_type(ag, m, cfg.theta_pass, cfg.theta_ratio);
        let idx = match t {
            AccountType::Dispenser => 0,
            AccountType::Passthrough => 1,
            AccountType::Sink => 2,
            AccountType::Mixed => 3,
            AccountType::Inactive => 4,
        };
        counts[idx] += 1;
    }
    let degrees = degree_stats(members, edges);
    let (diam, approx) = diameter(members, edges, cfg.diameter_node_cap);
    let assort = assortativity(members, edges);
    let (bcc, artic) = biconnected_components(members, edges);
    let turn = turnover(edges, members, ag);
    let time = weighted_time_features(edges, global_min_ts);
    CommunityFeatures {
        community_type: ty,
        community_id: id,
        member_count: members.len() as u64,
        edge_count: edges.len() as u64,
        n_dispenser: counts[0],
        n_passthrough: counts[1],
        n_sink: counts[2],
        n_mixed: counts[3],
        n_inactive: counts[4],
        degrees,
        diameter: diam,
        diameter_approx: approx,
        assortativity: assort,
        biconnected_count: bcc,
        articulation_count: artic,
        edge_amount: turn.edge_amount,
        boundary_turnover: turn.boundary_turnover,
        time_mean: time.mean,
        time_std: time.std,
        time_median: time.median,
        time_unweighted_fallback: time.unweighted_fallback,
    }
}

// ---- spill store -------------------------------------------------------------

/// Materialized slices, either in memory or spilled to a single data file
/// addressed by a manifest of (community id, offset, length).
enum SliceStore {
    Memory(Vec<Vec<SliceEdge>>),
    Spilled { data_path: PathBuf, entries: Vec<(u64, u64)> },
}

const SLICE_EDGE_BYTES: usize = 4 + 4 + 8 + 8;

fn encode_slice(edges: &[SliceEdge]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(edges.len() * SLICE_EDGE_BYTES);
    for e in edges {
        buf.extend_from_slice(&e.src.to_le_bytes());
        buf.extend_from_slice(&e.dst.to_le_bytes());
        buf.extend_from_slice(&e.amount.to_le_bytes());
        buf.extend_from_slice(&e.timestamp.to_le_bytes());
    }
    buf
}

fn decode_slice(buf: &[u8]) -> Vec<SliceEdge> {
    let n = buf.len() / SLICE_EDGE_BYTES;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let b = &buf[i * SLICE_EDGE_BYTES..];
        out.push(SliceEdge {
            src: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            dst: u32::from_le_bytes(b[4..8].try_into().unwrap()),
            amount: f64::from_le_bytes(b[8..16].try_into().unwrap()),
            timestamp: i64::from_le_bytes(b[16..24].try_into().unwrap()),
        });
    }
    out
}

fn write_spill_store(
    dir: &Path,
    table: &CommunityTable,
    slices: &[Vec<SliceEdge>],
) -> Result<SliceStore> {
    std::fs::create_dir_all(dir)?;
    let data_path = dir.join("slices.bin");
    let mut data = std::io::BufWriter::new(std::fs::File::create(&data_path)?);
    let mut entries = Vec::with_capacity(slices.len());
    let mut offset = 0u64;
    for slice in slices {
        let buf = encode_slice(slice);
        data.write_all(&buf)?;
        entries.push((offset, buf.len() as u64));
        offset += buf.len() as u64;
    }
    data.flush()?;
    drop(data);

    let manifest_path = dir.join("manifest.bin");
    let mut w = BinWriter::new(
        std::io::BufWriter::new(std::fs::File::create(&manifest_path)?),
        SPILL_MAGIC,
        SPILL_VERSION,
    )?;
    w.u64(entries.len() as u64)?;
    for (i, &(off, len)) in entries.iter().enumerate() {
        let (ty, id, _) = &table.entries[i];
        w.u8(match ty {
            CommunityType::Leiden => 0,
            CommunityType::Ego => 1,
        })?;
        w.u32(*id)?;
        w.u64(off)?;
        w.u64(len)?;
    }
    Ok(SliceStore::Spilled { data_path, entries })
}

/// Validate a spill manifest and return its (type, id, offset, length) rows.
pub fn read_spill_manifest(dir: &Path) -> Result<Vec<(CommunityType, u32, u64, u64)>> {
    let mut r = BinReader::new(
        std::io::BufReader::new(std::fs::File::open(dir.join("manifest.bin"))?),
        SPILL_MAGIC,
        SPILL_VERSION,
    )?;
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let ty = match r.u8()? {
            0 => CommunityType::Leiden,
            _ => CommunityType::Ego,
        };
        out.push((ty, r.u32()?, r.u64()?, r.u64()?));
    }
    Ok(out)
}

impl SliceStore {
    fn load(&self, i: usize) -> Vec<SliceEdge> {
        match self {
            SliceStore::Memory(slices) => slices[i].clone(),
            SliceStore::Spilled { data_path, entries } => {
                use std::os::unix::fs::FileExt;
                let (off, len) = entries[i];
                let f = std::fs::File::open(data_path).expect("spill data file");
                let mut buf = vec![0u8; len as usize];
                f.read_exact_at(&mut buf, off).expect("spill read");
                decode_slice(&buf)
            }
        }
    }
}

/// One CommunityFeatures row per community, identical for any worker count.
/// Slices are spilled to disk when their total size exceeds the budget.
pub fn parallel_feature_map(
    table: &CommunityTable,
    mg: &MultiGraph,
    ag: &AggregatedGraph,
    global_min_ts: i64,
    cfg: &FeatureMapConfig,
) -> Result<Vec<CommunityFeatures>> {
    for (ty, id, members) in &table.entries {
        if let Some(&bad) = members.iter().find(|&&m| m as usize >= mg.node_count) {
            return Err(Error::data(format!(
                "community {ty}/{id} references unknown node {bad}"
            )));
        }
    }

    // materialize the edge slices (Alg.-style map side)
    let pool = worker_pool(cfg.workers);
    let slices: Vec<Vec<SliceEdge>> = pool.install(|| {
        table
            .entries
            .par_iter()
            .map(|(_, _, members)| induced_subgraph(mg, members))
            .collect()
    });
    let total_bytes: usize = slices.iter().map(|s| s.len() * SLICE_EDGE_BYTES).sum();
    let store = match (&cfg.spill_dir, total_bytes > cfg.memory_budget_bytes) {
        (Some(dir), true) => write_spill_store(dir, table, &slices)?,
        _ => SliceStore::Memory(slices),
    };

    let rows: Vec<CommunityFeatures> = pool.install(|| {
        table
            .entries
            .par_iter()
            .enumerate()
            .map(|(i, (ty, id, members))| {
                let edges = store.load(i);
                community_features(*ty, *id, members, &edges, ag, global_min_ts, cfg)
            })
            .collect()
    });
    Ok(rows)
}

/// Export the feature table as CSV.
pub fn export_features_csv(rows: &[CommunityFeatures], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "community_type,community_id,{}", COMMUNITY_FEATURE_NAMES.join(","))?;
    for r in rows {
        let vals: Vec<String> = r.to_feature_vec().iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},{},{}", r.community_type, r.community_id, vals.join(","))?;
    }
    Ok(())
}
