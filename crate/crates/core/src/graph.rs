//! Directed transaction multigraph and the aggregated graph with per-node
//! sent/received totals and edge weights.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::util::KahanSum;

/// Edges stored columnar, sorted by (source, timestamp, tx_id), with a
/// CSR-style forward index and a reverse index for in-neighbor queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiGraph {
    pub node_count: usize,
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    pub amount: Vec<f64>,
    pub timestamp: Vec<i64>,
    pub tx_id: Vec<u64>,
    /// node -> range into the edge arrays, len node_count + 1
    pub out_index: Vec<usize>,
    /// edge ids sorted by (dst, timestamp, tx_id)
    pub in_edges: Vec<u32>,
    pub in_index: Vec<usize>,
    /// self-loop transactions removed during construction
    pub dropped_self_loops: u64,
}

impl MultiGraph {
    pub fn edge_count(&self) -> usize {
        self.src.len()
    }

    /// Edge ids leaving `node`, timestamp-sorted.
    pub fn out_range(&self, node: u32) -> std::ops::Range<usize> {
        self.out_index[node as usize]..self.out_index[node as usize + 1]
    }

    /// Positions into `in_edges` for edges entering `node`.
    pub fn in_range(&self, node: u32) -> std::ops::Range<usize> {
        self.in_index[node as usize]..self.in_index[node as usize + 1]
    }

    pub fn out_degree(&self, node: u32) -> usize {
        self.out_range(node).len()
    }

    pub fn in_degree(&self, node: u32) -> usize {
        self.in_range(node).len()
    }

    /// Edge-reversed copy. `negate_time` also negates timestamps so the
    /// chronological join of the forward walk applies unchanged to
    /// backward walks.
    pub fn reverse(&self, negate_time: bool) -> MultiGraph {
        let n = self.edge_count();
        let mut src = Vec::with_capacity(n);
        let mut dst = Vec::with_capacity(n);
        let mut amount = Vec::with_capacity(n);
        let mut timestamp = Vec::with_capacity(n);
        let mut tx_id = Vec::with_capacity(n);
        for i in 0..n {
            src.push(self.dst[i]);
            dst.push(self.src[i]);
            amount.push(self.amount[i]);
            timestamp.push(if negate_time { -self.timestamp[i] } else { self.timestamp[i] });
            tx_id.push(self.tx_id[i]);
        }
        build_multigraph_from_edges(self.node_count, src, dst, amount, timestamp, tx_id, 0)
    }
}

/// One row per distinct (source, target) pair with total amount, plus
/// per-node totals and per-edge weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedGraph {
    pub node_count: usize,
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    /// total amount per aggregated edge
    pub amount: Vec<f64>,
    /// A/S_s + A/R_t per aggregated edge, zero terms for zero denominators
    pub weight: Vec<f64>,
    pub out_index: Vec<usize>,
    pub in_edges: Vec<u32>,
    pub in_index: Vec<usize>,
    /// total sent per node
    pub sent: Vec<f64>,
    /// total received per node
    pub received: Vec<f64>,
}

impl AggregatedGraph {
    pub fn edge_count(&self) -> usize {
        self.src.len()
    }

    pub fn out_range(&self, node: u32) -> std::ops::Range<usize> {
        self.out_index[node as usize]..self.out_index[node as usize + 1]
    }

    pub fn in_range(&self, node: u32) -> std::ops::Range<usize> {
        self.in_index[node as usize]..self.in_index[node as usize + 1]
    }

    /// Locate the aggregated edge s -> t by binary search in s's out range.
    pub fn find_edge(&self, s: u32, t: u32) -> Option<usize> {
        let range = self.out_range(s);
        let slice = &self.dst[range.clone()];
        slice.binary_search(&t).ok().map(|i| range.start + i)
    }

    pub fn reverse(&self) -> AggregatedGraph {
        let mut edges: Vec<(u32, u32, f64)> =
            (0..self.edge_count()).map(|i| (self.dst[i], self.src[i], self.amount[i])).collect();
        edges.sort_by_key(|&(s, t, _)| (s, t));
        build_aggregated_from_unique_edges(self.node_count, edges)
    }
}

fn build_multigraph_from_edges(
    node_count: usize,
    src: Vec<u32>,
    dst: Vec<u32>,
    amount: Vec<f64>,
    timestamp: Vec<i64>,
    tx_id: Vec<u64>,
    dropped_self_loops: u64,
) -> MultiGraph {
    let n_edges = src.len();
    let mut order: Vec<u32> = (0..n_edges as u32).collect();
    order.sort_by_key(|&i| (src[i as usize], timestamp[i as usize], tx_id[i as usize]));
    let perm = |v: Vec<u32>, order: &[u32]| -> Vec<u32> {
        order.iter().map(|&i| v[i as usize]).collect()
    };
    let src2: Vec<u32> = perm(src, &order);
    let dst2: Vec<u32> = perm(dst, &order);
    let amount2: Vec<f64> = order.iter().map(|&i| amount[i as usize]).collect();
    let timestamp2: Vec<i64> = order.iter().map(|&i| timestamp[i as usize]).collect();
    let tx_id2: Vec<u64> = order.iter().map(|&i| tx_id[i as usize]).collect();

    let mut out_index = vec![0usize; node_count + 1];
    for &s in &src2 {
        out_index[s as usize + 1] += 1;
    }
    for i in 0..node_count {
        out_index[i + 1] += out_index[i];
    }

    let mut in_edges: Vec<u32> = (0..n_edges as u32).collect();
    in_edges.sort_by_key(|&i| (dst2[i as usize], timestamp2[i as usize], tx_id2[i as usize]));
    let mut in_index = vec![0usize; node_count + 1];
    for &e in &in_edges {
        in_index[dst2[e as usize] as usize + 1] += 1;
    }
    for i in 0..node_count {
        in_index[i + 1] += in_index[i];
    }

    MultiGraph {
        node_count,
        src: src2,
        dst: dst2,
        amount: amount2,
        timestamp: timestamp2,
        tx_id: tx_id2,
        out_index,
        in_edges,
        in_index,
        dropped_self_loops,
    }
}

/// Build the directed multigraph from a dataset. Self-loop transactions are
/// dropped; the count is recorded on the graph for reconciliation.
pub fn build_multigraph(d: &Dataset) -> MultiGraph {
    let node_count = d.id_map.len();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut amount = Vec::new();
    let mut timestamp = Vec::new();
    let mut tx_id = Vec::new();
    let mut dropped = 0u64;
    for t in &d.transactions {
        if t.source == t.target {
            dropped += 1;
            continue;
        }
        src.push(t.source);
        dst.push(t.target);
        amount.push(t.amount);
        timestamp.push(t.timestamp);
        tx_id.push(t.tx_id);
    }
    build_multigraph_from_edges(node_count, src, dst, amount, timestamp, tx_id, dropped)
}

fn build_aggregated_from_unique_edges(
    node_count: usize,
    edges: Vec<(u32, u32, f64)>,
) -> AggregatedGraph {
    let n_edges = edges.len();
    let mut src = Vec::with_capacity(n_edges);
    let mut dst = Vec::with_capacity(n_edges);
    let mut amount = Vec::with_capacity(n_edges);
    let mut sent_acc = vec![KahanSum::new(); node_count];
    let mut recv_acc = vec![KahanSum::new(); node_count];
    for &(s, t, a) in &edges {
        src.push(s);
        dst.push(t);
        amount.push(a);
        sent_acc[s as usize].add(a);
        recv_acc[t as usize].add(a);
    }
    let sent: Vec<f64> = sent_acc.iter().map(|k| k.total()).collect();
    let received: Vec<f64> = recv_acc.iter().map(|k| k.total()).collect();

    let mut out_index = vec![0usize; node_count + 1];
    for &s in &src {
        out_index[s as usize + 1] += 1;
    }
    for i in 0..node_count {
        out_index[i + 1] += out_index[i];
    }
    let mut in_edges: Vec<u32> = (0..n_edges as u32).collect();
    in_edges.sort_by_key(|&i| (dst[i as usize], src[i as usize]));
    let mut in_index = vec![0usize; node_count + 1];
    for &e in &in_edges {
        in_index[dst[e as usize] as usize + 1] += 1;
    }
    for i in 0..node_count {
        in_index[i + 1] += in_index[i];
    }

    let weight: Vec<f64> = (0..n_edges)
        .map(|i| {
            let a = amount[i];
            let s_term = if sent[src[i] as usize] > 0.0 { a / sent[src[i] as usize] } else { 0.0 };
            let r_term =
                if received[dst[i] as usize] > 0.0 { a / received[dst[i] as usize] } else { 0.0 };
            s_term + r_term
        })
        .collect();

    AggregatedGraph {
        node_count,
        src,
        dst,
        amount,
        weight,
        out_index,
        in_edges,
        in_index,
        sent,
        received,
    }
}

/// Group multigraph edges into unique (source, target) rows with exact
/// (compensated) amount sums and per-node totals.
pub fn aggregate(g: &MultiGraph) -> AggregatedGraph {
    // Edges are already sorted by source; group (source, target) pairs.
    let mut pair_amount: HashMap<(u32, u32), KahanSum> = HashMap::new();
    for i in 0..g.edge_count() {
        pair_amount.entry((g.src[i], g.dst[i])).or_insert_with(KahanSum::new).add(g.amount[i]);
    }
    let mut edges: Vec<(u32, u32, f64)> =
        pair_amount.into_iter().map(|((s, t), k)| (s, t, k.total())).collect();
    edges.sort_by_key(|&(s, t, _)| (s, t));
    build_aggregated_from_unique_edges(g.node_count, edges)
}

/// Eq.-style weight of the aggregated edge s -> t.
pub fn edge_weight(ag: &AggregatedGraph, s: u32, t: u32) -> Result<f64> {
    if s as usize >= ag.node_count {
        return Err(Error::UnknownNode(s));
    }
    let idx = ag.find_edge(s, t).ok_or(Error::EdgeNotFound(s, t))?;
    Ok(ag.weight[idx])
}

/// Export the aggregated graph as a CSV edge list for inspection.
pub fn export_aggregated_csv(ag: &AggregatedGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "source,target,amount,weight")?;
    for i in 0..ag.edge_count() {
        writeln!(f, "{},{},{},{}", ag.src[i], ag.dst[i], ag.amount[i], ag.weight[i])?;
    }
    Ok(())
}
