//! Hop-wise quantification of money flows per node for the dispenser,
//! passthrough, and sink profiles, in static (aggregated-graph) and
//! temporal (chronology-constrained multigraph) variants.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AggregatedGraph, MultiGraph};
use crate::util::worker_pool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Dispenser,
    Passthrough,
    Sink,
}

impl std::fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProfileKind::Dispenser => write!(f, "dispenser"),
            ProfileKind::Passthrough => write!(f, "passthrough"),
            ProfileKind::Sink => write!(f, "sink"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountType {
    Dispenser,
    Passthrough,
    Sink,
    Mixed,
    Inactive,
}

/// Per-hop carried-amount statistics: how much flow is carried forward and
/// to how many accounts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HopStats {
    pub hop: u32,
    pub reached_accounts: u64,
    pub carried_sum: f64,
    pub carried_max: f64,
    pub carried_mean: f64,
}

impl HopStats {
    fn zero(hop: u32) -> Self {
        Self { hop, reached_accounts: 0, carried_sum: 0.0, carried_max: 0.0, carried_mean: 0.0 }
    }

    fn elementwise_min(a: &HopStats, b: &HopStats) -> HopStats {
        debug_assert_eq!(a.hop, b.hop);
        HopStats {
            hop: a.hop,
            reached_accounts: a.reached_accounts.min(b.reached_accounts),
            carried_sum: a.carried_sum.min(b.carried_sum),
            carried_max: a.carried_max.min(b.carried_max),
            carried_mean: a.carried_mean.min(b.carried_mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowProfile {
    pub node: u32,
    pub profile: ProfileKind,
    pub per_hop: Vec<HopStats>,
    /// min(S, R) / max(S, R, eps); present on passthrough profiles
    pub passthrough_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub hops: usize,
    /// frontier truncation per hop; None means unbounded
    pub top_n: Option<usize>,
    pub theta_pass: f64,
    pub theta_ratio: f64,
    /// when true, temporal joins require strictly increasing timestamps
    pub strict_chronology: bool,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self { hops: 5, top_n: Some(50), theta_pass: 0.8, theta_ratio: 0.1, strict_chronology: false }
    }
}

fn stats_over(frontier: &[(u32, f64)], hop: u32) -> HopStats {
    if frontier.is_empty() {
        return HopStats::zero(hop);
    }
    let mut targets: Vec<u32> = frontier.iter().map(|&(t, _)| t).collect();
    targets.sort_unstable();
    targets.dedup();
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for &(_, c) in frontier {
        sum += c;
        max = max.max(c);
    }
    HopStats {
        hop,
        reached_accounts: targets.len() as u64,
        carried_sum: sum,
        carried_max: max,
        carried_mean: sum / frontier.len() as f64,
    }
}

fn truncate_frontier(frontier: &mut Vec<(u32, f64)>, top_n: Option<usize>) {
    // amount desc, target id asc; stable for deterministic duplicates
    frontier.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
    if let Some(n) = top_n {
        frontier.truncate(n);
    }
}

/// Hop-synchronous walk over the aggregated graph: carried amount is the
/// running minimum of edge amounts, clipped at the origin's total volume.
fn walk_static(
    ag: &AggregatedGraph,
    node: u32,
    origin_total: f64,
    params: &FlowParams,
) -> Vec<HopStats> {
    let mut per_hop = Vec::with_capacity(params.hops);
    let mut frontier: Vec<(u32, f64)> =
        ag.out_range(node).map(|e| (ag.dst[e], ag.amount[e])).collect();
    truncate_frontier(&mut frontier, params.top_n);
    per_hop.push(stats_over(&frontier, 1));

    for hop in 2..=params.hops as u32 {
        let mut next: Vec<(u32, f64)> = Vec::new();
        for &(t, carried) in &frontier {
            let clipped = carried.min(origin_total);
            for e in ag.out_range(t) {
                next.push((ag.dst[e], ag.amount[e].min(clipped)));
            }
        }
        truncate_frontier(&mut next, params.top_n);
        per_hop.push(stats_over(&next, hop));
        frontier = next;
    }
    per_hop
}

/// Walks forward from `node` along out-edges; quantifies how much of the
/// dispensed volume is carried onward per hop.
pub fn dispense_flow(ag: &AggregatedGraph, node: u32, params: &FlowParams) -> Result<FlowProfile> {
    if node as usize >= ag.node_count {
        return Err(Error::UnknownNode(node));
    }
    let per_hop = walk_static(ag, node, ag.sent[node as usize], params);
    Ok(FlowProfile { node, profile: ProfileKind::Dispenser, per_hop, passthrough_ratio: None })
}

/// Dispense walk on the edge-reversed graph with total credit as the clip.
pub fn sink_flow(ag: &AggregatedGraph, node: u32, params: &FlowParams) -> Result<FlowProfile> {
    sink_flow_prereversed(&ag.reverse(), node, params)
}

/// Sink flow when the caller already holds the reversed graph.
pub fn sink_flow_prereversed(
    rev: &AggregatedGraph,
    node: u32,
    params: &FlowParams,
) -> Result<FlowProfile> {
    if node as usize >= rev.node_count {
        return Err(Error::UnknownNode(node));
    }
    let per_hop = walk_static(rev, node, rev.sent[node as usize], params);
    Ok(FlowProfile { node, profile: ProfileKind::Sink, per_hop, passthrough_ratio: None })
}

pub fn passthrough_ratio(sent: f64, received: f64) -> f64 {
    let hi = sent.max(received);
    if hi <= 0.0 {
        0.0
    } else {
        sent.min(received) / hi
    }
}

fn compose_passthrough(
    node: u32,
    dispense: &FlowProfile,
    sink: &FlowProfile,
    sent: f64,
    received: f64,
) -> FlowProfile {
    let per_hop = dispense
        .per_hop
        .iter()
        .zip(&sink.per_hop)
        .map(|(d, s)| HopStats::elementwise_min(d, s))
        .collect();
    FlowProfile {
        node,
        profile: ProfileKind::Passthrough,
        per_hop,
        passthrough_ratio: Some(passthrough_ratio(sent, received)),
    }
}

/// Element-wise minimum of the dispense and sink statistics plus the
/// sent/received balance ratio.
pub fn passthrough_flow(
    ag: &AggregatedGraph,
    node: u32,
    params: &FlowParams,
) -> Result<FlowProfile> {
    let d = dispense_flow(ag, node, params)?;
    let s = sink_flow(ag, node, params)?;
    Ok(compose_passthrough(
        node,
        &d,
        &s,
        ag.sent[node as usize],
        ag.received[node as usize],
    ))
}

/// Temporal walk over raw transactions: a continuation is joined only when
/// it does not precede the previous transaction.
fn walk_temporal(
    mg: &MultiGraph,
    node: u32,
    origin_total: f64,
    params: &FlowParams,
) -> Vec<HopStats> {
    let mut per_hop = Vec::with_capacity(params.hops);
    // frontier entry: (target, carried, timestamp of the last hop)
    let mut frontier: Vec<(u32, f64, i64)> =
        mg.out_range(node).map(|e| (mg.dst[e], mg.amount[e], mg.timestamp[e])).collect();
    let sort_truncate = |f: &mut Vec<(u32, f64, i64)>| {
        f.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.2.cmp(&b.2))
        });
        if let Some(n) = params.top_n {
            f.truncate(n);
        }
    };
    sort_truncate(&mut frontier);
    let flat: Vec<(u32, f64)> = frontier.iter().map(|&(t, c, _)| (t, c)).collect();
    per_hop.push(stats_over(&flat, 1));

    for hop in 2..=params.hops as u32 {
        let mut next: Vec<(u32, f64, i64)> = Vec::new();
        for &(t, carried, ts) in &frontier {
            let clipped = carried.min(origin_total);
            let range = mg.out_range(t);
            // out-edges are timestamp-sorted: binary search the first
            // admissible continuation
            let ts_slice = &mg.timestamp[range.clone()];
            let start = if params.strict_chronology {
                ts_slice.partition_point(|&x| x <= ts)
            } else {
                ts_slice.partition_point(|&x| x < ts)
            };
            for e in range.start + start..range.end {
                next.push((mg.dst[e], mg.amount[e].min(clipped), mg.timestamp[e]));
            }
        }
        sort_truncate(&mut next);
        let flat: Vec<(u32, f64)> = next.iter().map(|&(t, c, _)| (t, c)).collect();
        per_hop.push(stats_over(&flat, hop));
        frontier = next;
    }
    per_hop
}

/// Temporal flow profile for `node`. For the sink profile the caller may
/// pass a pre-reversed multigraph via [`temporal_flow_prereversed`].
pub fn temporal_flow(
    mg: &MultiGraph,
    node: u32,
    profile: ProfileKind,
    params: &FlowParams,
) -> Result<FlowProfile> {
    let rev = mg.reverse(true);
    temporal_flow_prereversed(mg, &rev, node, profile, params)
}

/// Timestamps in `rev` must be negated so forward chronology on the
/// reversed graph models backward chronology on the original.
pub fn temporal_flow_prereversed(
    mg: &MultiGraph,
    rev: &MultiGraph,
    node: u32,
    profile: ProfileKind,
    params: &FlowParams,
) -> Result<FlowProfile> {
    if node as usize >= mg.node_count {
        return Err(Error::UnknownNode(node));
    }
    let debit: f64 = mg.out_range(node).map(|e| mg.amount[e]).sum();
    let credit: f64 = rev.out_range(node).map(|e| rev.amount[e]).sum();
    match profile {
        ProfileKind::Dispenser => Ok(FlowProfile {
            node,
            profile,
            per_hop: walk_temporal(mg, node, debit, params),
            passthrough_ratio: None,
        }),
        ProfileKind::Sink => Ok(FlowProfile {
            node,
            profile,
            per_hop: walk_temporal(rev, node, credit, params),
            passthrough_ratio: None,
        }),
        ProfileKind::Passthrough => {
            let d = temporal_flow_prereversed(mg, rev, node, ProfileKind::Dispenser, params)?;
            let s = temporal_flow_prereversed(mg, rev, node, ProfileKind::Sink, params)?;
            Ok(compose_passthrough(node, &d, &s, debit, credit))
        }
    }
}

/// Classify an account by its sent/received balance.
pub fn classify_account_type(
    ag: &AggregatedGraph,
    node: u32,
    theta_pass: f64,
    theta_ratio: f64,
) -> AccountType {
    let s = ag.sent[node as usize];
    let r = ag.received[node as usize];
    if s == 0.0 && r == 0.0 {
        return AccountType::Inactive;
    }
    if passthrough_ratio(s, r) >= theta_pass {
        return AccountType::Passthrough;
    }
    if r / (s + r) <= theta_ratio {
        return AccountType::Dispenser;
    }
    if s / (s + r) <= theta_ratio {
        return AccountType::Sink;
    }
    AccountType::Mixed
}

/// Static flow profiles for every node, all three profiles, as a
/// deterministic parallel map over nodes.
pub fn all_static_flows(
    ag: &AggregatedGraph,
    params: &FlowParams,
    workers: usize,
) -> Vec<[FlowProfile; 3]> {
    let rev = ag.reverse();
    let pool = worker_pool(workers);
    pool.install(|| {
        (0..ag.node_count as u32)
            .into_par_iter()
            .map(|node| {
                let d = dispense_flow(ag, node, params).expect("node in range");
                let s = sink_flow_prereversed(&rev, node, params).expect("node in range");
                let p = compose_passthrough(
                    node,
                    &d,
                    &s,
                    ag.sent[node as usize],
                    ag.received[node as usize],
                );
                [d, p, s]
            })
            .collect()
    })
}

/// Temporal flow profiles for every node, all three profiles.
pub fn all_temporal_flows(
    mg: &MultiGraph,
    params: &FlowParams,
    workers: usize,
) -> Vec<[FlowProfile; 3]> {
    let rev = mg.reverse(true);
    let pool = worker_pool(workers);
    pool.install(|| {
        (0..mg.node_count as u32)
            .into_par_iter()
            .map(|node| {
                let d = temporal_flow_prereversed(mg, &rev, node, ProfileKind::Dispenser, params)
                    .expect("node in range");
                let p = temporal_flow_prereversed(mg, &rev, node, ProfileKind::Passthrough, params)
                    .expect("node in range");
                let s = temporal_flow_prereversed(mg, &rev, node, ProfileKind::Sink, params)
                    .expect("node in range");
                [d, p, s]
            })
            .collect()
    })
}

/// Export flow feature rows as CSV: (node, profile, hop, reached, sum, max, mean).
pub fn export_flow_csv(profiles: &[FlowProfile], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "node,profile,hop,reached,sum,max,mean")?;
    for p in profiles {
        for h in &p.per_hop {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                p.node, p.profile, h.hop, h.reached_accounts, h.carried_sum, h.carried_max,
                h.carried_mean
            )?;
        }
    }
    Ok(())
}
