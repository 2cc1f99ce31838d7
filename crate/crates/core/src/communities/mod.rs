//! Community scopes over the weighted aggregated graph: disjoint top-down
//! modularity communities and overlapping bottom-up ego communities.

mod ego;
mod leiden;

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub use ego::{ego_community, EgoCommunity, EgoParams};
pub use leiden::{leiden_partition, modularity, Partition};

use crate::error::Result;
use crate::graph::AggregatedGraph;

/// Weights below this floor are treated as zero during normalization.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Undirected weighted projection of the aggregated graph: the weight
/// between u and v is W(u->v) + W(v->u). Neighbor lists are sorted by id.
pub struct Projection {
    pub adj: Vec<Vec<(u32, f64)>>,
    /// total undirected weight, each edge counted once
    pub total_weight: f64,
}

pub fn project_undirected(ag: &AggregatedGraph) -> Projection {
    let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); ag.node_count];
    for i in 0..ag.edge_count() {
        let (s, t, w) = (ag.src[i], ag.dst[i], ag.weight[i]);
        if w < WEIGHT_FLOOR {
            continue;
        }
        adj[s as usize].push((t, w));
        adj[t as usize].push((s, w));
    }
    let mut total = 0.0;
    for list in adj.iter_mut() {
        list.sort_by_key(|&(v, _)| v);
        // merge the two directions of a pair into one undirected entry
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(list.len());
        for &(v, w) in list.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += w,
                _ => merged.push((v, w)),
            }
        }
        total += merged.iter().map(|&(_, w)| w).sum::<f64>();
        *list = merged;
    }
    Projection { adj, total_weight: total / 2.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommunityType {
    Leiden,
    Ego,
}

impl std::fmt::Display for CommunityType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommunityType::Leiden => write!(f, "leiden"),
            CommunityType::Ego => write!(f, "ego"),
        }
    }
}

/// One row per (community, member). Ego communities are keyed by seed id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommunityTable {
    pub entries: Vec<(CommunityType, u32, Vec<u32>)>,
}

impl CommunityTable {
    pub fn row_count(&self) -> usize {
        self.entries.iter().map(|(_, _, m)| m.len()).sum()
    }
}

/// Flatten a partition and a set of ego communities into the membership
/// table consumed by the subgraph feature stage.
pub fn community_membership_table(
    partition: Option<&Partition>,
    egos: &[EgoCommunity],
) -> CommunityTable {
    let mut entries = Vec::new();
    if let Some(p) = partition {
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); p.community_count as usize];
        for (node, &c) in p.assignment.iter().enumerate() {
            members[c as usize].push(node as u32);
        }
        for (c, m) in members.into_iter().enumerate() {
            entries.push((CommunityType::Leiden, c as u32, m));
        }
    }
    for ego in egos {
        let mut members: Vec<u32> = ego.members.clone();
        members.sort_unstable();
        entries.push((CommunityType::Ego, ego.seed, members));
    }
    CommunityTable { entries }
}

pub fn export_membership_csv(table: &CommunityTable, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "community_id,type,node")?;
    for (ty, id, members) in &table.entries {
        for m in members {
            writeln!(f, "{id},{ty},{m}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{aggregate, build_multigraph};
    use crate::ingest::{dataset_stats, Dataset, IdMap, Transaction};

    pub(crate) fn ag_from_edges(edges: &[(u32, u32, f64)]) -> AggregatedGraph {
        let node_count = edges
            .iter()
            .flat_map(|&(s, t, _)| [s, t])
            .max()
            .map(|m| m as usize + 1)
            .unwrap_or(0);
        let mut id_map = IdMap::default();
        for i in 0..node_count {
            id_map.intern(&format!("n{i}"));
        }
        let transactions: Vec<Transaction> = edges
            .iter()
            .enumerate()
            .map(|(i, &(s, t, a))| Transaction {
                tx_id: i as u64,
                timestamp: i as i64,
                source: s,
                target: t,
                amount: a,
                label: 0,
            })
            .collect();
        let mut d = Dataset { transactions, id_map, ..Default::default() };
        d.meta = dataset_stats(&d).unwrap();
        aggregate(&build_multigraph(&d))
    }

    #[test]
    fn membership_table_rows() {
        let p = Partition { assignment: vec![0, 0], community_count: 1, modularity_score: 0.0 };
        let ego = EgoCommunity { seed: 0, members: vec![0], member_rank: vec![(0, 1.0)] };
        let table = community_membership_table(Some(&p), &[ego]);
        assert_eq!(table.row_count(), 3);
    }

    #[test]
    fn overlapping_egos_appear_twice() {
        let egos = vec![
            EgoCommunity { seed: 0, members: vec![0, 1], member_rank: vec![] },
            EgoCommunity { seed: 2, members: vec![1, 2], member_rank: vec![] },
        ];
        let table = community_membership_table(None, &egos);
        let count_b = table
            .entries
            .iter()
            .filter(|(ty, _, m)| *ty == CommunityType::Ego && m.contains(&1))
            .count();
        assert_eq!(count_b, 2);
    }

    #[test]
    fn empty_ego_set_leiden_only() {
        let p = Partition { assignment: vec![0, 1], community_count: 2, modularity_score: 0.0 };
        let table = community_membership_table(Some(&p), &[]);
        assert!(table.entries.iter().all(|(ty, _, _)| *ty == CommunityType::Leiden));
        assert_eq!(table.row_count(), 2);
    }
}
