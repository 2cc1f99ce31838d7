//! Overlapping node-centered communities built by bounded random-walk
//! expansion in both edge directions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AggregatedGraph;

use super::WEIGHT_FLOOR;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoParams {
    pub n_hops: usize,
    pub restart: f64,
    pub top_k_per_hop: usize,
    pub max_size: usize,
}

impl Default for EgoParams {
    fn default() -> Self {
        Self { n_hops: 2, restart: 0.15, top_k_per_hop: 50, max_size: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoCommunity {
    pub seed: u32,
    /// includes the seed; sorted ascending
    pub members: Vec<u32>,
    /// node id -> random-walk mass, sorted by (mass desc, id asc)
    pub member_rank: Vec<(u32, f64)>,
}

enum Direction {
    Forward,
    Backward,
}

/// One damped expansion step: frontier mass flows along normalized edge
/// weights; candidates are ranked by accumulated mass and truncated.
fn expand(
    ag: &AggregatedGraph,
    params: &EgoParams,
    direction: Direction,
    rank: &mut HashMap<u32, f64>,
    seed: u32,
) {
    let mut frontier: Vec<(u32, f64)> = vec![(seed, 1.0)];
    for _ in 0..params.n_hops {
        let mut mass: HashMap<u32, f64> = HashMap::new();
        for &(u, m_u) in &frontier {
            let (targets, weights): (Vec<u32>, Vec<f64>) = match direction {
                Direction::Forward => {
                    let r = ag.out_range(u);
                    (ag.dst[r.clone()].to_vec(), ag.weight[r].to_vec())
                }
                Direction::Backward => {
                    let r = ag.in_range(u);
                    let edges = &ag.in_edges[r];
                    (
                        edges.iter().map(|&e| ag.src[e as usize]).collect(),
                        edges.iter().map(|&e| ag.weight[e as usize]).collect(),
                    )
                }
            };
            let norm: f64 = weights.iter().filter(|&&w| w >= WEIGHT_FLOOR).sum();
            if norm < WEIGHT_FLOOR {
                continue;
            }
            for (v, w) in targets.into_iter().zip(weights) {
                if w < WEIGHT_FLOOR {
                    continue;
                }
                *mass.entry(v).or_default() += (1.0 - params.restart) * m_u * (w / norm);
            }
        }
        if mass.is_empty() {
            break;
        }
        let mut candidates: Vec<(u32, f64)> = mass.into_iter().collect();
        candidates.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
        });
        candidates.truncate(params.top_k_per_hop);
        for &(v, m) in &candidates {
            let entry = rank.entry(v).or_insert(0.0);
            if m > *entry {
                *entry = m;
            }
        }
        frontier = candidates;
    }
}

/// Bounded random-walk ego community around `seed`: n_hops outward along
/// out-edges plus n_hops along in-edges, top_k_per_hop candidates retained
/// per hop, total membership capped at max_size by walk mass.
pub fn ego_community(ag: &AggregatedGraph, seed: u32, params: &EgoParams) -> Result<EgoCommunity> {
    if seed as usize >= ag.node_count {
        return Err(Error::UnknownNode(seed));
    }
    if params.n_hops < 1 {
        return Err(Error::config("n_hops must be at least 1"));
    }
    if !(params.restart > 0.0 && params.restart < 1.0) {
        return Err(Error::config("restart must lie in (0, 1)"));
    }

    let mut rank: HashMap<u32, f64> = HashMap::new();
    expand(ag, params, Direction::Forward, &mut rank, seed);
    expand(ag, params, Direction::Backward, &mut rank, seed);
    rank.insert(seed, 1.0);

    let mut member_rank: Vec<(u32, f64)> = rank.into_iter().collect();
    member_rank.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
    member_rank.truncate(params.max_size.max(1));
    if !member_rank.iter().any(|&(v, _)| v == seed) {
        member_rank.pop();
        member_rank.push((seed, 1.0));
    }
    let mut members: Vec<u32> = member_rank.iter().map(|&(v, _)| v).collect();
    members.sort_unstable();
    Ok(EgoCommunity { seed, members, member_rank })
}

#[cfg(test)]
mod tests {
    use super::super::tests::ag_from_edges;
    use super::*;

    #[test]
    fn star_center_keeps_all_spokes() {
        let ag = ag_from_edges(&[(0, 1, 10.0), (0, 2, 20.0), (0, 3, 30.0)]);
        let params = EgoParams { n_hops: 1, top_k_per_hop: 10, ..Default::default() };
        let ego = ego_community(&ag, 0, &params).unwrap();
        assert_eq!(ego.members, vec![0, 1, 2, 3]);
    }

    #[test]
    fn chain_respects_hop_bound() {
        let ag =
            ag_from_edges(&[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0)]);
        let ego = ego_community(&ag, 0, &EgoParams::default()).unwrap();
        assert_eq!(ego.members, vec![0, 1, 2]);
    }

    #[test]
    fn middle_of_path_reaches_both_sides() {
        let ag = ag_from_edges(&[(0, 1, 1.0), (1, 2, 1.0)]);
        let params = EgoParams { n_hops: 1, ..Default::default() };
        let ego = ego_community(&ag, 1, &params).unwrap();
        assert_eq!(ego.members, vec![0, 1, 2]);
    }

    #[test]
    fn disconnected_seed_is_singleton() {
        let ag = ag_from_edges(&[(0, 1, 1.0), (2, 3, 1.0), (4, 0, 0.0)]);
        let ego = ego_community(&ag, 4, &EgoParams::default()).unwrap();
        assert_eq!(ego.members, vec![4]);
    }

    #[test]
    fn unknown_seed_errors() {
        let ag = ag_from_edges(&[(0, 1, 1.0)]);
        assert!(ego_community(&ag, 99, &EgoParams::default()).is_err());
    }

    #[test]
    fn top_k_truncates_by_mass() {
        // seed 0 sends to 1..=4 with increasing amounts; top_k = 2 keeps 4, 3
        let ag = ag_from_edges(&[(0, 1, 1.0), (0, 2, 2.0), (0, 3, 3.0), (0, 4, 4.0)]);
        let params = EgoParams { n_hops: 1, top_k_per_hop: 2, ..Default::default() };
        let ego = ego_community(&ag, 0, &params).unwrap();
        assert_eq!(ego.members, vec![0, 3, 4]);
    }

    #[test]
    fn max_size_keeps_highest_mass_and_seed() {
        let ag = ag_from_edges(&[(0, 1, 1.0), (0, 2, 100.0), (0, 3, 1.0)]);
        let params = EgoParams { n_hops: 1, max_size: 2, ..Default::default() };
        let ego = ego_community(&ag, 0, &params).unwrap();
        assert!(ego.members.contains(&0));
        assert!(ego.members.contains(&2));
        assert_eq!(ego.members.len(), 2);
    }

    #[test]
    fn members_within_unbounded_oracle_expansion() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 25u32;
        let edges: Vec<(u32, u32, f64)> = (0..80)
            .map(|_| {
                let s = rng.gen_range(0..n);
                let mut t = rng.gen_range(0..n);
                if t == s {
                    t = (t + 1) % n;
                }
                (s, t, rng.gen_range(0.5..50.0f64))
            })
            .collect();
        let ag = ag_from_edges(&edges);
        let params = EgoParams { n_hops: 2, top_k_per_hop: 3, max_size: 10, ..Default::default() };
        for seed in 0..n {
            let ego = ego_community(&ag, seed, &params).unwrap();
            // oracle: hop-bounded BFS out-forward and out-backward, unbounded k
            let mut reach = std::collections::HashSet::from([seed]);
            let mut frontier = vec![seed];
            for _ in 0..params.n_hops {
                let mut next = Vec::new();
                for &u in &frontier {
                    for e in ag.out_range(u) {
                        if ag.weight[e] >= WEIGHT_FLOOR {
                            next.push(ag.dst[e]);
                        }
                    }
                }
                reach.extend(next.iter().copied());
                frontier = next;
            }
            let mut frontier = vec![seed];
            for _ in 0..params.n_hops {
                let mut next = Vec::new();
                for &u in &frontier {
                    for pos in ag.in_range(u) {
                        let e = ag.in_edges[pos] as usize;
                        if ag.weight[e] >= WEIGHT_FLOOR {
                            next.push(ag.src[e]);
                        }
                    }
                }
                reach.extend(next.iter().copied());
                frontier = next;
            }
            for m in &ego.members {
                assert!(reach.contains(m), "seed {seed}: member {m} outside oracle reach");
            }
        }
    }
}
