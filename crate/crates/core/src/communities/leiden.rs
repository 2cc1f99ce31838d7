//! Seeded, deterministic modularity community detection with a refinement
//! phase that keeps communities internally connected.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::AggregatedGraph;

use super::{project_undirected, Projection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// node id -> community id, dense 0..community_count
    pub assignment: Vec<u32>,
    pub community_count: u32,
    pub modularity_score: f64,
}

const EPS: f64 = 1e-12;

struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loop: Vec<f64>,
    degree: Vec<f64>,
    /// total weight: undirected edges once + self loops
    m: f64,
}

impl LevelGraph {
    fn node_count(&self) -> usize {
        self.adj.len()
    }

    fn from_projection(p: &Projection) -> Self {
        let n = p.adj.len();
        let adj: Vec<Vec<(usize, f64)>> = p
            .adj
            .iter()
            .map(|l| l.iter().map(|&(v, w)| (v as usize, w)).collect())
            .collect();
        let degree: Vec<f64> =
            adj.iter().map(|l| l.iter().map(|&(_, w)| w).sum::<f64>()).collect();
        LevelGraph { adj, self_loop: vec![0.0; n], degree, m: p.total_weight }
    }
}

/// One pass of queue-based local moving. `assignment` holds community ids
/// that are valid indices into `tot` (size = number of communities).
fn local_move(
    g: &LevelGraph,
    assignment: &mut Vec<usize>,
    n_comms: usize,
    resolution: f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    let n = g.node_count();
    let mut tot = vec![0.0f64; n_comms];
    for v in 0..n {
        tot[assignment[v]] += g.degree[v] + 2.0 * g.self_loop[v];
    }
    let two_m = 2.0 * g.m;
    if two_m <= 0.0 {
        return false;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut in_queue = vec![true; n];
    let mut queue: std::collections::VecDeque<usize> = order.into();

    // scratch: community -> incident weight from the current node
    let mut k_vc = vec![0.0f64; n_comms];
    let mut touched: Vec<usize> = Vec::new();

    let mut changed = false;
    while let Some(v) = queue.pop_front() {
        in_queue[v] = false;
        let a = assignment[v];
        let k_v = g.degree[v] + 2.0 * g.self_loop[v];
        tot[a] -= k_v;

        touched.clear();
        for &(u, w) in &g.adj[v] {
            let c = assignment[u];
            if k_vc[c] == 0.0 {
                touched.push(c);
            }
            k_vc[c] += w;
        }
        if k_vc[a] == 0.0 {
            touched.push(a);
        }

        let gain = |c: usize, kv_c: f64| kv_c - resolution * k_v * tot[c] / two_m;
        let mut best = a;
        let mut best_gain = gain(a, k_vc[a]);
        touched.sort_unstable();
        for &c in &touched {
            let gn = gain(c, k_vc[c]);
            if gn > best_gain + EPS || (gn > best_gain - EPS && c < best) {
                best = c;
                best_gain = gn;
            }
        }
        for &c in &touched {
            k_vc[c] = 0.0;
        }

        tot[best] += k_v;
        if best != a {
            assignment[v] = best;
            changed = true;
            for &(u, _) in &g.adj[v] {
                if assignment[u] != best && !in_queue[u] {
                    in_queue[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    changed
}

/// Split each community into connected, greedily merged sub-communities.
/// Nodes only merge with adjacent nodes of the same parent community, so
/// every refined community is internally connected.
fn refine(
    g: &LevelGraph,
    parent: &[usize],
    resolution: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, usize) {
    let n = g.node_count();
    let mut refined: Vec<usize> = (0..n).collect();
    let mut tot: Vec<f64> = (0..n).map(|v| g.degree[v] + 2.0 * g.self_loop[v]).collect();
    let mut size = vec![1usize; n];
    let two_m = 2.0 * g.m;
    if two_m <= 0.0 {
        return (refined, n);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let mut k_vc = vec![0.0f64; n];
    let mut touched: Vec<usize> = Vec::new();
    for &v in &order {
        if size[refined[v]] != 1 {
            continue; // only singletons may merge
        }
        let k_v = g.degree[v] + 2.0 * g.self_loop[v];
        touched.clear();
        for &(u, w) in &g.adj[v] {
            if parent[u] != parent[v] {
                continue;
            }
            let c = refined[u];
            if c == refined[v] {
                continue;
            }
            if k_vc[c] == 0.0 {
                touched.push(c);
            }
            k_vc[c] += w;
        }
        let mut best: Option<usize> = None;
        let mut best_gain = 0.0;
        touched.sort_unstable();
        for &c in &touched {
            let gn = k_vc[c] - resolution * k_v * tot[c] / two_m;
            if gn > best_gain + EPS {
                best = Some(c);
                best_gain = gn;
            }
        }
        for &c in &touched {
            k_vc[c] = 0.0;
        }
        if let Some(c) = best {
            let old = refined[v];
            tot[c] += k_v;
            tot[old] -= k_v;
            size[c] += size[old];
            size[old] = 0;
            refined[v] = c;
        }
    }

    // densify refined ids
    let mut remap = vec![usize::MAX; n];
    let mut next = 0usize;
    for v in 0..n {
        let c = refined[v];
        if remap[c] == usize::MAX {
            remap[c] = next;
            next += 1;
        }
        refined[v] = remap[c];
    }
    (refined, next)
}

fn aggregate_level(g: &LevelGraph, refined: &[usize], n_refined: usize) -> LevelGraph {
    let mut self_loop = vec![0.0f64; n_refined];
    let mut edge_maps: Vec<std::collections::BTreeMap<usize, f64>> =
        vec![std::collections::BTreeMap::new(); n_refined];
    for v in 0..g.node_count() {
        let cv = refined[v];
        self_loop[cv] += g.self_loop[v];
        for &(u, w) in &g.adj[v] {
            let cu = refined[u];
            if cu == cv {
                if u > v {
                    self_loop[cv] += w;
                }
            } else {
                *edge_maps[cv].entry(cu).or_default() += w;
            }
        }
    }
    let adj: Vec<Vec<(usize, f64)>> =
        edge_maps.into_iter().map(|m| m.into_iter().collect()).collect();
    let degree: Vec<f64> = adj.iter().map(|l| l.iter().map(|&(_, w)| w).sum::<f64>()).collect();
    LevelGraph { adj, self_loop, degree, m: g.m }
}

/// Modularity Q of a partition on the undirected weighted projection,
/// resolution 1.
pub fn modularity(ag: &AggregatedGraph, p: &Partition) -> Result<f64> {
    if ag.node_count == 0 {
        return Err(Error::data("modularity of an empty graph"));
    }
    if p.assignment.len() != ag.node_count {
        return Err(Error::data("partition does not cover the graph"));
    }
    let proj = project_undirected(ag);
    modularity_on_projection(&proj, &p.assignment, 1.0)
}

fn modularity_on_projection(proj: &Projection, assignment: &[u32], resolution: f64) -> Result<f64> {
    let m = proj.total_weight;
    if m <= 0.0 {
        return Ok(0.0); // edgeless graph: Q = 0 by convention
    }
    let n_comms = assignment.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut w_in = vec![0.0f64; n_comms];
    let mut tot = vec![0.0f64; n_comms];
    for v in 0..proj.adj.len() {
        let cv = assignment[v] as usize;
        for &(u, w) in &proj.adj[v] {
            tot[cv] += w;
            if assignment[u as usize] as usize == cv && u as usize > v {
                w_in[cv] += w;
            }
        }
    }
    let mut q = 0.0;
    for c in 0..n_comms {
        q += w_in[c] / m - resolution * (tot[c] / (2.0 * m)).powi(2);
    }
    Ok(q)
}

/// Seeded community detection: iterated local moving + connectivity-safe
/// refinement + graph aggregation, until the partition stabilizes.
pub fn leiden_partition(ag: &AggregatedGraph, resolution: f64, seed: u64) -> Result<Partition> {
    if ag.node_count == 0 {
        return Err(Error::data("cannot partition an empty graph"));
    }
    if resolution <= 0.0 {
        return Err(Error::config("resolution must be positive"));
    }
    let proj = project_undirected(ag);
    let n = ag.node_count;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut level = LevelGraph::from_projection(&proj);
    // node -> current supernode
    let mut node_to_super: Vec<usize> = (0..n).collect();
    // supernode -> community at the current level
    let mut assignment: Vec<usize> = (0..level.node_count()).collect();
    let mut n_comms = level.node_count();

    for _ in 0..32 {
        let changed = local_move(&level, &mut assignment, n_comms, resolution, &mut rng);
        if !changed && level.node_count() < n {
            break;
        }
        let (refined, n_refined) = refine(&level, &assignment, resolution, &mut rng);
        if n_refined == level.node_count() {
            if !changed {
                break;
            }
            // nothing merged during refinement: aggregation would not shrink
            if !assignment.iter().enumerate().any(|(v, &c)| c != refined[v]) {
                break;
            }
        }
        // carry the local-move community of each refined supernode forward
        let mut super_comm = vec![0usize; n_refined];
        for v in 0..level.node_count() {
            super_comm[refined[v]] = assignment[v];
        }
        // densify the carried community ids for the next level
        let mut remap: HashMap<usize, usize> = HashMap::new();
        for c in super_comm.iter_mut() {
            let next = remap.len();
            *c = *remap.entry(*c).or_insert(next);
        }
        n_comms = remap.len();
        for nv in node_to_super.iter_mut() {
            *nv = refined[*nv];
        }
        level = aggregate_level(&level, &refined, n_refined);
        assignment = super_comm;
        if level.node_count() <= 1 {
            break;
        }
    }

    // flatten to per-node communities
    let flat: Vec<usize> = node_to_super.iter().map(|&s| assignment[s]).collect();

    // split any disconnected community into its connected components
    let mut final_assignment = vec![u32::MAX; n];
    let mut next_comm = 0u32;
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..n {
        if final_assignment[start] != u32::MAX {
            continue;
        }
        let comm = flat[start];
        final_assignment[start] = next_comm;
        stack.push(start);
        while let Some(v) = stack.pop() {
            for &(u, _) in &proj.adj[v] {
                let u = u as usize;
                if flat[u] == comm && final_assignment[u] == u32::MAX {
                    final_assignment[u] = next_comm;
                    stack.push(u);
                }
            }
        }
        next_comm += 1;
    }

    let mut partition =
        Partition { assignment: final_assignment, community_count: next_comm, modularity_score: 0.0 };
    partition.modularity_score =
        modularity_on_projection(&proj, &partition.assignment, resolution)?;
    Ok(partition)
}

#[cfg(test)]
mod tests {
    use super::super::tests::ag_from_edges;
    use super::*;

    fn singleton_partition(n: usize) -> Partition {
        Partition {
            assignment: (0..n as u32).collect(),
            community_count: n as u32,
            modularity_score: 0.0,
        }
    }

    #[test]
    fn two_cliques_split_in_two() {
        // two directed 4-cliques with equal amounts, one weak bridge
        let mut edges: Vec<(u32, u32, f64)> = Vec::new();
        for base in [0u32, 4u32] {
            for i in 0..4u32 {
                for j in 0..4u32 {
                    if i != j {
                        edges.push((base + i, base + j, 100.0));
                    }
                }
            }
        }
        edges.push((0, 4, 0.5));
        let ag = ag_from_edges(&edges);
        let p = leiden_partition(&ag, 1.0, 42).unwrap();
        assert_eq!(p.community_count, 2);
        for i in 0..4 {
            assert_eq!(p.assignment[i], p.assignment[0]);
            assert_eq!(p.assignment[4 + i], p.assignment[4]);
        }
        assert_ne!(p.assignment[0], p.assignment[4]);

        // exhaustive check: no 2-partition of the 8 nodes beats it
        let q = p.modularity_score;
        for mask in 0u32..256 {
            let assignment: Vec<u32> = (0..8).map(|i| (mask >> i) & 1).collect();
            let cand =
                Partition { assignment, community_count: 2, modularity_score: 0.0 };
            let qc = modularity(&ag, &cand).unwrap();
            assert!(qc <= q + 1e-9, "mask {mask} beats leiden: {qc} > {q}");
        }
    }

    #[test]
    fn single_edge_joins_both_nodes() {
        let ag = ag_from_edges(&[(0, 1, 10.0)]);
        let p = leiden_partition(&ag, 1.0, 1).unwrap();
        assert_eq!(p.community_count, 1);
        // 2-node enumeration: merged Q=0 beats singleton Q=-0.5
        let q_single = modularity(&ag, &singleton_partition(2)).unwrap();
        assert!(p.modularity_score > q_single);
    }

    #[test]
    fn edgeless_graph_is_all_singletons() {
        let ag = ag_from_edges(&[(0, 1, 0.0), (2, 3, 0.0)]);
        let p = leiden_partition(&ag, 1.0, 3).unwrap();
        assert_eq!(p.community_count, 4);
        assert_eq!(p.modularity_score, 0.0);
    }

    #[test]
    fn two_triangles_q_half() {
        let ag = ag_from_edges(&[
            (0, 1, 5.0),
            (1, 2, 5.0),
            (2, 0, 5.0),
            (3, 4, 5.0),
            (4, 5, 5.0),
            (5, 3, 5.0),
        ]);
        let p = Partition {
            assignment: vec![0, 0, 0, 1, 1, 1],
            community_count: 2,
            modularity_score: 0.0,
        };
        assert!((modularity(&ag, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_community_q_zero() {
        let ag = ag_from_edges(&[(0, 1, 3.0), (1, 2, 4.0)]);
        let p =
            Partition { assignment: vec![0, 0, 0], community_count: 1, modularity_score: 0.0 };
        assert!(modularity(&ag, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn modularity_matches_dense_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 10usize;
        let edges: Vec<(u32, u32, f64)> = (0..25)
            .map(|_| {
                let s = rng.gen_range(0..n as u32);
                let mut t = rng.gen_range(0..n as u32);
                if t == s {
                    t = (t + 1) % n as u32;
                }
                (s, t, rng.gen_range(0.1..10.0f64))
            })
            .collect();
        let ag = ag_from_edges(&edges);
        let assignment: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3u32)).collect();
        let p = Partition { assignment: assignment.clone(), community_count: 3, modularity_score: 0.0 };
        let q = modularity(&ag, &p).unwrap();

        // O(n^2) dense-matrix oracle
        let mut a = vec![vec![0.0f64; n]; n];
        for i in 0..ag.edge_count() {
            let (s, t, w) = (ag.src[i] as usize, ag.dst[i] as usize, ag.weight[i]);
            a[s][t] += w;
            a[t][s] += w;
        }
        let two_m: f64 = a.iter().flatten().sum();
        let k: Vec<f64> = a.iter().map(|row| row.iter().sum::<f64>()).collect();
        let mut q_oracle = 0.0;
        for i in 0..n {
            for j in 0..n {
                if assignment[i] == assignment[j] {
                    q_oracle += a[i][j] - k[i] * k[j] / two_m;
                }
            }
        }
        q_oracle /= two_m;
        assert!((q - q_oracle).abs() < 1e-9, "{q} vs {q_oracle}");
    }

    #[test]
    fn deterministic_under_fixed_seed_and_beats_singletons() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let edges: Vec<(u32, u32, f64)> = (0..120)
            .map(|_| {
                let s = rng.gen_range(0..30u32);
                let mut t = rng.gen_range(0..30u32);
                if t == s {
                    t = (t + 1) % 30;
                }
                (s, t, rng.gen_range(0.5..50.0f64))
            })
            .collect();
        let ag = ag_from_edges(&edges);
        let p1 = leiden_partition(&ag, 1.0, 77).unwrap();
        let p2 = leiden_partition(&ag, 1.0, 77).unwrap();
        assert_eq!(p1, p2);
        let q_single = modularity(&ag, &singleton_partition(30)).unwrap();
        assert!(p1.modularity_score >= q_single);
    }

    #[test]
    fn communities_are_connected() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let edges: Vec<(u32, u32, f64)> = (0..80)
            .map(|_| {
                let s = rng.gen_range(0..40u32);
                let mut t = rng.gen_range(0..40u32);
                if t == s {
                    t = (t + 1) % 40;
                }
                (s, t, rng.gen_range(0.5..20.0f64))
            })
            .collect();
        let ag = ag_from_edges(&edges);
        let p = leiden_partition(&ag, 1.0, 21).unwrap();
        let proj = project_undirected(&ag);
        // BFS inside each community must reach all its members
        for c in 0..p.community_count {
            let members: Vec<usize> =
                (0..ag.node_count).filter(|&v| p.assignment[v] == c).collect();
            let mut seen = std::collections::HashSet::new();
            let mut stack = vec![members[0]];
            seen.insert(members[0]);
            while let Some(v) = stack.pop() {
                for &(u, _) in &proj.adj[v] {
                    let u = u as usize;
                    if p.assignment[u] == c && seen.insert(u) {
                        stack.push(u);
                    }
                }
            }
            assert_eq!(seen.len(), members.len(), "community {c} disconnected");
        }
    }
}
