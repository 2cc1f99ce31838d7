//! Deterministic synthetic data generators used by the benchmark suite and
//! the end-to-end tests: a transaction economy with injected laundering
//! chains, and bulk community fixtures for scaling runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::communities::{CommunityTable, CommunityType};
use crate::graph::{aggregate, build_multigraph, AggregatedGraph, MultiGraph};
use crate::ingest::{dataset_stats, Dataset, IdMap, Transaction};

const DAY: i64 = 86_400;
const START_TS: i64 = 1_600_000_000;
const SPAN_DAYS: i64 = 90;

fn lognormal(rng: &mut ChaCha8Rng, mu: f64, sigma: f64) -> f64 {
    // Box-Muller from two uniforms
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen::<f64>();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    (mu + sigma * z).exp()
}

/// Synthetic economy of roughly `n_transactions` rows. Background activity
/// is random transfers between skew-sampled accounts; about 0.5% of rows
/// are laundering chains (one dispenser fanning out to four mules that each
/// forward ~95% to a sink within a day). Illicit amounts are drawn from the
/// same marginal distribution as the background so amount-only models stay
/// weak, while the graph structure remains detectable.
pub fn synthetic_economy(n_transactions: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_chains = ((n_transactions as f64 * 0.005) / 8.0).round().max(1.0) as usize;
    let n_background = n_transactions.saturating_sub(n_chains * 8);
    let n_accounts = (n_background / 12).max(8) as u32;
    let span = SPAN_DAYS * DAY;

    let mut txs: Vec<Transaction> = Vec::with_capacity(n_transactions);
    let mut next_id = 0u64;
    let skewed = |rng: &mut ChaCha8Rng| -> u32 {
        // square a uniform to concentrate traffic on low account ids
        let u: f64 = rng.gen();
        ((u * u) * n_accounts as f64) as u32 % n_accounts
    };
    for _ in 0..n_background {
        let source = skewed(&mut rng);
        let mut target = skewed(&mut rng);
        if target == source {
            target = (target + 1) % n_accounts;
        }
        txs.push(Transaction {
            tx_id: next_id,
            timestamp: START_TS + rng.gen_range(0..span),
            source,
            target,
            amount: (lognormal(&mut rng, 3.5, 1.2) * 100.0).round() / 100.0,
            label: 0,
        });
        next_id += 1;
    }

    // laundering chains on fresh accounts: dispenser -> 4 mules -> sink
    let mut next_account = n_accounts;
    for _ in 0..n_chains {
        let dispenser = next_account;
        let mules = [next_account + 1, next_account + 2, next_account + 3, next_account + 4];
        let sink = next_account + 5;
        next_account += 6;
        let t0 = START_TS + rng.gen_range(0..span - 2 * DAY);
        for &mule in &mules {
            let amount = (lognormal(&mut rng, 3.5, 1.2) * 100.0).round() / 100.0;
            let leg1 = t0 + rng.gen_range(0..6 * 3600);
            txs.push(Transaction {
                tx_id: next_id,
                timestamp: leg1,
                source: dispenser,
                target: mule,
                amount,
                label: 1,
            });
            next_id += 1;
            txs.push(Transaction {
                tx_id: next_id,
                timestamp: leg1 + rng.gen_range(3600..DAY),
                source: mule,
                target: sink,
                amount: (amount * rng.gen_range(0.92..0.98) * 100.0).round() / 100.0,
                label: 1,
            });
            next_id += 1;
        }
    }

    txs.sort_by_key(|t| (t.timestamp, t.tx_id));
    let mut id_map = IdMap::default();
    for i in 0..next_account {
        id_map.intern(&format!("acct{i:07}"));
    }
    let mut d = Dataset { transactions: txs, id_map, meta: Default::default(), extra_cols: vec![] };
    d.meta = dataset_stats(&d).expect("non-empty fixture");
    d
}

/// `n_communities` disjoint ring communities of `members_per` nodes each
/// (with one chord), plus sparse inter-community edges. Used for the
/// worker-invariance and scaling benchmarks.
pub fn community_fixture(
    n_communities: usize,
    members_per: usize,
    seed: u64,
) -> (MultiGraph, AggregatedGraph, CommunityTable) {
    assert!(members_per >= 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut txs = Vec::new();
    let mut entries = Vec::with_capacity(n_communities);
    let mut next_id = 0u64;
    for c in 0..n_communities {
        let base = (c * members_per) as u32;
        let members: Vec<u32> = (0..members_per as u32).map(|i| base + i).collect();
        for i in 0..members_per as u32 {
            txs.push(Transaction {
                tx_id: next_id,
                timestamp: START_TS + next_id as i64,
                source: base + i,
                target: base + (i + 1) % members_per as u32,
                amount: (lognormal(&mut rng, 3.0, 1.0) * 100.0).round() / 100.0,
                label: 0,
            });
            next_id += 1;
        }
        // one chord for a non-trivial diameter/biconnectivity profile
        txs.push(Transaction {
            tx_id: next_id,
            timestamp: START_TS + next_id as i64,
            source: base,
            target: base + (members_per as u32) / 2,
            amount: (lognormal(&mut rng, 3.0, 1.0) * 100.0).round() / 100.0,
            label: 0,
        });
        next_id += 1;
        // sparse bridge to the previous community
        if c > 0 && rng.gen_bool(0.3) {
            txs.push(Transaction {
                tx_id: next_id,
                timestamp: START_TS + next_id as i64,
                source: base - 1,
                target: base,
                amount: 1.0,
                label: 0,
            });
            next_id += 1;
        }
        entries.push((CommunityType::Leiden, c as u32, members));
    }
    txs.sort_by_key(|t| (t.timestamp, t.tx_id));
    let n_nodes = (n_communities * members_per) as u32;
    let mut id_map = IdMap::default();
    for i in 0..n_nodes {
        id_map.intern(&format!("acct{i:07}"));
    }
    let mut d = Dataset { transactions: txs, id_map, meta: Default::default(), extra_cols: vec![] };
    d.meta = dataset_stats(&d).expect("non-empty fixture");
    let mg = build_multigraph(&d);
    let ag = aggregate(&mg);
    (mg, ag, CommunityTable { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn economy_has_expected_shape() {
        let d = synthetic_economy(10_000, 1);
        assert!((d.transactions.len() as i64 - 10_000).abs() < 16);
        let illicit = d.transactions.iter().filter(|t| t.label == 1).count();
        let rate = illicit as f64 / d.transactions.len() as f64;
        assert!((0.002..0.01).contains(&rate), "illicit rate {rate}");
        assert!(d.transactions.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert_eq!(d.meta.nodes as usize, d.id_map.len());
    }

    #[test]
    fn economy_is_deterministic() {
        let a = synthetic_economy(2_000, 7);
        let b = synthetic_economy(2_000, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn community_fixture_counts() {
        let (mg, ag, table) = community_fixture(50, 6, 3);
        assert_eq!(table.entries.len(), 50);
        assert_eq!(mg.node_count, 300);
        assert_eq!(ag.node_count, 300);
        assert!(table.entries.iter().all(|(_, _, m)| m.len() == 6));
    }
}
