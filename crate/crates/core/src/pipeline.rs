//! Nine-stage batch pipeline: ingest -> graphs -> communities -> flow ->
//! temporal flow -> subgraph features -> anomaly -> assemble -> train.
//! Every stage output is cached on disk keyed by a hash of the stage name,
//! its configuration inputs, and its parents' keys, so a rerun with an
//! unchanged config is a cache hit per stage.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly::{fit_isolation_forest, AnomalyScore};
use crate::communities::{
    community_membership_table, ego_community, leiden_partition, CommunityTable, CommunityType,
    EgoCommunity, EgoParams, Partition,
};
use crate::error::{Error, Result};
use crate::fixture::synthetic_economy;
use crate::flow::{all_static_flows, all_temporal_flows, FlowParams, FlowProfile, ProfileKind};
use crate::graph::{aggregate, build_multigraph, AggregatedGraph, MultiGraph};
use crate::ingest::{
    account_temporal_split, parse_transactions, temporal_split, Dataset, Schema, SplitMode,
    SplitSpec,
};
use crate::model::{
    assemble_features, evaluate_seeds, leakage_audit, merge_blocks, tune_threshold,
    train_classifier, AblationInputs, EvalReport, FeatureMatrix, GbdtParams, NodeFeatureBlock,
    SplitRows, ABLATION_GROUPS,
};
use crate::subgraph::{
    parallel_feature_map, CommunityFeatures, FeatureMapConfig, COMMUNITY_FEATURE_NAMES,
};
use crate::util::Matrix;

// ---- configuration ---------------------------------------------------------------

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// CSV path; when absent a synthetic fixture is generated instead
    pub path: Option<PathBuf>,
    pub schema: String,
    pub fixture_transactions: usize,
    pub fixture_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { path: None, schema: "generic".into(), fixture_transactions: 50_000, fixture_seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// "transaction_temporal" or "account_temporal"
    pub mode: String,
    pub train_fraction: f64,
    pub valid_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { mode: "transaction_temporal".into(), train_fraction: 0.6, valid_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CommunitiesConfig {
    #[serde(default = "default_one")]
    pub resolution: f64,
    pub n_hops: usize,
    pub restart: f64,
    pub top_k_per_hop: usize,
    pub max_size: usize,
}

impl Default for CommunitiesConfig {
    fn default() -> Self {
        let e = EgoParams::default();
        Self {
            resolution: 1.0,
            n_hops: e.n_hops,
            restart: e.restart,
            top_k_per_hop: e.top_k_per_hop,
            max_size: e.max_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub hops: usize,
    /// 0 means unbounded
    pub top_n: usize,
    pub theta_pass: f64,
    pub theta_ratio: f64,
    pub strict_chronology: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let f = FlowParams::default();
        Self {
            hops: f.hops,
            top_n: f.top_n.unwrap_or(0),
            theta_pass: f.theta_pass,
            theta_ratio: f.theta_ratio,
            strict_chronology: f.strict_chronology,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyConfig {
    pub trees: usize,
    pub sample_size: usize,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self { trees: 100, sample_size: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub rounds: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub early_stopping_rounds: usize,
    pub subsample: f64,
    pub pos_weight: Option<f64>,
    pub seeds: Vec<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GbdtParams::default();
        Self {
            rounds: g.rounds,
            depth: g.depth,
            learning_rate: g.learning_rate,
            early_stopping_rounds: g.early_stopping_rounds,
            subsample: g.subsample,
            pos_weight: g.pos_weight,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// 0 = all available cores
    pub workers: usize,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub no_cache: bool,
    pub out_dir: PathBuf,
    pub diameter_node_cap: usize,
    pub memory_budget_bytes: usize,
    /// feature groups used for the final model and the ablation order
    pub groups: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workers: 0,
            seed: 42,
            cache_dir: None,
            no_cache: false,
            out_dir: PathBuf::from("."),
            diameter_node_cap: 10_000,
            memory_budget_bytes: 512 << 20,
            groups: ABLATION_GROUPS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub communities: CommunitiesConfig,
    pub flow: FlowConfig,
    pub anomaly: AnomalyConfig,
    pub model: ModelConfig,
    pub run: RunConfig,
}

impl PipelineConfig {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::config(msg)) };
        c(
            self.split.train_fraction > 0.0
                && self.split.valid_fraction > 0.0
                && self.split.train_fraction + self.split.valid_fraction < 1.0,
            "split fractions must be positive and sum below 1",
        )?;
        c(
            matches!(self.split.mode.as_str(), "transaction_temporal" | "account_temporal"),
            "split.mode must be transaction_temporal or account_temporal",
        )?;
        c(self.communities.resolution > 0.0, "communities.resolution must be > 0")?;
        c(self.communities.n_hops >= 1, "communities.n_hops must be >= 1")?;
        c(
            (0.0..1.0).contains(&self.communities.restart),
            "communities.restart must be in [0,1)",
        )?;
        c(self.flow.hops >= 1, "flow.hops must be >= 1")?;
        c(
            (0.0..=1.0).contains(&self.flow.theta_pass)
                && (0.0..=1.0).contains(&self.flow.theta_ratio),
            "flow thresholds must be in [0,1]",
        )?;
        c(self.anomaly.trees >= 1, "anomaly.trees must be >= 1")?;
        c(self.anomaly.sample_size >= 2, "anomaly.sample_size must be >= 2")?;
        c(self.model.rounds >= 1, "model.rounds must be >= 1")?;
        c(
            (0.0..=1.0).contains(&self.model.subsample) && self.model.subsample > 0.0,
            "model.subsample must be in (0,1]",
        )?;
        c(!self.model.seeds.is_empty(), "model.seeds must not be empty")?;
        for g in &self.run.groups {
            c(ABLATION_GROUPS.contains(&g.as_str()), "unknown feature group in run.groups")?;
        }
        Ok(())
    }

    fn ego_params(&self) -> EgoParams {
        EgoParams {
            n_hops: self.communities.n_hops,
            restart: self.communities.restart,
            top_k_per_hop: self.communities.top_k_per_hop,
            max_size: self.communities.max_size,
        }
    }

    fn flow_params(&self) -> FlowParams {
        FlowParams {
            hops: self.flow.hops,
            top_n: if self.flow.top_n == 0 { None } else { Some(self.flow.top_n) },
            theta_pass: self.flow.theta_pass,
            theta_ratio: self.flow.theta_ratio,
            strict_chronology: self.flow.strict_chronology,
        }
    }

    fn gbdt_params(&self) -> GbdtParams {
        GbdtParams {
            rounds: self.model.rounds,
            depth: self.model.depth,
            learning_rate: self.model.learning_rate,
            early_stopping_rounds: self.model.early_stopping_rounds,
            subsample: self.model.subsample,
            pos_weight: self.model.pos_weight,
            ..Default::default()
        }
    }

    fn workers(&self) -> usize {
        if self.run.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.run.workers
        }
    }
}

// ---- run report -------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub workers: usize,
    pub seconds: f64,
    pub cardinality_metric: String,
    pub cardinality: u64,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageTiming>,
    pub eval: Option<EvalReport>,
    pub ablation: Option<Vec<(String, f64)>>,
    pub predictions_path: Option<PathBuf>,
}

impl RunReport {
    pub fn executed_stage_count(&self) -> usize {
        self.stages.iter().filter(|s| !s.cache_hit).count()
    }
}

/// Per-stage wall-time table: stage, workers, seconds, cardinality.
pub fn timing_report(run: &RunReport) -> String {
    let mut out = String::from("stage,workers,seconds,cardinality_metric,cardinality\n");
    for s in &run.stages {
        out.push_str(&format!(
            "{},{},{:.6},{},{}\n",
            s.stage, s.workers, s.seconds, s.cardinality_metric, s.cardinality
        ));
    }
    out
}

/// Scaling data behind the timing plots, one row per (report, stage).
pub fn emit_plots_data(reports: &[RunReport], path: impl AsRef<Path>) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::data("no run reports to plot"));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "stage,x_metric,x_value,workers,seconds")?;
    for r in reports {
        for s in &r.stages {
            writeln!(
                f,
                "{},{},{},{},{:.6}",
                s.stage, s.cardinality_metric, s.cardinality, s.workers, s.seconds
            )?;
        }
    }
    Ok(())
}

// ---- stage cache -------------------------------------------------------------------

struct StageRunner {
    cache_dir: Option<PathBuf>,
    no_cache: bool,
    workers: usize,
    timings: Vec<StageTiming>,
}

fn stage_key(stage: &str, config_input: &impl Serialize, parents: &[&str]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(serde_json::to_vec(config_input)?);
    for p in parents {
        h.update(p.as_bytes());
    }
    Ok(format!("{:x}", h.finalize())[..16].to_string())
}

impl StageRunner {
    fn run<T, C, F>(
        &mut self,
        stage: &str,
        config_input: &C,
        parents: &[&str],
        cardinality_metric: &str,
        cardinality: impl Fn(&T) -> u64,
        body: F,
    ) -> Result<(T, String)>
    where
        T: Serialize + DeserializeOwned,
        C: Serialize,
        F: FnOnce() -> Result<T>,
    {
        let key = stage_key(stage, config_input, parents)
            .map_err(|e| Error::Stage { stage: stage.into(), source: Box::new(e) })?;
        let cache_path = self
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{stage}-{key}.bin")));
        let start = Instant::now();
        let (value, hit) = match (&cache_path, self.no_cache) {
            (Some(p), false) if p.exists() => {
                let bytes = std::fs::read(p)
                    .map_err(|e| Error::Stage { stage: stage.into(), source: Box::new(e.into()) })?;
                let v = bincode::deserialize(&bytes).map_err(|e| Error::Stage {
                    stage: stage.into(),
                    source: Box::new(Error::Serde(e.to_string())),
                })?;
                (v, true)
            }
            _ => {
                let v = body()
                    .map_err(|e| Error::Stage { stage: stage.into(), source: Box::new(e) })?;
                if let (Some(p), false) = (&cache_path, self.no_cache) {
                    if let Some(dir) = p.parent() {
                        std::fs::create_dir_all(dir)?;
                    }
                    let bytes = bincode::serialize(&v).map_err(|e| Error::Stage {
                        stage: stage.into(),
                        source: Box::new(Error::Serde(e.to_string())),
                    })?;
                    std::fs::write(p, bytes)?;
                }
                (v, false)
            }
        };
        self.timings.push(StageTiming {
            stage: stage.into(),
            workers: self.workers,
            seconds: start.elapsed().as_secs_f64(),
            cardinality_metric: cardinality_metric.into(),
            cardinality: cardinality(&value),
            cache_hit: hit,
        });
        Ok((value, key))
    }
}

// ---- intermediate artifacts ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CommunityArtifacts {
    partition: Partition,
    egos: Vec<EgoCommunity>,
    table: CommunityTable,
}

#[derive(Serialize, Deserialize)]
struct NodeArtifacts {
    blocks: Vec<(String, NodeFeatureBlock)>,
    scores: Vec<(u32, f64)>,
}

#[derive(Serialize, Deserialize)]
struct AssembleArtifacts {
    splits: SplitRows,
    train: FeatureMatrix,
    valid: FeatureMatrix,
    test: FeatureMatrix,
}

#[derive(Serialize, Deserialize)]
struct TrainArtifacts {
    report: EvalReport,
    test_scores: Vec<f64>,
    threshold: f64,
}

/// How far `run_pipeline` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// ingest only
    Ingest,
    /// through anomaly scoring; exports feature CSVs
    Features,
    /// the full nine stages
    Train,
    /// through anomaly, then the cumulative feature-group ablation
    Ablation,
}

fn split_rows(d: &Dataset, cfg: &PipelineConfig) -> Result<(SplitRows, Option<crate::ingest::AccountSplits>)> {
    match cfg.split.mode.as_str() {
        "transaction_temporal" => {
            let spec = SplitSpec::new(
                SplitMode::TransactionTemporal,
                cfg.split.train_fraction,
                cfg.split.valid_fraction,
            )?;
            Ok((SplitRows::from_temporal(&temporal_split(d, &spec)?), None))
        }
        "account_temporal" => {
            let spec = SplitSpec::new(
                SplitMode::AccountTemporal,
                cfg.split.train_fraction,
                cfg.split.valid_fraction,
            )?;
            let acc = account_temporal_split(d, &spec)?;
            Ok((SplitRows::from_account(&acc, d), Some(acc)))
        }
        other => Err(Error::config(format!("unknown split mode '{other}'"))),
    }
}

/// Transactions visible at feature-build time: everything before the test
/// boundary (train + valid rows).
fn feature_dataset(d: &Dataset, splits: &SplitRows) -> Dataset {
    let mut keep = vec![false; d.transactions.len()];
    for &i in splits.train.iter().chain(&splits.valid) {
        keep[i] = true;
    }
    let transactions: Vec<_> = d
        .transactions
        .iter()
        .enumerate()
        .filter(|(i, _)| keep[*i])
        .map(|(_, t)| *t)
        .collect();
    let extra_cols = d
        .extra_cols
        .iter()
        .map(|(n, col)| {
            (
                n.clone(),
                col.iter().enumerate().filter(|(i, _)| keep[*i]).map(|(_, v)| *v).collect(),
            )
        })
        .collect();
    Dataset { transactions, id_map: d.id_map.clone(), meta: d.meta, extra_cols }
}

fn hop_stat_names(prefix: &str, hops: usize) -> Vec<String> {
    let mut names = Vec::new();
    for h in 1..=hops {
        for stat in ["reached", "sum", "max", "mean"] {
            names.push(format!("{prefix}_h{h}_{stat}"));
        }
    }
    names
}

fn push_hop_stats(row: &mut Vec<f64>, p: &FlowProfile, hops: usize) {
    for h in 0..hops {
        match p.per_hop.get(h) {
            Some(s) => {
                row.push(s.reached_accounts as f64);
                row.push(s.carried_sum);
                row.push(s.carried_max);
                row.push(s.carried_mean);
            }
            None => row.extend_from_slice(&[0.0; 4]),
        }
    }
}

fn flow_block(
    static_flows: &[[FlowProfile; 3]],
    temporal_flows: &[[FlowProfile; 3]],
    ag: &AggregatedGraph,
    hops: usize,
) -> NodeFeatureBlock {
    let mut names = Vec::new();
    for (tag, _) in [("st", &static_flows), ("tm", &temporal_flows)] {
        for kind in ["disp", "pass", "sink"] {
            names.extend(hop_stat_names(&format!("{tag}_{kind}"), hops));
        }
        names.push(format!("{tag}_pass_ratio"));
    }
    names.push("sent_total".into());
    names.push("recv_total".into());
    let rows = (0..ag.node_count as u32)
        .map(|node| {
            let mut row = Vec::with_capacity(names.len());
            for flows in [static_flows, temporal_flows] {
                let profs = &flows[node as usize];
                for p in profs {
                    push_hop_stats(&mut row, p, hops);
                }
                let ratio = profs
                    .iter()
                    .find(|p| p.profile == ProfileKind::Passthrough)
                    .and_then(|p| p.passthrough_ratio)
                    .unwrap_or(0.0);
                row.push(ratio);
            }
            row.push(ag.sent[node as usize]);
            row.push(ag.received[node as usize]);
            (node, row)
        })
        .collect();
    NodeFeatureBlock { names, rows }
}

fn random_walk_block(
    egos: &[EgoCommunity],
    features: &HashMap<(CommunityType, u32), &CommunityFeatures>,
    ag: &AggregatedGraph,
) -> NodeFeatureBlock {
    let mut names: Vec<String> =
        vec!["out_degree".into(), "in_degree".into(), "ego_size".into()];
    names.extend(COMMUNITY_FEATURE_NAMES.iter().map(|n| format!("ego_{n}")));
    let rows = egos
        .iter()
        .map(|e| {
            let node = e.seed;
            let mut row = vec![
                ag.out_range(node).len() as f64,
                ag.in_range(node).len() as f64,
                e.members.len() as f64,
            ];
            match features.get(&(CommunityType::Ego, node)) {
                Some(f) => row.extend(f.to_feature_vec()),
                None => row.extend(std::iter::repeat(f64::NAN).take(COMMUNITY_FEATURE_NAMES.len())),
            }
            (node, row)
        })
        .collect();
    NodeFeatureBlock { names, rows }
}

fn modularity_block(
    partition: &Partition,
    features: &HashMap<(CommunityType, u32), &CommunityFeatures>,
) -> NodeFeatureBlock {
    let mut names: Vec<String> = vec!["community_id".into()];
    names.extend(COMMUNITY_FEATURE_NAMES.iter().map(|n| format!("leiden_{n}")));
    let rows = partition
        .assignment
        .iter()
        .enumerate()
        .map(|(node, &comm)| {
            let mut row = vec![comm as f64];
            match features.get(&(CommunityType::Leiden, comm)) {
                Some(f) => row.extend(f.to_feature_vec()),
                None => row.extend(std::iter::repeat(f64::NAN).take(COMMUNITY_FEATURE_NAMES.len())),
            }
            (node as u32, row)
        })
        .collect();
    NodeFeatureBlock { names, rows }
}

fn node_matrix(block: &NodeFeatureBlock) -> (Vec<u32>, Matrix) {
    let nodes: Vec<u32> = block.rows.iter().map(|(n, _)| *n).collect();
    let rows: Vec<Vec<f64>> = block.rows.iter().map(|(_, v)| v.clone()).collect();
    (nodes, Matrix::from_rows(&rows))
}

/// Execute the pipeline up to `mode`'s last stage and write artifacts into
/// `run.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, mode: RunMode) -> Result<RunReport> {
    cfg.validate()?;
    let workers = cfg.workers();
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    let mut runner = StageRunner {
        cache_dir: cfg.run.cache_dir.clone(),
        no_cache: cfg.run.no_cache,
        workers,
        timings: Vec::new(),
    };
    let mut report = RunReport::default();

    // 1. ingest
    let (dataset, k_ingest) = runner.run(
        "ingest",
        &cfg.dataset,
        &[],
        "edges",
        |d: &Dataset| d.transactions.len() as u64,
        || match &cfg.dataset.path {
            Some(p) => {
                let schema: Schema = cfg.dataset.schema.parse()?;
                parse_transactions(p, schema)
            }
            None => Ok(synthetic_economy(cfg.dataset.fixture_transactions, cfg.dataset.fixture_seed)),
        },
    )?;
    if mode == RunMode::Ingest {
        report.stages = runner.timings;
        return Ok(report);
    }

    let (splits, account_splits) = split_rows(&dataset, cfg)?;
    let visible = feature_dataset(&dataset, &splits);
    if let Some(acc) = &account_splits {
        let rows: Vec<usize> = splits.train.iter().chain(&splits.valid).copied().collect();
        leakage_audit(&dataset, acc, &rows)?;
    }

    // 2. graphs
    let ((mg, ag), k_graph) = runner.run(
        "graph",
        &cfg.split,
        &[&k_ingest],
        "edges",
        |(mg, _): &(MultiGraph, AggregatedGraph)| mg.edge_count() as u64,
        || {
            let mg = build_multigraph(&visible);
            let ag = aggregate(&mg);
            Ok((mg, ag))
        },
    )?;

    // 3. communities (top-down partition + per-node ego communities)
    let (comm, k_comm) = runner.run(
        "communities",
        &(&cfg.communities, cfg.run.seed),
        &[&k_graph],
        "nodes",
        |c: &CommunityArtifacts| c.partition.assignment.len() as u64,
        || {
            let partition = leiden_partition(&ag, cfg.communities.resolution, cfg.run.seed)?;
            let params = cfg.ego_params();
            let egos: Vec<EgoCommunity> = (0..ag.node_count as u32)
                .map(|n| ego_community(&ag, n, &params))
                .collect::<Result<_>>()?;
            let table = community_membership_table(Some(&partition), &egos);
            Ok(CommunityArtifacts { partition, egos, table })
        },
    )?;

    // 4. static flow profiles
    let (static_flows, k_flow) = runner.run(
        "flow",
        &cfg.flow,
        &[&k_graph],
        "aggregated_edges",
        |_: &Vec<[FlowProfile; 3]>| ag.edge_count() as u64,
        || Ok(all_static_flows(&ag, &cfg.flow_params(), workers)),
    )?;

    // 5. temporal flow profiles
    let (temporal_flows, k_tflow) = runner.run(
        "temporal_flow",
        &cfg.flow,
        &[&k_graph],
        "edges",
        |_: &Vec<[FlowProfile; 3]>| mg.edge_count() as u64,
        || Ok(all_temporal_flows(&mg, &cfg.flow_params(), workers)),
    )?;

    // 6. per-community subgraph features
    let (community_features, k_sub) = runner.run(
        "subgraph_features",
        &(cfg.run.diameter_node_cap, cfg.flow.theta_pass, cfg.flow.theta_ratio),
        &[&k_comm, &k_graph],
        "nodes",
        |_: &Vec<CommunityFeatures>| mg.node_count as u64,
        || {
            let fm_cfg = FeatureMapConfig {
                workers,
                diameter_node_cap: cfg.run.diameter_node_cap,
                memory_budget_bytes: cfg.run.memory_budget_bytes,
                spill_dir: cfg.run.cache_dir.as_ref().map(|d| d.join("spill")),
                theta_pass: cfg.flow.theta_pass,
                theta_ratio: cfg.flow.theta_ratio,
            };
            parallel_feature_map(&comm.table, &mg, &ag, dataset.meta.min_timestamp, &fm_cfg)
        },
    )?;

    // 7. anomaly scores over assembled node features
    let (nodes_art, k_anom) = runner.run(
        "anomaly",
        &(&cfg.anomaly, cfg.run.seed),
        &[&k_sub, &k_flow, &k_tflow],
        "nodes",
        |n: &NodeArtifacts| n.scores.len() as u64,
        || {
            let by_key: HashMap<(CommunityType, u32), &CommunityFeatures> = community_features
                .iter()
                .map(|f| ((f.community_type, f.community_id), f))
                .collect();
            let blocks = vec![
                ("random_walk".to_string(), random_walk_block(&comm.egos, &by_key, &ag)),
                ("modularity".to_string(), modularity_block(&comm.partition, &by_key)),
                ("flows".to_string(), flow_block(&static_flows, &temporal_flows, &ag, cfg.flow.hops)),
            ];
            let merged = merge_blocks(&blocks.iter().map(|(_, b)| b).collect::<Vec<_>>())?;
            let (nodes, x) = node_matrix(&merged);
            let forest =
                fit_isolation_forest(&x, cfg.anomaly.trees, cfg.anomaly.sample_size, cfg.run.seed)?;
            let scores = forest.score_matrix(&x)?;
            Ok(NodeArtifacts {
                blocks,
                scores: nodes.into_iter().zip(scores).collect(),
            })
        },
    )?;

    if mode == RunMode::Features {
        let path = cfg.run.out_dir.join("community_features.csv");
        crate::subgraph::export_features_csv(&community_features, path)?;
        let scores: Vec<AnomalyScore> = nodes_art
            .scores
            .iter()
            .map(|&(node, score)| AnomalyScore { node, score })
            .collect();
        crate::anomaly::export_scores_csv(&scores, cfg.run.out_dir.join("anomaly_scores.csv"))?;
        report.stages = runner.timings;
        return Ok(report);
    }

    if mode == RunMode::Ablation {
        let mut inputs = AblationInputs::default();
        for (name, block) in &nodes_art.blocks {
            inputs.blocks.insert(name.clone(), block.clone());
        }
        inputs.scores = nodes_art.scores.iter().copied().collect();
        let rows = crate::model::ablation_run(
            &dataset,
            &splits,
            &cfg.run.groups,
            &inputs,
            &cfg.gbdt_params(),
            cfg.model.seeds[0],
        )?;
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(cfg.run.out_dir.join("ablation.csv"))?);
        writeln!(f, "groups,f1")?;
        for (label, f1) in &rows {
            writeln!(f, "{label},{f1}")?;
        }
        report.ablation = Some(rows);
        report.stages = runner.timings;
        return Ok(report);
    }

    // 8. assemble the transaction feature matrices
    let scores_map: HashMap<u32, f64> = nodes_art.scores.iter().copied().collect();
    let (assembled, k_asm) = runner.run(
        "assemble",
        &(&cfg.split, &cfg.run.groups),
        &[&k_anom],
        "edges",
        |a: &AssembleArtifacts| (a.train.x.rows + a.valid.x.rows + a.test.x.rows) as u64,
        || {
            let active: Vec<&NodeFeatureBlock> = nodes_art
                .blocks
                .iter()
                .filter(|(name, _)| cfg.run.groups.contains(name))
                .map(|(_, b)| b)
                .collect();
            let merged;
            let node_block = if active.is_empty() {
                None
            } else {
                merged = merge_blocks(&active)?;
                Some(&merged)
            };
            let use_scores =
                cfg.run.groups.iter().any(|g| g == "anomaly").then_some(&scores_map);
            Ok(AssembleArtifacts {
                splits: splits.clone(),
                train: assemble_features(&dataset, &splits.train, node_block, use_scores)?,
                valid: assemble_features(&dataset, &splits.valid, node_block, use_scores)?,
                test: assemble_features(&dataset, &splits.test, node_block, use_scores)?,
            })
        },
    )?;

    // 9. train + evaluate
    let (trained, _k_train) = runner.run(
        "train",
        &cfg.model,
        &[&k_asm],
        "edges",
        |_: &TrainArtifacts| assembled.train.x.rows as u64,
        || {
            let params = cfg.gbdt_params();
            let eval = evaluate_seeds(
                &assembled.train,
                &assembled.valid,
                &assembled.test,
                &params,
                &cfg.model.seeds,
            )?;
            // the exported model and predictions come from the first seed
            let model =
                train_classifier(&assembled.train, &assembled.valid, &params, cfg.model.seeds[0])?;
            let valid_scores = model.predict_proba(&assembled.valid.x)?;
            let (threshold, _) = tune_threshold(&valid_scores, &assembled.valid.labels);
            let test_scores = model.predict_proba(&assembled.test.x)?;
            model.save(cfg.run.out_dir.join("model.bin"))?;
            Ok(TrainArtifacts { report: eval, test_scores, threshold })
        },
    )?;

    let pred_path = cfg.run.out_dir.join("predictions.csv");
    crate::model::export_predictions_csv(
        &assembled.test,
        &trained.test_scores,
        trained.threshold,
        &pred_path,
    )?;
    std::fs::write(
        cfg.run.out_dir.join("eval.json"),
        serde_json::to_vec_pretty(&trained.report)?,
    )?;
    report.eval = Some(trained.report);
    report.predictions_path = Some(pred_path);
    report.stages = runner.timings;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.dataset.fixture_transactions = 3_000;
        cfg.model.rounds = 20;
        cfg.model.depth = 4;
        cfg.model.seeds = vec![1];
        cfg.run.workers = 1;
        cfg.run.cache_dir = Some(dir.join("cache"));
        cfg.run.out_dir = dir.join("out");
        cfg
    }

    #[test]
    fn full_run_emits_nine_stage_timings() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_pipeline(&small_cfg(dir.path()), RunMode::Train).unwrap();
        assert_eq!(report.stages.len(), 9);
        assert!(report.eval.is_some());
        assert!(report.predictions_path.as_ref().unwrap().exists());
        let csv = timing_report(&report);
        assert_eq!(csv.lines().count(), 10);
    }

    #[test]
    fn second_run_is_all_cache_hits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let first = run_pipeline(&cfg, RunMode::Train).unwrap();
        assert_eq!(first.executed_stage_count(), 9);
        let second = run_pipeline(&cfg, RunMode::Train).unwrap();
        assert_eq!(second.executed_stage_count(), 0);
        // byte-identical predictions
        let a = std::fs::read(first.predictions_path.as_ref().unwrap()).unwrap();
        let b = std::fs::read(second.predictions_path.as_ref().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flow_config_change_keeps_upstream_hits() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(dir.path());
        run_pipeline(&cfg, RunMode::Train).unwrap();
        cfg.flow.hops = 3;
        let rerun = run_pipeline(&cfg, RunMode::Train).unwrap();
        let hit: HashMap<&str, bool> =
            rerun.stages.iter().map(|s| (s.stage.as_str(), s.cache_hit)).collect();
        assert!(hit["ingest"] && hit["graph"] && hit["communities"]);
        assert!(!hit["flow"] && !hit["temporal_flow"]);
    }

    #[test]
    fn plots_data_requires_reports() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots_data(&[], dir.path().join("x.csv")).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.split.train_fraction = 0.9;
        cfg.split.valid_fraction = 0.2;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.run.groups = vec!["bogus".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let parsed: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.model.seeds, cfg.model.seeds);
    }
}
