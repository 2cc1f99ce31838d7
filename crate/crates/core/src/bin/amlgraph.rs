//! Command-line entry point for the transaction-graph detection pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use amlgraph::pipeline::{
    emit_plots_data, run_pipeline, timing_report, PipelineConfig, RunMode, RunReport,
};
use amlgraph::Result;

#[derive(Parser)]
#[command(name = "amlgraph", about = "Batch transaction-graph feature engineering and supervised detection", version)]
struct Cli {
    /// TOML configuration file; defaults apply for missing keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// worker threads (0 = all available cores)
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// seed for community detection, anomaly scoring, and training
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// stage cache directory; omit to disable caching entirely
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// recompute every stage even when a cache entry exists
    #[arg(long, global = true)]
    no_cache: bool,

    /// where to write the per-stage timing report CSV
    #[arg(long, global = true)]
    report: Option<PathBuf>,

    /// in-memory byte budget before community slices spill to disk
    #[arg(long, global = true)]
    memory_budget: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate the dataset, printing its summary statistics
    Ingest,
    /// Compute community, flow, and anomaly features; export them as CSV
    Features,
    /// Run the full pipeline through training and write the model file
    Train,
    /// Run the full pipeline and print the evaluation report
    Evaluate,
    /// Cumulative feature-group ablation (one train/eval per prefix)
    Ablation,
    /// Time the pipeline at several worker counts and emit scaling CSVs
    Bench {
        /// comma-separated worker counts
        #[arg(long, default_value = "1,2,3")]
        workers_list: String,
    },
    /// Full pipeline plus predictions, evaluation JSON, and timing report
    RunAll,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_toml_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.run.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(d) = &cli.cache_dir {
        cfg.run.cache_dir = Some(d.clone());
    }
    if cli.no_cache {
        cfg.run.no_cache = true;
    }
    if let Some(b) = cli.memory_budget {
        cfg.run.memory_budget_bytes = b;
    }
    Ok(cfg)
}

fn write_report(cli: &Cli, report: &RunReport) -> Result<()> {
    if let Some(path) = &cli.report {
        std::fs::write(path, timing_report(report))?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Ingest => {
            let report = run_pipeline(&cfg, RunMode::Ingest)?;
            println!("{}", timing_report(&report));
            write_report(cli, &report)?;
        }
        Command::Features => {
            let report = run_pipeline(&cfg, RunMode::Features)?;
            println!("feature CSVs written to {}", cfg.run.out_dir.display());
            write_report(cli, &report)?;
        }
        Command::Train | Command::Evaluate | Command::RunAll => {
            let report = run_pipeline(&cfg, RunMode::Train)?;
            if let Some(eval) = &report.eval {
                println!("{}", serde_json::to_string_pretty(eval)?);
                println!("minority F1 over seeds: {}", eval.f1_mean_std());
            }
            if let Some(p) = &report.predictions_path {
                println!("predictions: {}", p.display());
            }
            write_report(cli, &report)?;
        }
        Command::Ablation => {
            let report = run_pipeline(&cfg, RunMode::Ablation)?;
            if let Some(rows) = &report.ablation {
                println!("groups,f1");
                for (label, f1) in rows {
                    println!("{label},{f1:.4}");
                }
            }
            write_report(cli, &report)?;
        }
        Command::Bench { workers_list } => {
            let counts: Vec<usize> = workers_list
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| {
                    amlgraph::Error::config(format!("invalid worker count '{s}'"))
                }))
                .collect::<Result<_>>()?;
            let mut reports = Vec::new();
            for &w in &counts {
                let mut c = cfg.clone();
                c.run.workers = w;
                c.run.no_cache = true; // measure real stage bodies
                reports.push(run_pipeline(&c, RunMode::Features)?);
            }
            let plots = cfg.run.out_dir.join("scaling.csv");
            emit_plots_data(&reports, &plots)?;
            println!("scaling data: {}", plots.display());
            for (w, r) in counts.iter().zip(&reports) {
                println!("--- workers = {w} ---\n{}", timing_report(r));
            }
            if let Some(path) = &cli.report {
                let mut all = String::new();
                for r in &reports {
                    all.push_str(&timing_report(r));
                }
                std::fs::write(path, all)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
