use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use eraser_core::config::RawConfig;
use eraser_core::experiment::{
    self, compare_theory, run_experiment, summarize, sweep, sweep_csv, theory_csv, verify_cert,
    ReplicationSeeds, TheorySetup,
};
use eraser_core::theory::{
    dimp_upper_bound, expected_wait_dimp_series, expected_wait_sisa, SeriesForm, TheoryParams,
    DEFAULT_INTEGRATION_POINTS,
};
use eraser_core::workload;

/// Simulates inference and unlearning request scheduling on sharded ensembles.
#[derive(Debug, Parser)]
#[command(name = "eraser", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every configured variant and write the result tables.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// concurrent simulation runs
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Re-run an experiment once per value of one config key, e.g. ensemble.shards.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Fuzz the certification rules against exhaustive enumeration.
    VerifyCert {
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        max_shards: usize,
        #[arg(long, default_value_t = 4)]
        max_classes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Closed-form waiting times; with --grid, also simulate and compare.
    Theory {
        #[arg(long)]
        n_u: usize,
        #[arg(long)]
        t: f64,
        /// retraining durations, comma separated
        #[arg(long, value_delimiter = ',', required = true)]
        r: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        p_uc: f64,
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value_t = 100_000)]
        inferences: usize,
        #[arg(long, default_value_t = 20)]
        shards: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0.9)]
        accuracy: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write the workload of the first replication of a config as CSV.
    GenWorkload {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn load_config(path: &Path) -> Result<RawConfig> {
    let mut raw = RawConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(seed) = env::var("ERASER_SEED") {
        let seed = seed.trim();
        if seed.contains(',') {
            raw.remove("experiment.seed");
            raw.remove("experiment.replications");
            raw.set("experiment.seeds", seed)?;
        } else {
            raw.remove("experiment.seeds");
            raw.set("experiment.seed", seed)?;
        }
    }
    Ok(raw)
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { config, out, jobs } => {
            let cfg = load_config(&config)?.resolve()?;
            let results = run_experiment(&cfg, jobs.max(1))?;
            experiment::write_outputs(&results, &out)
                .with_context(|| format!("writing results to {}", out.display()))?;
            println!("variant  reps  mean_awt  mean_nor  mean_p_uc  privacy_violations");
            for s in summarize(&results) {
                println!(
                    "{:<7} {:>5} {:>9.4} {:>9.1} {:>10.4} {:>19}",
                    s.variant.name(),
                    s.replications,
                    s.mean_awt,
                    s.mean_nor,
                    s.mean_p_uc,
                    s.privacy_violations
                );
            }
            let failures: usize = results
                .iter()
                .map(|r| r.privacy_failures(cfg.scheduler.certification))
                .sum();
            if failures > 0 {
                eprintln!("privacy check: {failures} inconsistent responses");
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
            jobs,
        } => {
            let raw = load_config(&config)?;
            let points = sweep(&raw, &param, &values, jobs.max(1))?;
            fs::create_dir_all(&out)?;
            let path = out.join("sweep.csv");
            fs::write(&path, sweep_csv(&param, &points)?)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("{} values of {param} written to {}", points.len(), path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyCert {
            trials,
            max_shards,
            max_classes,
            seed,
        } => {
            let rep = verify_cert(trials, max_shards, max_classes, seed)?;
            println!("trials                 {}", rep.trials);
            println!("fine certified         {}", rep.certified);
            println!("soundness violations   {}", rep.soundness_violations);
            println!("dominance violations   {}", rep.dominance_violations);
            println!("fine-only certified    {}", rep.fine_only);
            println!("max-margin unsound     {}", rep.max_margin_unsound);
            println!("skipped (too large)    {}", rep.skipped);
            if let Some(ce) = &rep.first_max_margin_counterexample {
                println!("max-margin counterexample: {ce}");
            }
            Ok(if rep.violations() > 0 {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Theory {
            n_u,
            t,
            r,
            p_uc,
            grid,
            inferences,
            shards,
            classes,
            accuracy,
            seed,
        } => {
            if grid {
                let mut rows = Vec::new();
                for &retrain in &r {
                    let row = compare_theory(&TheorySetup {
                        n_u,
                        horizon: t,
                        retrain,
                        num_inference: inferences,
                        num_shards: shards,
                        num_classes: classes,
                        accuracy,
                        seed,
                    })?;
                    if let Some(w) = &row.warning {
                        eprintln!("warning: {w}");
                    }
                    rows.push(row);
                }
                print!("{}", theory_csv(&rows)?);
            } else {
                println!("r,sisa,dimp_bound,dimp_series_expanded,dimp_series_collected");
                for &retrain in &r {
                    let p = TheoryParams::new(n_u, t, retrain, p_uc)?;
                    println!(
                        "{retrain},{},{},{},{}",
                        expected_wait_sisa(&p),
                        dimp_upper_bound(&p),
                        expected_wait_dimp_series(&p, SeriesForm::Expanded, DEFAULT_INTEGRATION_POINTS),
                        expected_wait_dimp_series(&p, SeriesForm::Collected, DEFAULT_INTEGRATION_POINTS),
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GenWorkload { spec, out } => {
            let cfg = load_config(&spec)?.resolve()?;
            if cfg.workload_file.is_some() {
                bail!("workload.file is set; nothing to generate");
            }
            let reqs = experiment::replication_workload(&cfg, ReplicationSeeds::derive(cfg.seeds[0]))?;
            workload::save_csv(&reqs, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("{} requests written to {}", reqs.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
