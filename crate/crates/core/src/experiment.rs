//! Replicated experiments over every variant, plus the output tables.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::certification::{
    brute_force_consistent_capped, certify_coarse, certify_fine, certify_fine_max_margin,
    DEFAULT_ENUMERATION_CAP,
};
use crate::config::{ExperimentConfig, RawConfig};
use crate::ensemble::{ImpactedSet, PredictionVector};
use crate::error::{invalid, Error, Result};
use crate::oracle::{hash_words, load_trace, Oracle, OracleConfig};
use crate::scheduler::{CertificationMode, Request, Variant, VariantConfig};
use crate::simulator::{
    replay_privacy_check, run_with, Metrics, PrivacyReport, RunLog, SimParams,
};
use crate::theory::{
    dimp_upper_bound, expected_wait_dimp_series, expected_wait_sisa, grid_mismatch, SeriesForm,
    TheoryParams, DEFAULT_INTEGRATION_POINTS,
};
use crate::workload::{self, ArrivalDistribution, ShardAssignment, WorkloadSpec};

const TAG_WORKLOAD: u64 = 0x776f_726b;
const TAG_ORACLE: u64 = 0x6f72_6163;
const TAG_MITIGATION: u64 = 0x6d69_7467;

pub const METRICS_HEADER: [&str; 9] = [
    "variant",
    "seed",
    "awt",
    "nor",
    "uncertified_responses",
    "p_uc",
    "p50",
    "p95",
    "p99",
];

/// Seeds used by one replication, all derived from its base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicationSeeds {
    pub base: u64,
    pub workload: u64,
    pub oracle: u64,
    pub mitigation: u64,
}

impl ReplicationSeeds {
    pub fn derive(base: u64) -> Self {
        Self {
            base,
            workload: hash_words(&[base, TAG_WORKLOAD]),
            oracle: hash_words(&[base, TAG_ORACLE]),
            mitigation: hash_words(&[base, TAG_MITIGATION]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Metrics,
    pub privacy: Option<PrivacyReport>,
    pub log: RunLog,
}

impl RunResult {
    /// Privacy violations that indicate a bug. Unchecked answers are only
    /// expected to be consistent while certification is enforced.
    pub fn privacy_failures(&self, certification: CertificationMode) -> usize {
        self.privacy.map_or(0, |p| match certification {
            CertificationMode::Enforced => p.violations(),
            CertificationMode::Disabled => p.certified_violations,
        })
    }
}

/// Builds the workload of one replication.
pub fn replication_workload(cfg: &ExperimentConfig, seeds: ReplicationSeeds) -> Result<Vec<Request>> {
    match &cfg.workload_file {
        Some(path) => {
            let reqs = workload::load_csv(path)?;
            workload::validate_stream(&reqs, cfg.sim.horizon)?;
            Ok(reqs)
        }
        None => workload::generate(&WorkloadSpec {
            seed: seeds.workload,
            ..cfg.workload.clone()
        }),
    }
}

/// Runs every variant on every replication. All variants of a replication
/// share one workload and one oracle. Results are ordered by variant, then
/// by position in the seed list.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunResult>> {
    let trace = cfg.trace.as_ref().map(load_trace).transpose()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    pool.install(|| {
        let reps = cfg
            .seeds
            .par_iter()
            .map(|&base| {
                let seeds = ReplicationSeeds::derive(base);
                let oracle = Oracle::from_config(
                    &OracleConfig {
                        seed: seeds.oracle,
                        ..cfg.oracle.clone()
                    },
                    trace.clone(),
                )?;
                Ok((seeds, replication_workload(cfg, seeds)?, oracle))
            })
            .collect::<Result<Vec<_>>>()?;
        let tasks: Vec<(Variant, usize)> = cfg
            .variants
            .iter()
            .flat_map(|&v| (0..reps.len()).map(move |i| (v, i)))
            .collect();
        tasks
            .par_iter()
            .map(|&(variant, i)| {
                let (seeds, reqs, oracle) = &reps[i];
                run_one(cfg, variant, *seeds, reqs, oracle)
            })
            .collect()
    })
}

fn run_one(
    cfg: &ExperimentConfig,
    variant: Variant,
    seeds: ReplicationSeeds,
    reqs: &[Request],
    oracle: &Oracle,
) -> Result<RunResult> {
    let mut vcfg: VariantConfig = cfg.scheduler.variant_config(variant);
    vcfg.mitigation.seed = seeds.mitigation;
    let params = SimParams {
        seed: seeds.base,
        ..cfg.sim
    };
    let out = run_with(reqs, &vcfg, oracle, &params)?;
    let privacy = if cfg.check_privacy {
        Some(replay_privacy_check(&out.log, reqs, oracle)?)
    } else {
        None
    };
    Ok(RunResult {
        variant,
        seed: seeds.base,
        metrics: out.metrics,
        privacy,
        log: out.log,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

fn metrics_fields(r: &RunResult) -> Vec<String> {
    let m = &r.metrics;
    vec![
        r.variant.name().to_string(),
        r.seed.to_string(),
        m.awt.to_string(),
        m.nor.to_string(),
        m.uncertified_responses.to_string(),
        m.p_uc.to_string(),
        m.p50.to_string(),
        m.p95.to_string(),
        m.p99.to_string(),
    ]
}

/// One row per variant and replication.
pub fn metrics_csv(results: &[RunResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in results {
        w.write_record(metrics_fields(r)).map_err(csv_err)?;
    }
    finish(w)
}

/// One row per inference request of every run.
pub fn requests_csv(results: &[RunResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant", "seed", "request_id", "arrival", "response", "wait", "verdict", "label",
        "postponed",
    ])
    .map_err(csv_err)?;
    for r in results {
        for q in &r.log.requests {
            w.write_record([
                r.variant.name().to_string(),
                r.seed.to_string(),
                q.request_id.to_string(),
                q.arrival.to_string(),
                q.response.to_string(),
                q.wait().to_string(),
                q.verdict.as_str().to_string(),
                q.label.map_or(String::new(), |l| l.0.to_string()),
                q.postponed.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(w)
}

/// Per-variant means over replications.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub replications: usize,
    pub mean_awt: f64,
    pub mean_nor: f64,
    pub mean_p_uc: f64,
    pub mean_uncertified: f64,
    pub privacy_violations: usize,
}

pub fn summarize(results: &[RunResult]) -> Vec<VariantSummary> {
    let mut out: Vec<VariantSummary> = Vec::new();
    for r in results {
        let idx = match out.iter().position(|s| s.variant == r.variant) {
            Some(i) => i,
            None => {
                out.push(VariantSummary {
                    variant: r.variant,
                    replications: 0,
                    mean_awt: 0.0,
                    mean_nor: 0.0,
                    mean_p_uc: 0.0,
                    mean_uncertified: 0.0,
                    privacy_violations: 0,
                });
                out.len() - 1
            }
        };
        let s = &mut out[idx];
        s.replications += 1;
        s.mean_awt += r.metrics.awt;
        s.mean_nor += r.metrics.nor as f64;
        s.mean_p_uc += r.metrics.p_uc;
        s.mean_uncertified += r.metrics.uncertified_responses as f64;
        s.privacy_violations += r.privacy.map_or(0, |p| p.violations());
    }
    for s in &mut out {
        let n = s.replications as f64;
        s.mean_awt /= n;
        s.mean_nor /= n;
        s.mean_p_uc /= n;
        s.mean_uncertified /= n;
    }
    out
}

fn ratio(num: f64, den: f64) -> String {
    let q = num / den;
    if q.is_finite() {
        q.to_string()
    } else {
        String::new()
    }
}

/// Means per variant with ratios against SISA. A ratio cell is left empty
/// when it would not be finite or SISA was not run.
pub fn summary_csv(results: &[RunResult]) -> Result<String> {
    let summary = summarize(results);
    let sisa = summary.iter().find(|s| s.variant == Variant::Sisa).cloned();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant",
        "replications",
        "mean_awt",
        "mean_nor",
        "mean_uncertified_responses",
        "mean_p_uc",
        "awt_speedup_vs_sisa",
        "nor_ratio_vs_sisa",
        "privacy_violations",
    ])
    .map_err(csv_err)?;
    for s in &summary {
        let (speedup, nor_ratio) = match &sisa {
            Some(b) => (ratio(b.mean_awt, s.mean_awt), ratio(s.mean_nor, b.mean_nor)),
            None => (String::new(), String::new()),
        };
        w.write_record([
            s.variant.name().to_string(),
            s.replications.to_string(),
            s.mean_awt.to_string(),
            s.mean_nor.to_string(),
            s.mean_uncertified.to_string(),
            s.mean_p_uc.to_string(),
            speedup,
            nor_ratio,
            s.privacy_violations.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// Writes metrics.csv, requests.csv and summary.csv into `dir`.
pub fn write_outputs(results: &[RunResult], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(results)?)?;
    fs::write(dir.join("requests.csv"), requests_csv(results)?)?;
    fs::write(dir.join("summary.csv"), summary_csv(results)?)?;
    Ok(())
}

/// Results of a sweep, one block per value of the swept key.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub results: Vec<RunResult>,
}

/// Re-runs the experiment with `key` set to each of `values`.
pub fn sweep(raw: &RawConfig, key: &str, values: &[String], jobs: usize) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(invalid("sweep needs at least one value"));
    }
    values
        .iter()
        .map(|value| {
            let mut cfg = raw.clone();
            cfg.set(key, value.as_str())?;
            let resolved = cfg.resolve()?;
            Ok(SweepPoint {
                value: value.clone(),
                results: run_experiment(&resolved, jobs)?,
            })
        })
        .collect()
}

/// Metrics rows prefixed by the swept key and value.
pub fn sweep_csv(key: &str, points: &[SweepPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["param", "value"];
    header.extend(METRICS_HEADER);
    w.write_record(&header).map_err(csv_err)?;
    for p in points {
        for r in &p.results {
            let mut row = vec![key.to_string(), p.value.clone()];
            row.extend(metrics_fields(r));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    finish(w)
}

/// Outcome of randomized certification checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CertFuzzReport {
    pub trials: usize,
    /// instances the fine rule certified
    pub certified: usize,
    /// fine certified but some relabelling changes the answer
    pub soundness_violations: usize,
    /// coarse certified where fine did not
    pub dominance_violations: usize,
    /// fine certified where coarse did not
    pub fine_only: usize,
    /// max-margin reading certified an inconsistent instance
    pub max_margin_unsound: usize,
    pub first_max_margin_counterexample: Option<String>,
    /// instances too large for exhaustive checking
    pub skipped: usize,
}

impl CertFuzzReport {
    pub fn violations(&self) -> usize {
        self.soundness_violations + self.dominance_violations
    }
}

/// Draws random prediction vectors and impacted sets and cross-checks the
/// certification rules against exhaustive enumeration.
pub fn verify_cert(
    trials: usize,
    max_shards: usize,
    max_classes: usize,
    seed: u64,
) -> Result<CertFuzzReport> {
    if max_shards == 0 {
        return Err(invalid("max_shards must be at least 1"));
    }
    if max_classes < 2 {
        return Err(invalid("max_classes must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CertFuzzReport {
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let k = rng.random_range(1..=max_shards);
        let c = rng.random_range(2..=max_classes);
        // a favourite label makes certified instances common
        let favourite = rng.random_range(0..c);
        let bias: f64 = rng.random_range(0.2..1.0);
        let labels: Vec<usize> = (0..k)
            .map(|_| {
                if rng.random_bool(bias) {
                    favourite
                } else {
                    rng.random_range(0..c)
                }
            })
            .collect();
        let hit: f64 = rng.random_range(0.0..0.6);
        let impacted: Vec<usize> = (0..k).filter(|_| rng.random_bool(hit)).collect();
        let preds = PredictionVector::from_raw(&labels);
        let set = ImpactedSet::from_indices(&impacted);

        let fine = certify_fine(&preds, &set, c)?.certified;
        let coarse = certify_coarse(&preds, &set, c)?.certified;
        let max_margin = certify_fine_max_margin(&preds, &set, c)?;
        if coarse && !fine {
            report.dominance_violations += 1;
        }
        if fine && !coarse {
            report.fine_only += 1;
        }
        if fine {
            report.certified += 1;
        }
        if !(fine || max_margin) {
            continue;
        }
        let consistent = match brute_force_consistent_capped(&preds, &set, c, DEFAULT_ENUMERATION_CAP) {
            Ok(b) => b,
            Err(Error::Capacity { .. }) => {
                report.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        if fine && !consistent {
            report.soundness_violations += 1;
        }
        if max_margin && !consistent {
            report.max_margin_unsound += 1;
            if report.first_max_margin_counterexample.is_none() {
                report.first_max_margin_counterexample = Some(format!(
                    "predictions {labels:?}, classes {c}, impacted {impacted:?}"
                ));
            }
        }
    }
    Ok(report)
}

/// A grid workload for comparing simulation with the closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct TheorySetup {
    pub n_u: usize,
    pub horizon: f64,
    pub retrain: f64,
    pub num_inference: usize,
    pub num_shards: usize,
    pub num_classes: usize,
    pub accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryRow {
    pub retrain: f64,
    pub sisa_formula: f64,
    pub sisa_simulated: f64,
    pub sisa_rel_err: f64,
    /// measured from the DIMP run
    pub p_uc: f64,
    pub dimp_bound: f64,
    pub dimp_series: f64,
    pub dimp_simulated: f64,
    pub warning: Option<String>,
}

impl TheorySetup {
    pub fn workload_spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            num_unlearning: self.n_u,
            num_inference: self.num_inference,
            horizon: self.horizon,
            num_shards: self.num_shards,
            unlearning_arrivals: ArrivalDistribution::Grid,
            inference_arrivals: ArrivalDistribution::Uniform,
            shard_assignment: ShardAssignment::ScatteredRoundRobin,
            noise_fraction: 0.0,
            seed: hash_words(&[self.seed, TAG_WORKLOAD]),
        }
    }
}

/// Simulates SISA and DIMP on a grid workload and sets the results beside
/// the formulas.
pub fn compare_theory(setup: &TheorySetup) -> Result<TheoryRow> {
    let reqs = workload::generate(&setup.workload_spec())?;
    let warning = grid_mismatch(&reqs, setup.n_u, setup.horizon);
    let oracle = Oracle::synthetic(OracleConfig::synthetic(
        setup.num_classes,
        setup.num_shards,
        setup.accuracy,
        hash_words(&[setup.seed, TAG_ORACLE]),
    ))?;
    let params = SimParams {
        seed: setup.seed,
        ..SimParams::new(setup.retrain, setup.horizon)
    };
    let sisa = run_with(&reqs, &VariantConfig::new(Variant::Sisa), &oracle, &params)?;
    let dimp = run_with(&reqs, &VariantConfig::new(Variant::Dimp), &oracle, &params)?;
    let p_uc = dimp.metrics.p_uc;
    let tp = TheoryParams::new(setup.n_u, setup.horizon, setup.retrain, p_uc)?;
    let sisa_formula = expected_wait_sisa(&tp);
    let sisa_simulated = sisa.metrics.awt;
    let sisa_rel_err = if sisa_formula == 0.0 {
        sisa_simulated.abs()
    } else {
        (sisa_simulated - sisa_formula).abs() / sisa_formula
    };
    Ok(TheoryRow {
        retrain: setup.retrain,
        sisa_formula,
        sisa_simulated,
        sisa_rel_err,
        p_uc,
        dimp_bound: dimp_upper_bound(&tp),
        dimp_series: expected_wait_dimp_series(&tp, SeriesForm::Collected, DEFAULT_INTEGRATION_POINTS),
        dimp_simulated: dimp.metrics.awt,
        warning,
    })
}

pub fn theory_csv(rows: &[TheoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "retrain",
        "sisa_formula",
        "sisa_simulated",
        "sisa_rel_err",
        "p_uc",
        "dimp_bound",
        "dimp_series",
        "dimp_simulated",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.retrain, r.sisa_formula, r.sisa_simulated, r.sisa_rel_err, r.p_uc, r.dimp_bound,
            r.dimp_series, r.dimp_simulated,
        ]
        .map(|x| x.to_string()))
        .map_err(csv_err)?;
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_text(
            "[experiment]\nreplications = 2\n[workload]\nrequests = 300\n[ensemble]\nshards = 5\n",
        )
        .unwrap()
    }

    #[test]
    fn ordered_by_variant_then_seed() {
        let res = run_experiment(&small(), 3).unwrap();
        assert_eq!(res.len(), 16);
        let keys: Vec<(Variant, u64)> = res.iter().map(|r| (r.variant, r.seed)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let cfg = small();
        let a = metrics_csv(&run_experiment(&cfg, 1).unwrap()).unwrap();
        let b = metrics_csv(&run_experiment(&cfg, 4).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("variant,seed,awt,nor,uncertified_responses,p_uc,p50,p95,p99\n"));
    }

    #[test]
    fn variants_share_a_workload() {
        let res = run_experiment(&small(), 2).unwrap();
        let arrivals = |v: Variant| -> Vec<f64> {
            res.iter()
                .find(|r| r.variant == v && r.seed == 1)
                .unwrap()
                .log
                .requests
                .iter()
                .map(|q| q.arrival)
                .collect()
        };
        assert_eq!(arrivals(Variant::Sisa), arrivals(Variant::Dttp));
    }

    #[test]
    fn summary_ratios() {
        let res = run_experiment(&small(), 2).unwrap();
        let text = summary_csv(&res).unwrap();
        let sisa_line = text.lines().nth(1).unwrap();
        assert!(sisa_line.starts_with("SISA,2,"));
        // SISA against itself
        let cells: Vec<&str> = sisa_line.split(',').collect();
        assert_eq!(cells[6], "1");
        assert_eq!(cells[7], "1");
    }

    #[test]
    fn ratio_blank_when_not_finite() {
        assert_eq!(ratio(1.0, 0.0), "");
        assert_eq!(ratio(0.0, 0.0), "");
        assert_eq!(ratio(1.0, 4.0), "0.25");
    }

    #[test]
    fn sweep_blocks() {
        let raw = RawConfig::parse(
            "[experiment]\nvariants = SISA\n[workload]\nrequests = 200\n",
        )
        .unwrap();
        let pts = sweep(&raw, "ensemble.shards", &["4".into(), "8".into()], 2).unwrap();
        assert_eq!(pts.len(), 2);
        let text = sweep_csv("ensemble.shards", &pts).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(sweep(&raw, "ensemble.nope", &["1".into()], 1).is_err());
    }

    #[test]
    fn fuzz_finds_no_violations() {
        let rep = verify_cert(3000, 9, 4, 11).unwrap();
        assert_eq!(rep.violations(), 0);
        assert!(rep.certified > 100);
        assert!(rep.max_margin_unsound > 0);
        assert!(rep.first_max_margin_counterexample.is_some());
    }

    #[test]
    fn theory_comparison_on_grid() {
        let row = compare_theory(&TheorySetup {
            n_u: 10,
            horizon: 100.0,
            retrain: 5.0,
            num_inference: 20_000,
            num_shards: 20,
            num_classes: 10,
            accuracy: 0.9,
            seed: 3,
        })
        .unwrap();
        assert!(row.warning.is_none());
        assert!(row.sisa_rel_err < 0.05, "{row:?}");
        assert!(row.dimp_simulated <= row.sisa_simulated);
    }
}
