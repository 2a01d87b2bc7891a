//! Experiment configuration files.
//!
//! The format is UTF-8 text of `key = value` lines grouped under `[section]`
//! headers. `#` starts a comment. Unknown sections and keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::oracle::{Backend, OracleConfig};
use crate::scheduler::{
    CertificationMode, Detector, MitigationConfig, RetrainPolicy, Variant, VariantConfig,
};
use crate::simulator::SimParams;
use crate::workload::{ArrivalDistribution, ShardAssignment, WorkloadSpec};

/// Every accepted `section.key`, in documentation order.
pub const KNOWN_KEYS: &[&str] = &[
    "experiment.variants",
    "experiment.replications",
    "experiment.seed",
    "experiment.seeds",
    "experiment.check_privacy",
    "ensemble.shards",
    "ensemble.classes",
    "ensemble.accuracy",
    "ensemble.resample_prob",
    "ensemble.trace",
    "workload.requests",
    "workload.unlearning_fraction",
    "workload.horizon",
    "workload.unlearning_distribution",
    "workload.inference_distribution",
    "workload.gaussian_mean",
    "workload.gaussian_std",
    "workload.modes",
    "workload.mode_means",
    "workload.mode_stds",
    "workload.mode_weights",
    "workload.shard_assignment",
    "workload.noise_fraction",
    "workload.file",
    "simulation.retrain_duration",
    "simulation.inference_service_time",
    "simulation.switch_latency",
    "scheduler.threshold",
    "scheduler.parallel_capacity",
    "scheduler.retrain_policy",
    "scheduler.certification",
    "mitigation.detector_tpr",
    "mitigation.detector_fpr",
    "mitigation.discard_below",
    "mitigation.shard_shuffle",
];

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    /// 0 for values set programmatically
    line: usize,
}

/// A parsed but not yet interpreted configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
    /// directory that relative paths are resolved against
    base_dir: Option<PathBuf>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| parse_err(line, "unterminated section header"))?
                    .trim();
                if !KNOWN_KEYS.iter().any(|k| k.split('.').next() == Some(name)) {
                    return Err(parse_err(line, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| parse_err(line, format!("expected `key = value`, got {content:?}")))?;
            let Some(sec) = &section else {
                return Err(parse_err(line, "key outside of any [section]"));
            };
            let full = format!("{sec}.{}", key.trim());
            if !KNOWN_KEYS.contains(&full.as_str()) {
                return Err(parse_err(line, format!("unknown key {full}")));
            }
            let entry = Entry {
                value: value.trim().to_string(),
                line,
            };
            if let Some(prev) = entries.insert(full.clone(), entry) {
                return Err(parse_err(
                    line,
                    format!("{full} already set on line {}", prev.line),
                ));
            }
        }
        Ok(Self {
            entries,
            base_dir: None,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut raw = Self::parse(&text)?;
        raw.base_dir = path.parent().map(Path::to_path_buf);
        Ok(raw)
    }

    /// Overrides `section.key`, as done by sweeps and seed overrides.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(invalid(format!("unknown key {key}")));
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.into(),
                line: 0,
            },
        );
        Ok(())
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|err| value_err(e, key, err)),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.value(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|s| s.trim().parse().map_err(|err| value_err(e, key, err)))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn choice<T>(&self, key: &str, default: T, options: &[(&str, T)]) -> Result<T>
    where
        T: Copy,
    {
        let Some(e) = self.entries.get(key) else {
            return Ok(default);
        };
        options
            .iter()
            .find(|(name, _)| name.eq_ignore_ascii_case(&e.value))
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|o| o.0).collect();
                value_err(e, key, format!("expected one of {}", names.join(", ")))
            })
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|p| match &self.base_dir {
            Some(dir) if Path::new(p).is_relative() => dir.join(p),
            _ => PathBuf::from(p),
        })
    }

    /// Interprets the file, filling defaults and validating everything.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let variants = match self.entries.get("experiment.variants") {
            None => Variant::ALL.to_vec(),
            Some(e) if e.value.eq_ignore_ascii_case("all") => Variant::ALL.to_vec(),
            Some(e) => {
                let mut vs = e
                    .value
                    .split(',')
                    .map(|s| s.parse::<Variant>().map_err(|err| value_err(e, "experiment.variants", err)))
                    .collect::<Result<Vec<_>>>()?;
                vs.sort();
                vs.dedup();
                vs
            }
        };
        let replications: Option<usize> = self.value("experiment.replications")?;
        let seeds = match self.list::<u64>("experiment.seeds")? {
            Some(seeds) => {
                if let Some(n) = replications {
                    if n != seeds.len() {
                        return Err(invalid(format!(
                            "experiment.replications = {n} but {} seeds listed",
                            seeds.len()
                        )));
                    }
                }
                seeds
            }
            None => {
                let base = self.or("experiment.seed", 1u64)?;
                let n = replications.unwrap_or(1);
                (0..n as u64).map(|i| base.wrapping_add(i)).collect()
            }
        };
        if seeds.is_empty() {
            return Err(invalid("replication count must be at least 1"));
        }

        let shards = self.or("ensemble.shards", 20usize)?;
        let classes = self.or("ensemble.classes", 10usize)?;
        let oracle = OracleConfig {
            num_classes: classes,
            num_shards: shards,
            accuracy: self.or("ensemble.accuracy", 0.9)?,
            seed: 0,
            backend: if self.get("ensemble.trace").is_some() {
                Backend::Trace
            } else {
                Backend::Synthetic
            },
            resample_prob: self.or("ensemble.resample_prob", 1.0)?,
        };
        oracle.validate()?;

        let retrain = self.or("simulation.retrain_duration", 10.0)?;
        let requests = self.or("workload.requests", 5000usize)?;
        let fraction = self.or("workload.unlearning_fraction", 0.1)?;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(invalid(format!("unlearning fraction {fraction} outside [0, 1]")));
        }
        let num_unlearning = (fraction * requests as f64).round() as usize;
        let num_inference = requests - num_unlearning;
        let horizon = match self.get("workload.horizon") {
            None => None,
            Some(v) if v.eq_ignore_ascii_case("auto") => None,
            Some(_) => self.value::<f64>("workload.horizon")?,
        }
        .unwrap_or(num_unlearning.max(1) as f64 * retrain);

        let workload = WorkloadSpec {
            num_unlearning,
            num_inference,
            horizon,
            num_shards: shards,
            unlearning_arrivals: self.distribution("workload.unlearning_distribution", horizon)?,
            inference_arrivals: self.distribution("workload.inference_distribution", horizon)?,
            shard_assignment: self.choice(
                "workload.shard_assignment",
                ShardAssignment::UniformRandom,
                &[
                    ("uniform_random", ShardAssignment::UniformRandom),
                    ("scattered_round_robin", ShardAssignment::ScatteredRoundRobin),
                ],
            )?,
            noise_fraction: self.or("workload.noise_fraction", 0.0)?,
            seed: 0,
        };
        workload.validate()?;

        let sim = SimParams {
            retrain_duration: retrain,
            inference_service_time: self.or("simulation.inference_service_time", 0.0)?,
            switch_latency: self.or("simulation.switch_latency", 0.0)?,
            horizon,
            seed: 0,
        };
        sim.validate()?;

        let detector = match (
            self.value::<f64>("mitigation.detector_tpr")?,
            self.value::<f64>("mitigation.detector_fpr")?,
        ) {
            (None, None) => None,
            (Some(tpr), Some(fpr)) => Some(Detector {
                true_positive_rate: tpr,
                false_positive_rate: fpr,
            }),
            _ => {
                return Err(invalid(
                    "mitigation.detector_tpr and mitigation.detector_fpr must be set together",
                ))
            }
        };
        let mitigation = MitigationConfig {
            detector,
            discard_below: self.value("mitigation.discard_below")?,
            shard_shuffle: self.or("mitigation.shard_shuffle", false)?,
            seed: 0,
        };
        let capacity = match self.get("scheduler.parallel_capacity") {
            None => usize::MAX,
            Some(v) if v.eq_ignore_ascii_case("unlimited") => usize::MAX,
            Some(_) => self.value::<usize>("scheduler.parallel_capacity")?.unwrap_or(usize::MAX),
        };
        let scheduler = SchedulerSettings {
            threshold: self.or("scheduler.threshold", 0.05)?,
            parallel_capacity: capacity,
            retrain_policy: self.choice(
                "scheduler.retrain_policy",
                RetrainPolicy::RetrainAllPending,
                &[
                    ("all_pending", RetrainPolicy::RetrainAllPending),
                    ("minimal", RetrainPolicy::RetrainMinimal),
                ],
            )?,
            certification: self.choice(
                "scheduler.certification",
                CertificationMode::Enforced,
                &[
                    ("enforced", CertificationMode::Enforced),
                    ("disabled", CertificationMode::Disabled),
                ],
            )?,
            mitigation,
        };
        for v in &variants {
            scheduler.variant_config(*v).validate()?;
        }

        Ok(ExperimentConfig {
            variants,
            seeds,
            check_privacy: self.or("experiment.check_privacy", true)?,
            oracle,
            trace: self.path("ensemble.trace"),
            workload,
            workload_file: self.path("workload.file"),
            sim,
            scheduler,
        })
    }

    fn distribution(&self, key: &str, horizon: f64) -> Result<ArrivalDistribution> {
        let name = self.get(key).unwrap_or("uniform").to_ascii_lowercase();
        let dist = match name.as_str() {
            "uniform" => ArrivalDistribution::Uniform,
            "grid" => ArrivalDistribution::Grid,
            "gaussian" => ArrivalDistribution::Gaussian {
                mean: self.or("workload.gaussian_mean", horizon / 2.0)?,
                std_dev: self.or("workload.gaussian_std", horizon / 3.0)?,
            },
            "multimodal" => {
                let modes = self.or("workload.modes", 2usize)?;
                let ArrivalDistribution::Multimodal {
                    means,
                    std_devs,
                    weights,
                } = ArrivalDistribution::multimodal_default(modes, horizon)?
                else {
                    unreachable!("multimodal_default builds a multimodal distribution")
                };
                ArrivalDistribution::Multimodal {
                    means: self.list("workload.mode_means")?.unwrap_or(means),
                    std_devs: self.list("workload.mode_stds")?.unwrap_or(std_devs),
                    weights: self.list("workload.mode_weights")?.unwrap_or(weights),
                }
            }
            _ => {
                let e = &self.entries[key];
                return Err(value_err(
                    e,
                    key,
                    "expected uniform, gaussian, multimodal or grid",
                ));
            }
        };
        dist.validate(horizon)?;
        Ok(dist)
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn value_err(e: &Entry, key: &str, err: impl fmt::Display) -> Error {
    let msg = format!("bad value {:?} for {key}: {err}", e.value);
    if e.line == 0 {
        Error::InvalidInput(msg)
    } else {
        parse_err(e.line, msg)
    }
}

/// Scheduler options shared by every variant of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerSettings {
    pub threshold: f64,
    pub parallel_capacity: usize,
    pub retrain_policy: RetrainPolicy,
    pub certification: CertificationMode,
    pub mitigation: MitigationConfig,
}

impl SchedulerSettings {
    pub fn variant_config(&self, variant: Variant) -> VariantConfig {
        let mut cfg = VariantConfig::new(variant)
            .with_threshold(self.threshold)
            .with_capacity(self.parallel_capacity);
        cfg.retrain_policy = self.retrain_policy;
        cfg.certification = self.certification;
        cfg.mitigation = self.mitigation;
        cfg
    }
}

/// A fully resolved experiment. Seeds in `oracle`, `workload` and `sim` are
/// placeholders; each replication derives its own.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub check_privacy: bool,
    pub oracle: OracleConfig,
    pub trace: Option<PathBuf>,
    pub workload: WorkloadSpec,
    /// import this CSV instead of generating a workload
    pub workload_file: Option<PathBuf>,
    pub sim: SimParams,
    pub scheduler: SchedulerSettings,
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        RawConfig::parse(text)?.resolve()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RawConfig::load(path)?.resolve()
    }

    /// The desk-scale defaults: 20 shards, 5000 requests, 10% unlearning.
    pub fn default_desk() -> Self {
        RawConfig::default()
            .resolve()
            .expect("built-in defaults are valid")
    }
}
