//! Request stream generation and CSV import/export.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::ensemble::ShardId;
use crate::error::{invalid, Error, Result};
use crate::oracle::SampleId;
use crate::scheduler::{Request, RequestKind};

/// Attempts per sample before a truncated distribution is declared degenerate.
const MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalDistribution {
    Uniform,
    /// Normal truncated to the horizon by resampling.
    Gaussian { mean: f64, std_dev: f64 },
    Multimodal {
        means: Vec<f64>,
        std_devs: Vec<f64>,
        weights: Vec<f64>,
    },
    /// Evenly spaced arrivals at `i * T / n` for `i` in `0..n`.
    Grid,
}

impl ArrivalDistribution {
    /// `m` equally weighted peaks at `i * T / (m + 1)` with spread `T / (3m)`.
    pub fn multimodal_default(m: usize, horizon: f64) -> Result<Self> {
        if m == 0 {
            return Err(invalid("multimodal distribution needs at least one mode"));
        }
        let mf = m as f64;
        Ok(Self::Multimodal {
            means: (1..=m).map(|i| i as f64 * horizon / (mf + 1.0)).collect(),
            std_devs: vec![horizon / (3.0 * mf); m],
            weights: vec![1.0 / mf; m],
        })
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        match self {
            Self::Uniform | Self::Grid => Ok(()),
            Self::Gaussian { mean, std_dev } => {
                if !(*std_dev > 0.0) || !std_dev.is_finite() {
                    return Err(invalid(format!("gaussian std dev {std_dev} must be positive")));
                }
                if !mean.is_finite() {
                    return Err(invalid("gaussian mean must be finite"));
                }
                Ok(())
            }
            Self::Multimodal {
                means,
                std_devs,
                weights,
            } => {
                if means.is_empty() || means.len() != std_devs.len() || means.len() != weights.len() {
                    return Err(invalid(
                        "multimodal means, std devs and weights must be non-empty and equally long",
                    ));
                }
                if let Some(s) = std_devs.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
                    return Err(invalid(format!("multimodal std dev {s} must be positive")));
                }
                if let Some(m) = means.iter().find(|m| !(0.0..=horizon).contains(*m)) {
                    return Err(invalid(format!("multimodal mean {m} outside [0, {horizon}]")));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(invalid("multimodal weights must be non-negative"));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(invalid(format!("multimodal weights sum to {total}, not 1")));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardAssignment {
    UniformRandom,
    /// The i-th unlearning request targets shard `i mod K`.
    ScatteredRoundRobin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub num_unlearning: usize,
    pub num_inference: usize,
    pub horizon: f64,
    pub num_shards: usize,
    pub unlearning_arrivals: ArrivalDistribution,
    pub inference_arrivals: ArrivalDistribution,
    pub shard_assignment: ShardAssignment,
    /// fraction of inference samples replaced by noise
    pub noise_fraction: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    /// Uniform arrivals for both kinds with uniformly random shard targets.
    pub fn uniform(
        num_unlearning: usize,
        num_inference: usize,
        horizon: f64,
        num_shards: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_unlearning,
            num_inference,
            horizon,
            num_shards,
            unlearning_arrivals: ArrivalDistribution::Uniform,
            inference_arrivals: ArrivalDistribution::Uniform,
            shard_assignment: ShardAssignment::UniformRandom,
            noise_fraction: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(invalid(format!("horizon {} must be positive", self.horizon)));
        }
        if self.num_shards == 0 {
            return Err(invalid("workload needs at least one shard"));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(invalid(format!(
                "noise fraction {} outside [0, 1]",
                self.noise_fraction
            )));
        }
        self.unlearning_arrivals.validate(self.horizon)?;
        self.inference_arrivals.validate(self.horizon)
    }
}

/// Draws `n` arrival times in `[0, horizon]`, resampling anything outside.
pub fn sample_arrivals(
    dist: &ArrivalDistribution,
    n: usize,
    horizon: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    dist.validate(horizon)?;
    match dist {
        ArrivalDistribution::Uniform => Ok((0..n).map(|_| rng.random_range(0.0..=horizon)).collect()),
        ArrivalDistribution::Grid => deterministic_unlearning_grid(n, horizon),
        ArrivalDistribution::Gaussian { mean, std_dev } => {
            let normal = Normal::new(*mean, *std_dev).map_err(|e| invalid(e.to_string()))?;
            (0..n)
                .map(|_| truncated(horizon, || normal.sample(rng)))
                .collect()
        }
        ArrivalDistribution::Multimodal {
            means,
            std_devs,
            weights,
        } => {
            let pick = WeightedIndex::new(weights).map_err(|e| invalid(e.to_string()))?;
            let normals = means
                .iter()
                .zip(std_devs)
                .map(|(m, s)| Normal::new(*m, *s).map_err(|e| invalid(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            (0..n)
                .map(|_| truncated(horizon, || normals[pick.sample(rng)].sample(rng)))
                .collect()
        }
    }
}

fn truncated(horizon: f64, mut draw: impl FnMut() -> f64) -> Result<f64> {
    for _ in 0..MAX_REJECTIONS {
        let t = draw();
        if (0.0..=horizon).contains(&t) {
            return Ok(t);
        }
    }
    Err(invalid(format!(
        "arrival distribution puts almost no mass inside [0, {horizon}]"
    )))
}

/// Arrival times `0, T/n, 2T/n, ..., (n-1)T/n`.
pub fn deterministic_unlearning_grid(n_u: usize, horizon: f64) -> Result<Vec<f64>> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(invalid(format!("horizon {horizon} must be positive")));
    }
    let step = horizon / n_u as f64;
    Ok((0..n_u).map(|i| i as f64 * step).collect())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates a request stream sorted by arrival. At equal times unlearning
/// requests come first. Request ids are positions in the returned stream.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<Request>> {
    spec.validate()?;
    let unlearn_times = sample_arrivals(
        &spec.unlearning_arrivals,
        spec.num_unlearning,
        spec.horizon,
        &mut rng_for(spec.seed, 1),
    )?;
    let mut target_rng = rng_for(spec.seed, 2);
    let targets: Vec<usize> = (0..spec.num_unlearning)
        .map(|i| match spec.shard_assignment {
            ShardAssignment::UniformRandom => target_rng.random_range(0..spec.num_shards),
            ShardAssignment::ScatteredRoundRobin => i % spec.num_shards,
        })
        .collect();
    let infer_times = sample_arrivals(
        &spec.inference_arrivals,
        spec.num_inference,
        spec.horizon,
        &mut rng_for(spec.seed, 3),
    )?;
    let mut sample_rng = rng_for(spec.seed, 4);
    let sample_values: Vec<u64> = (0..spec.num_inference).map(|_| sample_rng.random()).collect();
    let noisy = choose_noise(spec.num_inference, spec.noise_fraction, &mut rng_for(spec.seed, 5));

    // round-robin order follows arrival order, so sort unlearning times first
    let mut unlearn_times = unlearn_times;
    unlearn_times.sort_by(f64::total_cmp);

    let mut requests: Vec<Request> = unlearn_times
        .into_iter()
        .zip(targets)
        .map(|(t, k)| Request::unlearning(0, t, ShardId(k)))
        .chain(infer_times.into_iter().enumerate().map(|(i, t)| {
            let sample = SampleId {
                value: sample_values[i],
                is_noise: noisy[i],
            };
            Request::inference(0, t, sample)
        }))
        .collect();
    // stable sort keeps generation order among exact ties
    requests.sort_by(|a, b| {
        a.arrival
            .total_cmp(&b.arrival)
            .then(a.is_inference().cmp(&b.is_inference()))
    });
    for (i, r) in requests.iter_mut().enumerate() {
        r.id = i as u64;
    }
    Ok(requests)
}

/// Exactly `round(fraction * n)` flags set, at random positions.
fn choose_noise(n: usize, fraction: f64, rng: &mut impl Rng) -> Vec<bool> {
    let count = ((fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let mut flags = vec![false; n];
    for &i in &order[..count] {
        flags[i] = true;
    }
    flags
}

/// Checks that a stream is sorted, inside `[0, horizon]` and has unique ids.
pub fn validate_stream(requests: &[Request], horizon: f64) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(requests.len());
    for (i, r) in requests.iter().enumerate() {
        if !r.arrival.is_finite() || r.arrival < 0.0 || r.arrival > horizon {
            return Err(invalid(format!(
                "request {} arrives at {} outside [0, {horizon}]",
                r.id, r.arrival
            )));
        }
        if i > 0 && r.arrival < requests[i - 1].arrival {
            return Err(invalid(format!(
                "workload not sorted: request {} at {} follows {}",
                r.id,
                r.arrival,
                requests[i - 1].arrival
            )));
        }
        if !seen.insert(r.id) {
            return Err(invalid(format!("duplicate request id {}", r.id)));
        }
    }
    Ok(())
}

pub const CSV_HEADER: [&str; 5] = ["request_id", "kind", "arrival", "shard_or_sample", "is_noise"];

pub fn write_csv(requests: &[Request], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in requests {
        let (kind, target, noise) = match r.kind {
            RequestKind::Inference(s) => ("inference", s.value, s.is_noise),
            RequestKind::Unlearning(k) => ("unlearning", k.0 as u64, false),
        };
        w.write_record([
            r.id.to_string(),
            kind.to_string(),
            r.arrival.to_string(),
            target.to_string(),
            u8::from(noise).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(requests: &[Request], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(requests, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_csv(text: &str) -> Result<Vec<Request>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let field = |idx: usize| record.get(idx).unwrap_or("").trim();
        let bad = |idx: usize| Error::Parse {
            line,
            msg: format!("bad {}: {:?}", CSV_HEADER[idx], field(idx)),
        };
        let id: u64 = field(0).parse().map_err(|_| bad(0))?;
        let arrival: f64 = field(2).parse().map_err(|_| bad(2))?;
        let target: u64 = field(3).parse().map_err(|_| bad(3))?;
        let noise = match field(4) {
            "0" | "false" => false,
            "1" | "true" => true,
            _ => return Err(bad(4)),
        };
        let kind = match field(1) {
            "inference" => RequestKind::Inference(SampleId {
                value: target,
                is_noise: noise,
            }),
            "unlearning" => RequestKind::Unlearning(ShardId(target as usize)),
            _ => return Err(bad(1)),
        };
        out.push(Request { id, arrival, kind });
    }
    Ok(out)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<Request>> {
    read_csv(&fs::read_to_string(path)?)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}
