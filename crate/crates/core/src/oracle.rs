//! Constituent-model prediction oracle.
//!
//! The simulator never trains anything. Instead each (sample, shard,
//! version) triple maps to a label, either synthetically through a seeded
//! hash or by lookup in a trace exported from real models.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::ensemble::{aggregate, count_votes, LabelId, PredictionVector, ShardId};
use crate::error::{invalid, Error, Result};

/// An inference sample. `is_noise` marks adversarial hard-to-classify inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleId {
    pub value: u64,
    pub is_noise: bool,
}

impl SampleId {
    pub fn clean(value: u64) -> Self {
        Self {
            value,
            is_noise: false,
        }
    }

    pub fn noise(value: u64) -> Self {
        Self {
            value,
            is_noise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Synthetic,
    Trace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub num_classes: usize,
    pub num_shards: usize,
    /// probability that a clean sample is labelled correctly
    pub accuracy: f64,
    pub seed: u64,
    pub backend: Backend,
    /// Probability that a retrained version draws a fresh prediction rather
    /// than repeating its predecessor's. 1.0 means fully independent.
    pub resample_prob: f64,
}

impl OracleConfig {
    pub fn synthetic(num_classes: usize, num_shards: usize, accuracy: f64, seed: u64) -> Self {
        Self {
            num_classes,
            num_shards,
            accuracy,
            seed,
            backend: Backend::Synthetic,
            resample_prob: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("oracle needs at least 2 classes"));
        }
        if self.num_shards < 1 {
            return Err(invalid("oracle needs at least 1 shard"));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(invalid(format!("accuracy {} outside [0, 1]", self.accuracy)));
        }
        if !(0.0..=1.0).contains(&self.resample_prob) {
            return Err(invalid(format!(
                "resample probability {} outside [0, 1]",
                self.resample_prob
            )));
        }
        Ok(())
    }
}

/// Anything that can say what a shard's model at a given version predicts.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn num_shards(&self) -> usize;
    fn predict(&self, sample: SampleId, shard: ShardId, version: u32) -> Result<LabelId>;

    /// Predictions of every shard under the given per-shard versions.
    fn predict_all(&self, sample: SampleId, versions: &[u32]) -> Result<PredictionVector> {
        let labels = versions
            .iter()
            .enumerate()
            .map(|(k, &v)| self.predict(sample, ShardId(k), v))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionVector::new(labels))
    }

    /// Fraction of shards agreeing with the aggregated label.
    fn confidence(&self, sample: SampleId, serving_versions: &[u32]) -> Result<f64> {
        let preds = self.predict_all(sample, serving_versions)?;
        let counts = count_votes(&preds, self.num_classes())?;
        let winner = aggregate(&counts)?;
        Ok(counts.count(winner) as f64 / preds.num_shards() as f64)
    }
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(0x5eed_u64, |acc, &w| mix64(acc ^ mix64(w)))
}

fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Hash-driven prediction model.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    cfg: OracleConfig,
}

const TAG_TRUE_LABEL: u64 = 1;
const TAG_ACCURACY: u64 = 2;
const TAG_LABEL: u64 = 3;
const TAG_RESAMPLE: u64 = 4;

impl SyntheticOracle {
    pub fn new(cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    /// Ground-truth label of a sample, fixed by the seed.
    pub fn true_label(&self, sample: SampleId) -> LabelId {
        let h = hash_words(&[self.cfg.seed, TAG_TRUE_LABEL, sample.value]);
        LabelId((h % self.cfg.num_classes as u64) as usize)
    }

    fn fresh_draw(&self, sample: SampleId, shard: ShardId, version: u32) -> LabelId {
        let c = self.cfg.num_classes as u64;
        let key = [self.cfg.seed, sample.value, shard.0 as u64, u64::from(version)];
        let pick = hash_words(&[TAG_LABEL, key[0], key[1], key[2], key[3]]);
        if sample.is_noise {
            return LabelId((pick % c) as usize);
        }
        let coin = unit_interval(hash_words(&[TAG_ACCURACY, key[0], key[1], key[2], key[3]]));
        let truth = self.true_label(sample).0 as u64;
        if coin < self.cfg.accuracy {
            LabelId(truth as usize)
        } else {
            // uniform over the C-1 wrong labels
            LabelId(((truth + 1 + pick % (c - 1)) % c) as usize)
        }
    }
}

impl Predictor for SyntheticOracle {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn num_shards(&self) -> usize {
        self.cfg.num_shards
    }

    fn predict(&self, sample: SampleId, shard: ShardId, version: u32) -> Result<LabelId> {
        if shard.0 >= self.cfg.num_shards {
            return Err(invalid(format!(
                "shard {shard} outside [0, {})",
                self.cfg.num_shards
            )));
        }
        // Walk back to the most recent version that resampled.
        let mut v = version;
        while v > 0 && self.cfg.resample_prob < 1.0 {
            let h = hash_words(&[
                TAG_RESAMPLE,
                self.cfg.seed,
                sample.value,
                shard.0 as u64,
                u64::from(v),
            ]);
            if unit_interval(h) < self.cfg.resample_prob {
                break;
            }
            v -= 1;
        }
        Ok(self.fresh_draw(sample, shard, v))
    }
}

/// Predictions replayed from a file.
#[derive(Debug, Clone, Default)]
pub struct PredictionTrace {
    pub num_classes: usize,
    pub num_shards: usize,
    entries: HashMap<(u64, usize, u32), (LabelId, f64)>,
}

pub const TRACE_HEADER: &str = "eraser-trace v1";

impl PredictionTrace {
    pub fn new(num_classes: usize, num_shards: usize) -> Self {
        Self {
            num_classes,
            num_shards,
            entries: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        sample: u64,
        shard: ShardId,
        version: u32,
        label: LabelId,
        confidence: f64,
    ) -> Result<()> {
        if label.0 >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                shard: shard.0,
                label: label.0,
                num_classes: self.num_classes,
            });
        }
        if shard.0 >= self.num_shards {
            return Err(invalid(format!("shard {shard} outside [0, {})", self.num_shards)));
        }
        self.entries
            .insert((sample, shard.0, version), (label, confidence));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry_confidence(&self, sample: u64, shard: ShardId, version: u32) -> Option<f64> {
        self.entries.get(&(sample, shard.0, version)).map(|e| e.1)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty trace".into(),
        })?;
        let (c, k) = parse_header(header.trim())?;
        let mut trace = Self::new(c, k);
        for (idx, raw) in lines {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: line_no, msg };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(perr(format!("expected 5 fields, found {}", fields.len())));
            }
            let sample: u64 = fields[0]
                .parse()
                .map_err(|_| perr(format!("bad sample id {:?}", fields[0])))?;
            let shard: usize = fields[1]
                .parse()
                .map_err(|_| perr(format!("bad shard id {:?}", fields[1])))?;
            let version: u32 = fields[2]
                .parse()
                .map_err(|_| perr(format!("bad version {:?}", fields[2])))?;
            let label: usize = fields[3]
                .parse()
                .map_err(|_| perr(format!("bad label {:?}", fields[3])))?;
            let confidence: f64 = fields[4]
                .parse()
                .map_err(|_| perr(format!("bad confidence {:?}", fields[4])))?;
            if !(0.0..=1.0).contains(&confidence) {
                return Err(perr(format!("confidence {confidence} outside [0, 1]")));
            }
            if shard >= k {
                return Err(perr(format!("shard {shard} outside [0, {k})")));
            }
            if label >= c {
                return Err(Error::LabelOutOfRange {
                    shard,
                    label,
                    num_classes: c,
                });
            }
            trace.insert(sample, ShardId(shard), version, LabelId(label), confidence)?;
        }
        Ok(trace)
    }

    pub fn to_text(&self) -> String {
        let mut keys: Vec<_> = self.entries.keys().copied().collect();
        keys.sort_unstable();
        let mut out = format!("{TRACE_HEADER} C={} K={}\n", self.num_classes, self.num_shards);
        for key in keys {
            let (label, conf) = self.entries[&key];
            out.push_str(&format!("{},{},{},{},{}\n", key.0, key.1, key.2, label.0, conf));
        }
        out
    }
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let err = |msg: &str| Error::Parse {
        line: 1,
        msg: msg.to_string(),
    };
    let rest = header
        .strip_prefix(TRACE_HEADER)
        .ok_or_else(|| err("missing `eraser-trace v1` header"))?;
    let mut c = None;
    let mut k = None;
    for tok in rest.split_whitespace() {
        match tok.split_once('=') {
            Some(("C", v)) => c = v.parse().ok(),
            Some(("K", v)) => k = v.parse().ok(),
            _ => return Err(err(&format!("unexpected header token {tok:?}"))),
        }
    }
    match (c, k) {
        (Some(c), Some(k)) if c >= 2 && k >= 1 => Ok((c, k)),
        _ => Err(err("header needs C=<int >= 2> and K=<int >= 1>")),
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<PredictionTrace> {
    PredictionTrace::parse(&fs::read_to_string(path)?)
}

impl Predictor for PredictionTrace {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn num_shards(&self) -> usize {
        self.num_shards
    }

    fn predict(&self, sample: SampleId, shard: ShardId, version: u32) -> Result<LabelId> {
        self.entries
            .get(&(sample.value, shard.0, version))
            .map(|e| e.0)
            .ok_or(Error::MissingTrace {
                sample: sample.value,
                shard: shard.0,
                version,
            })
    }
}

/// Either backend behind one type.
#[derive(Debug, Clone)]
pub enum Oracle {
    Synthetic(SyntheticOracle),
    Trace(PredictionTrace),
}

impl Oracle {
    pub fn synthetic(cfg: OracleConfig) -> Result<Self> {
        Ok(Oracle::Synthetic(SyntheticOracle::new(cfg)?))
    }

    /// Builds the oracle named by `cfg.backend`; the trace backend needs `trace`.
    pub fn from_config(cfg: &OracleConfig, trace: Option<PredictionTrace>) -> Result<Self> {
        match cfg.backend {
            Backend::Synthetic => Self::synthetic(cfg.clone()),
            Backend::Trace => {
                let trace = trace.ok_or_else(|| invalid("trace backend selected without a trace"))?;
                if trace.num_classes != cfg.num_classes || trace.num_shards != cfg.num_shards {
                    return Err(invalid(format!(
                        "trace is C={} K={} but config says C={} K={}",
                        trace.num_classes, trace.num_shards, cfg.num_classes, cfg.num_shards
                    )));
                }
                Ok(Oracle::Trace(trace))
            }
        }
    }
}

impl Predictor for Oracle {
    fn num_classes(&self) -> usize {
        match self {
            Oracle::Synthetic(o) => o.num_classes(),
            Oracle::Trace(t) => t.num_classes(),
        }
    }

    fn num_shards(&self) -> usize {
        match self {
            Oracle::Synthetic(o) => o.num_shards(),
            Oracle::Trace(t) => t.num_shards(),
        }
    }

    fn predict(&self, sample: SampleId, shard: ShardId, version: u32) -> Result<LabelId> {
        match self {
            Oracle::Synthetic(o) => o.predict(sample, shard, version),
            Oracle::Trace(t) => t.predict(sample, shard, version),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(acc: f64) -> SyntheticOracle {
        SyntheticOracle::new(OracleConfig::synthetic(10, 20, acc, 7)).unwrap()
    }

    #[test]
    fn perfect_accuracy_returns_truth() {
        let o = oracle(1.0);
        for s in 0..200 {
            let sample = SampleId::clean(s);
            let truth = o.true_label(sample);
            for k in 0..20 {
                for v in 0..3 {
                    assert_eq!(o.predict(sample, ShardId(k), v).unwrap(), truth);
                }
            }
        }
    }

    #[test]
    fn predictions_are_repeatable() {
        let a = oracle(0.7);
        let b = oracle(0.7);
        for s in 0..100 {
            for k in 0..20 {
                let x = a.predict(SampleId::clean(s), ShardId(k), 2).unwrap();
                assert_eq!(x, a.predict(SampleId::clean(s), ShardId(k), 2).unwrap());
                assert_eq!(x, b.predict(SampleId::clean(s), ShardId(k), 2).unwrap());
            }
        }
    }

    #[test]
    fn empirical_accuracy_matches_config() {
        let o = oracle(0.9);
        let mut hits = 0;
        let n = 100_000;
        for i in 0..n {
            let sample = SampleId::clean(i / 20);
            let shard = ShardId((i % 20) as usize);
            if o.predict(sample, shard, (i % 3) as u32).unwrap() == o.true_label(sample) {
                hits += 1;
            }
        }
        let acc = hits as f64 / n as f64;
        assert!((acc - 0.9).abs() < 0.01, "accuracy {acc}");
    }

    #[test]
    fn wrong_labels_never_equal_truth() {
        let o = oracle(0.0);
        for s in 0..500 {
            let sample = SampleId::clean(s);
            assert_ne!(o.predict(sample, ShardId(3), 0).unwrap(), o.true_label(sample));
        }
    }

    #[test]
    fn resample_prob_zero_freezes_predictions() {
        let mut cfg = OracleConfig::synthetic(10, 4, 0.3, 1);
        cfg.resample_prob = 0.0;
        let o = SyntheticOracle::new(cfg).unwrap();
        for s in 0..100 {
            let base = o.predict(SampleId::clean(s), ShardId(1), 0).unwrap();
            for v in 1..5 {
                assert_eq!(o.predict(SampleId::clean(s), ShardId(1), v).unwrap(), base);
            }
        }
    }

    #[test]
    fn confidence_is_agreement_ratio() {
        let mut t = PredictionTrace::new(3, 5);
        for (k, l) in [0, 0, 0, 1, 2].into_iter().enumerate() {
            t.insert(9, ShardId(k), 0, LabelId(l), 0.5).unwrap();
        }
        for k in 0..5 {
            t.insert(10, ShardId(k), 0, LabelId(2), 0.9).unwrap();
        }
        assert!((t.confidence(SampleId::clean(9), &[0; 5]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(t.confidence(SampleId::clean(10), &[0; 5]).unwrap(), 1.0);
    }

    #[test]
    fn trace_round_trip_and_errors() {
        let text = "eraser-trace v1 C=3 K=2\n0,0,0,1,0.8\n0,1,0,2,0.4\n0,1,1,0,1\n";
        let t = PredictionTrace::parse(text).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.predict(SampleId::clean(0), ShardId(1), 1).unwrap(), LabelId(0));
        assert_eq!(
            t.predict(SampleId::clean(0), ShardId(0), 1).unwrap_err(),
            Error::MissingTrace {
                sample: 0,
                shard: 0,
                version: 1
            }
        );
        assert_eq!(PredictionTrace::parse(&t.to_text()).unwrap().to_text(), t.to_text());

        let bad_label = "eraser-trace v1 C=3 K=2\n0,0,0,3,0.5\n";
        assert!(matches!(
            PredictionTrace::parse(bad_label).unwrap_err(),
            Error::LabelOutOfRange { label: 3, .. }
        ));
        let extra = "eraser-trace v1 C=3 K=2\n0,0,0,1,0.5\n0,0,1,1,0.5,x\n";
        assert_eq!(
            PredictionTrace::parse(extra).unwrap_err(),
            Error::Parse {
                line: 3,
                msg: "expected 5 fields, found 6".into()
            }
        );
        assert!(matches!(
            PredictionTrace::parse("trace C=3 K=2\n").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
        assert!(matches!(
            PredictionTrace::parse("eraser-trace v1 C=3 K=2\n0,0,0,1,1.5\n").unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
    }
}
