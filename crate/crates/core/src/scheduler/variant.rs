use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

/// Option I: whether inference keeps running on old model copies while
/// retraining happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContextMode {
    /// I-A
    DoubleContext,
    /// I-B
    SingleContext,
}

/// Option II: when pending unlearning requests are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnlearnTiming {
    /// II-A
    UncertTriggered,
    /// II-B
    Immediate,
    /// II-C
    ThresholdTriggered,
}

/// Option III: what happens to an inference that fails certification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UncertifiedHandling {
    /// III-A
    RespondUncertified,
    /// III-B
    Postpone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RetrainPolicy {
    #[default]
    RetrainAllPending,
    RetrainMinimal,
}

/// `Disabled` answers every inference from the serving models without any
/// check, emulating the inference-request-first strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CertificationMode {
    #[default]
    Enforced,
    Disabled,
}

/// The eight supported (I, II, III) combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Sisa,
    Dimp,
    Sutp,
    Dutp,
    Sttu,
    Dttu,
    Sttp,
    Dttp,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Sisa,
        Variant::Dimp,
        Variant::Sutp,
        Variant::Dutp,
        Variant::Sttu,
        Variant::Dttu,
        Variant::Sttp,
        Variant::Dttp,
    ];

    pub fn options(self) -> (ContextMode, UnlearnTiming, UncertifiedHandling) {
        use ContextMode::*;
        use UncertifiedHandling::*;
        use UnlearnTiming::*;
        match self {
            Variant::Dimp => (DoubleContext, Immediate, Postpone),
            Variant::Sutp => (SingleContext, UncertTriggered, Postpone),
            Variant::Dutp => (DoubleContext, UncertTriggered, Postpone),
            Variant::Sttu => (SingleContext, ThresholdTriggered, RespondUncertified),
            Variant::Dttu => (DoubleContext, ThresholdTriggered, RespondUncertified),
            Variant::Sttp => (SingleContext, ThresholdTriggered, Postpone),
            Variant::Dttp => (DoubleContext, ThresholdTriggered, Postpone),
            Variant::Sisa => (SingleContext, Immediate, Postpone),
        }
    }

    pub fn from_options(
        i: ContextMode,
        ii: UnlearnTiming,
        iii: UncertifiedHandling,
    ) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.options() == (i, ii, iii))
    }

    /// Variant with the other Option I choice, if it is supported.
    pub fn twin(self) -> Option<Variant> {
        let (i, ii, iii) = self.options();
        let other = match i {
            ContextMode::DoubleContext => ContextMode::SingleContext,
            ContextMode::SingleContext => ContextMode::DoubleContext,
        };
        Variant::from_options(other, ii, iii).filter(|v| *v != Variant::Sisa && self != Variant::Sisa)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sisa => "SISA",
            Variant::Dimp => "DIMP",
            Variant::Sutp => "SUTP",
            Variant::Dutp => "DUTP",
            Variant::Sttu => "STTU",
            Variant::Dttu => "DTTU",
            Variant::Sttp => "STTP",
            Variant::Dttp => "DTTP",
        }
    }

    /// Option letters as written in the variant table, e.g. `A-B-B`.
    pub fn triple(self) -> String {
        let (i, ii, iii) = self.options();
        let a = match i {
            ContextMode::DoubleContext => 'A',
            ContextMode::SingleContext => 'B',
        };
        let b = match ii {
            UnlearnTiming::UncertTriggered => 'A',
            UnlearnTiming::Immediate => 'B',
            UnlearnTiming::ThresholdTriggered => 'C',
        };
        let c = match iii {
            UncertifiedHandling::RespondUncertified => 'A',
            UncertifiedHandling::Postpone => 'B',
        };
        format!("{a}-{b}-{c}")
    }

    pub fn is_threshold(self) -> bool {
        self.options().1 == UnlearnTiming::ThresholdTriggered
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts a variant name (case-insensitive) or an option triple like `A-C-B`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(v) = Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
        {
            return Ok(v);
        }
        let letters: Vec<&str> = s.split('-').map(str::trim).collect();
        if let [i, ii, iii] = letters.as_slice() {
            let i = match i.to_ascii_uppercase().as_str() {
                "A" => ContextMode::DoubleContext,
                "B" => ContextMode::SingleContext,
                _ => return Err(invalid(format!("unknown option I value {i:?}"))),
            };
            let ii = match ii.to_ascii_uppercase().as_str() {
                "A" => UnlearnTiming::UncertTriggered,
                "B" => UnlearnTiming::Immediate,
                "C" => UnlearnTiming::ThresholdTriggered,
                _ => return Err(invalid(format!("unknown option II value {ii:?}"))),
            };
            let iii = match iii.to_ascii_uppercase().as_str() {
                "A" => UncertifiedHandling::RespondUncertified,
                "B" => UncertifiedHandling::Postpone,
                _ => return Err(invalid(format!("unknown option III value {iii:?}"))),
            };
            return Variant::from_options(i, ii, iii)
                .ok_or_else(|| invalid(format!("option triple {s} is not a supported variant")));
        }
        Err(invalid(format!("unknown variant {s:?}")))
    }
}

/// Probabilistic noise detector screening inference samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detector {
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
}

/// Server-side defences against malicious request streams.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MitigationConfig {
    /// reject samples flagged by the detector before inference
    pub detector: Option<Detector>,
    /// discard answers whose ensemble agreement is below this ratio
    pub discard_below: Option<f64>,
    /// remap unlearning targets through a seeded hash of the request id
    pub shard_shuffle: bool,
    pub seed: u64,
}

impl MitigationConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.detector {
            for (name, p) in [
                ("true positive rate", d.true_positive_rate),
                ("false positive rate", d.false_positive_rate),
            ] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid(format!("detector {name} {p} outside [0, 1]")));
                }
            }
        }
        if let Some(t) = self.discard_below {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid(format!("discard threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantConfig {
    pub option_i: ContextMode,
    pub option_ii: UnlearnTiming,
    pub option_iii: UncertifiedHandling,
    /// uncertification ratio; only read for threshold-triggered variants
    pub threshold: f64,
    /// maximum number of retraining jobs running at once
    pub parallel_capacity: usize,
    pub retrain_policy: RetrainPolicy,
    pub certification: CertificationMode,
    pub mitigation: MitigationConfig,
}

impl VariantConfig {
    pub fn new(variant: Variant) -> Self {
        let (option_i, option_ii, option_iii) = variant.options();
        Self {
            option_i,
            option_ii,
            option_iii,
            threshold: 0.05,
            parallel_capacity: usize::MAX,
            retrain_policy: RetrainPolicy::default(),
            certification: CertificationMode::default(),
            mitigation: MitigationConfig::default(),
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.parallel_capacity = capacity;
        self
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::from_options(self.option_i, self.option_ii, self.option_iii)
    }

    pub fn is_sisa(&self) -> bool {
        self.variant() == Some(Variant::Sisa)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant().is_none() {
            return Err(invalid("option triple is not one of the supported variants"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(invalid(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.parallel_capacity == 0 {
            return Err(invalid("parallel capacity must be positive"));
        }
        self.mitigation.validate()
    }
}
