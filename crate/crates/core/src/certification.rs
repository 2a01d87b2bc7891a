//! Certified inference consistency.
//!
//! Given the predictions of the serving constituent models and the set of
//! shards with pending unlearning requests, decide whether executing those
//! requests could possibly change the aggregated label. Impacted shards may
//! predict anything after retraining; unimpacted shards keep their
//! prediction.
//!
//! Three deciders are provided:
//!
//! * [`certify_fine`]: per challenger `y_b`, `2*g1 + g3(y_b) <= margin(y_b)`
//!   where `g1` counts impacted shards voting for the winner and `g3` those
//!   voting for neither the winner nor `y_b`.
//! * [`certify_coarse`]: per challenger, `2*g <= margin(y_b)` with `g` the
//!   number of impacted shards. Strictly weaker than the fine test.
//! * [`brute_force_consistent`]: enumerates every relabelling of the
//!   impacted shards. Exact, exponential, used as ground truth.
//!
//! `margin(y_b) = count(y_a) - count(y_b) - [y_b < y_a]`.
//!
//! [`certify_fine_max_margin`] evaluates the fine condition against the
//! largest margin over all challengers instead of each challenger's own
//! margin. It is unsound and exists so that the fuzz suite can exhibit a
//! counterexample.

use crate::ensemble::{aggregate, count_votes, ImpactedSet, LabelId, PredictionVector, VoteCount};
use crate::error::{invalid, Error, Result};

/// Default cap on the number of impacted shards for exhaustive enumeration.
pub const DEFAULT_ENUMERATION_CAP: usize = 12;

/// Impacted-shard counts relative to a (winner, challenger) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GammaCounts {
    /// impacted shards predicting the winner
    pub gamma1: usize,
    /// impacted shards predicting the challenger
    pub gamma2: usize,
    /// impacted shards predicting neither
    pub gamma3: usize,
}

impl GammaCounts {
    pub fn total(&self) -> usize {
        self.gamma1 + self.gamma2 + self.gamma3
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengerCheck {
    pub challenger: LabelId,
    pub gammas: GammaCounts,
    pub margin: i64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertificationVerdict {
    pub certified: bool,
    pub winner: LabelId,
    pub per_challenger: Vec<ChallengerCheck>,
}

impl CertificationVerdict {
    /// Smallest slack `margin - lhs` over challengers; negative when uncertified.
    pub fn min_slack(&self, lhs: impl Fn(&GammaCounts) -> i64) -> Option<i64> {
        self.per_challenger
            .iter()
            .map(|c| c.margin - lhs(&c.gammas))
            .min()
    }
}

pub fn gamma_counts(
    preds_old: &PredictionVector,
    impacted: &ImpactedSet,
    winner: LabelId,
    challenger: LabelId,
) -> Result<GammaCounts> {
    if winner == challenger {
        return Err(invalid(format!(
            "winner and challenger must differ (both {winner})"
        )));
    }
    impacted.validate(preds_old.num_shards())?;
    Ok(gamma_counts_unchecked(preds_old, impacted, winner, challenger))
}

fn gamma_counts_unchecked(
    preds: &PredictionVector,
    impacted: &ImpactedSet,
    winner: LabelId,
    challenger: LabelId,
) -> GammaCounts {
    let mut g = GammaCounts::default();
    for shard in impacted.iter() {
        let label = preds.get(shard);
        if label == winner {
            g.gamma1 += 1;
        } else if label == challenger {
            g.gamma2 += 1;
        } else {
            g.gamma3 += 1;
        }
    }
    g
}

/// Vote gap between winner and challenger, less one when the challenger
/// would win a tie.
pub fn margin(counts: &VoteCount, winner: LabelId, challenger: LabelId) -> i64 {
    counts.count(winner) as i64 - counts.count(challenger) as i64 - i64::from(challenger < winner)
}

fn verdict_with(
    preds: &PredictionVector,
    impacted: &ImpactedSet,
    num_classes: usize,
    satisfied: impl Fn(&GammaCounts, i64, usize) -> bool,
) -> Result<CertificationVerdict> {
    let counts = count_votes(preds, num_classes)?;
    impacted.validate(preds.num_shards())?;
    let winner = aggregate(&counts)?;
    let per_challenger: Vec<ChallengerCheck> = (0..num_classes)
        .map(LabelId)
        .filter(|&y| y != winner)
        .map(|challenger| {
            let gammas = gamma_counts_unchecked(preds, impacted, winner, challenger);
            let margin = margin(&counts, winner, challenger);
            ChallengerCheck {
                challenger,
                gammas,
                margin,
                satisfied: satisfied(&gammas, margin, impacted.len()),
            }
        })
        .collect();
    Ok(CertificationVerdict {
        certified: per_challenger.iter().all(|c| c.satisfied),
        winner,
        per_challenger,
    })
}

/// Fine-grained certification, checked challenger by challenger.
pub fn certify_fine(
    preds_old: &PredictionVector,
    impacted: &ImpactedSet,
    num_classes: usize,
) -> Result<CertificationVerdict> {
    verdict_with(preds_old, impacted, num_classes, |g, margin, _| {
        (2 * g.gamma1 + g.gamma3) as i64 <= margin
    })
}

/// Coarse certification that only looks at how many shards are impacted.
pub fn certify_coarse(
    preds_old: &PredictionVector,
    impacted: &ImpactedSet,
    num_classes: usize,
) -> Result<CertificationVerdict> {
    verdict_with(preds_old, impacted, num_classes, |_, margin, gamma| {
        (2 * gamma) as i64 <= margin
    })
}

/// Fine condition compared against the maximum margin over all challengers.
/// Unsound; see the module docs.
pub fn certify_fine_max_margin(
    preds_old: &PredictionVector,
    impacted: &ImpactedSet,
    num_classes: usize,
) -> Result<bool> {
    let v = certify_fine(preds_old, impacted, num_classes)?;
    let max_margin = v.per_challenger.iter().map(|c| c.margin).max();
    Ok(match max_margin {
        None => true,
        Some(m) => v
            .per_challenger
            .iter()
            .all(|c| (2 * c.gammas.gamma1 + c.gammas.gamma3) as i64 <= m),
    })
}

/// Exhaustive check that no relabelling of the impacted shards changes the
/// aggregated label. Uses the default enumeration cap.
pub fn brute_force_consistent(
    preds_old: &PredictionVector,
    impacted: &ImpactedSet,
    num_classes: usize,
) -> Result<bool> {
    brute_force_consistent_capped(preds_old, impacted, num_classes, DEFAULT_ENUMERATION_CAP)
}

pub fn brute_force_consistent_capped(
    preds_old: &PredictionVector,
    impacted: &ImpactedSet,
    num_classes: usize,
    cap: usize,
) -> Result<bool> {
    preds_old.validate(num_classes)?;
    impacted.validate(preds_old.num_shards())?;
    if impacted.len() > cap {
        return Err(Error::Capacity {
            impacted: impacted.len(),
            cap,
        });
    }

    // Counts contributed by the untouched shards stay fixed; the impacted
    // shards are enumerated as an odometer over [0, C)^m.
    let mut counts = vec![0i64; num_classes];
    for (k, label) in preds_old.labels().iter().enumerate() {
        if !impacted.contains(crate::ensemble::ShardId(k)) {
            counts[label.0] += 1;
        }
    }
    let original = {
        let mut full = counts.clone();
        for s in impacted.iter() {
            full[preds_old.get(s).0] += 1;
        }
        argmax_smallest(&full)
    };

    let m = impacted.len();
    let mut digits = vec![0usize; m];
    counts[0] += m as i64;
    loop {
        if argmax_smallest(&counts) != original {
            return Ok(false);
        }
        // advance the odometer
        let mut i = 0;
        loop {
            if i == m {
                return Ok(true);
            }
            counts[digits[i]] -= 1;
            digits[i] += 1;
            if digits[i] < num_classes {
                counts[digits[i]] += 1;
                break;
            }
            digits[i] = 0;
            counts[0] += 1;
            i += 1;
        }
    }
}

fn argmax_smallest(counts: &[i64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(raw: &[usize]) -> PredictionVector {
        PredictionVector::from_raw(raw)
    }

    fn set(raw: &[usize]) -> ImpactedSet {
        ImpactedSet::from_indices(raw)
    }

    fn g(a: usize, b: usize, c: usize) -> GammaCounts {
        GammaCounts {
            gamma1: a,
            gamma2: b,
            gamma3: c,
        }
    }

    #[test]
    fn gamma_counts_examples() {
        let r = gamma_counts(&pv(&[0, 1, 2, 0]), &set(&[1, 2]), LabelId(0), LabelId(1)).unwrap();
        assert_eq!(r, g(0, 1, 1));
        let r = gamma_counts(&pv(&[0, 0, 1]), &set(&[0]), LabelId(0), LabelId(1)).unwrap();
        assert_eq!(r, g(1, 0, 0));
        let r = gamma_counts(&pv(&[0, 0, 0, 0, 1]), &set(&[]), LabelId(0), LabelId(1)).unwrap();
        assert_eq!(r, g(0, 0, 0));
    }

    #[test]
    fn gamma_counts_rejects_equal_labels() {
        assert!(gamma_counts(&pv(&[0, 1]), &set(&[0]), LabelId(1), LabelId(1)).is_err());
        assert!(gamma_counts(&pv(&[0, 1]), &set(&[7]), LabelId(0), LabelId(1)).is_err());
    }

    #[test]
    fn fine_certifies_single_dissenting_impacted_shard() {
        let v = certify_fine(&pv(&[0, 0, 0, 0, 1]), &set(&[4]), 3).unwrap();
        assert!(v.certified);
        assert_eq!(v.winner, LabelId(0));
        assert_eq!(v.per_challenger[0].challenger, LabelId(1));
        assert_eq!(v.per_challenger[0].gammas, g(0, 1, 0));
        assert_eq!(v.per_challenger[0].margin, 3);
        assert_eq!(v.per_challenger[1].gammas, g(0, 0, 1));
        assert_eq!(v.per_challenger[1].margin, 4);
    }

    #[test]
    fn fine_rejects_flippable_vote() {
        let v = certify_fine(&pv(&[0, 0, 1]), &set(&[0]), 2).unwrap();
        assert!(!v.certified);
        assert_eq!(v.per_challenger[0].gammas, g(1, 0, 0));
        assert_eq!(v.per_challenger[0].margin, 1);
    }

    #[test]
    fn empty_impacted_set_always_certifies() {
        for raw in [&[0usize, 1][..], &[1, 0], &[2, 2, 1, 0], &[0]] {
            let v = certify_fine(&pv(raw), &ImpactedSet::new(), 3).unwrap();
            assert!(v.certified);
            assert!(v.per_challenger.iter().all(|c| c.gammas.total() == 0));
            assert!(certify_coarse(&pv(raw), &ImpactedSet::new(), 3).unwrap().certified);
        }
    }

    #[test]
    fn coarse_is_stricter_on_aligned_impacted_shards() {
        let p = pv(&[0, 0, 0, 1, 1]);
        let s = set(&[3, 4]);
        let coarse = certify_coarse(&p, &s, 2).unwrap();
        assert!(!coarse.certified);
        assert_eq!(coarse.per_challenger[0].margin, 1);
        assert!(certify_fine(&p, &s, 2).unwrap().certified);
        assert!(brute_force_consistent(&p, &s, 2).unwrap());

        assert!(certify_coarse(&pv(&[0, 0, 0, 0, 1]), &set(&[4]), 3).unwrap().certified);
    }

    #[test]
    fn brute_force_examples() {
        assert!(brute_force_consistent(&pv(&[0, 0, 0, 0, 1]), &set(&[4]), 3).unwrap());
        assert!(!brute_force_consistent(&pv(&[0, 0, 1]), &set(&[0]), 2).unwrap());
        assert!(brute_force_consistent(&pv(&[1, 0, 1]), &ImpactedSet::new(), 2).unwrap());
    }

    #[test]
    fn brute_force_enforces_cap() {
        let p = pv(&[0; 14]);
        let s: ImpactedSet = (0..13).map(crate::ensemble::ShardId).collect();
        assert_eq!(
            brute_force_consistent(&p, &s, 2).unwrap_err(),
            Error::Capacity {
                impacted: 13,
                cap: 12
            }
        );
        assert!(brute_force_consistent_capped(&p, &s, 2, 13).is_ok());
    }

    #[test]
    fn brute_force_all_shards_impacted() {
        // every label reachable, so never consistent with C >= 2
        assert!(!brute_force_consistent(&pv(&[0, 0, 0]), &set(&[0, 1, 2]), 2).unwrap());
    }

    #[test]
    fn max_margin_reading_is_unsound() {
        // winner 0 with counts [3, 2, 0]; shard 0 impacted (votes 0).
        // challenger 1: 2*1 + 0 = 2 > margin 1, but max margin is 3.
        let p = pv(&[0, 0, 0, 1, 1]);
        let s = set(&[0]);
        assert!(certify_fine_max_margin(&p, &s, 3).unwrap());
        assert!(!certify_fine(&p, &s, 3).unwrap().certified);
        assert!(!brute_force_consistent(&p, &s, 3).unwrap());
    }
}
