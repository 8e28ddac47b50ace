//! Teacher-confidence estimation and gate construction.
//!
//! Confidence is derived from the Shannon entropy of a teacher's next-token
//! distribution: a peaked distribution means the teacher is sure of itself,
//! a flat one means it is guessing. Two formulas are provided, `exp(-H)` and
//! the bounded `1 - H/ln V`; the latter is the default elsewhere because it
//! is comparable across vocabulary sizes. Gates turn confidences into
//! multiplicative weights under four strategies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

/// Tolerance for the sum-to-one check on probability vectors.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Floor applied inside logarithms so exact zeros do not produce -inf.
pub const ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ConfidenceError {
    #[error("probability vector is empty")]
    Empty,
    #[error("probability entry {index} is negative: {value}")]
    NegativeEntry { index: usize, value: f64 },
    #[error("probability entries sum to {sum}, not 1 within {PROB_SUM_TOLERANCE}")]
    NotNormalized { sum: f64 },
    #[error("normalized confidence requires vocabulary size >= 2, got {0}")]
    DegenerateVocab(usize),
    #[error("vocabulary size {expected} does not match distribution length {actual}")]
    VocabMismatch { expected: usize, actual: usize },
    #[error("token confidences ({conf}) and padding mask ({mask}) differ in length")]
    MaskLengthMismatch { conf: usize, mask: usize },
    #[error("sequence has no non-padding steps")]
    AllPadding,
    #[error("confidence vector is empty")]
    EmptyConfidences,
    #[error("confidence entry {index} is outside [0,1]: {value}")]
    ConfidenceOutOfRange { index: usize, value: f64 },
    #[error("unknown confidence formula '{0}'")]
    UnknownFormula(String),
    #[error("unknown gating strategy '{0}'")]
    UnknownStrategy(String),
}

/// A validated probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityDistribution<R: Real> {
    probs: Vec<R>,
}

impl<R: Real> ProbabilityDistribution<R> {
    /// Validates non-negativity and normalization within [`PROB_SUM_TOLERANCE`].
    pub fn new(probs: Vec<R>) -> Result<Self, ConfidenceError> {
        if probs.is_empty() {
            return Err(ConfidenceError::Empty);
        }
        for (index, &p) in probs.iter().enumerate() {
            if p < R::zero() || !p.is_finite() {
                return Err(ConfidenceError::NegativeEntry {
                    index,
                    value: p.f64(),
                });
            }
        }
        let sum: R = probs.iter().copied().sum();
        if (sum.f64() - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(ConfidenceError::NotNormalized { sum: sum.f64() });
        }
        Ok(ProbabilityDistribution { probs })
    }

    /// Builds a distribution that puts `peak_prob` on `peak` and spreads the
    /// remainder uniformly over the other entries.
    pub fn peaked(len: usize, peak: usize, peak_prob: R) -> Result<Self, ConfidenceError> {
        assert!(peak < len, "peak index out of range");
        let rest = if len > 1 {
            (R::one() - peak_prob) / R::of((len - 1) as f64)
        } else {
            R::zero()
        };
        let mut probs = vec![rest; len];
        probs[peak] = if len > 1 { peak_prob } else { R::one() };
        Self::new(probs)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty vectors
    }

    pub fn probs(&self) -> &[R] {
        &self.probs
    }
}

/// Shannon entropy in nats: `-sum_i p_i ln p_i` with `0 ln 0 = 0`.
///
/// Exact zeros are handled by flooring the argument of the logarithm at
/// [`ENTROPY_FLOOR`]; the multiplication by `p_i = 0` then kills the term.
pub fn shannon_entropy<R: Real>(p: &ProbabilityDistribution<R>) -> R {
    let floor = R::of(ENTROPY_FLOOR);
    let h = -p
        .probs()
        .iter()
        .map(|&pi| pi * pi.max(floor).ln())
        .sum::<R>();
    h.max(R::zero())
}

/// Confidence as `exp(-H(p))`, in (0, 1]; equals 1 exactly on one-hot inputs.
pub fn confidence_exp<R: Real>(p: &ProbabilityDistribution<R>) -> R {
    (-shannon_entropy(p)).exp()
}

/// Confidence as `1 - H(p)/ln V`, in [0, 1]; 0 on uniform, 1 on one-hot.
///
/// `vocab_size` must match the distribution length and be at least 2
/// (`ln 1 = 0` would divide by zero).
pub fn confidence_normalized<R: Real>(
    p: &ProbabilityDistribution<R>,
    vocab_size: usize,
) -> Result<R, ConfidenceError> {
    if vocab_size < 2 {
        return Err(ConfidenceError::DegenerateVocab(vocab_size));
    }
    if p.len() != vocab_size {
        return Err(ConfidenceError::VocabMismatch {
            expected: vocab_size,
            actual: p.len(),
        });
    }
    let h = shannon_entropy(p);
    let c = R::one() - h / R::of((vocab_size as f64).ln());
    Ok(c.max(R::zero()).min(R::one()))
}

/// Which entropy-to-confidence mapping to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceFormula {
    ExpNegEntropy,
    NormalizedEntropy,
}

impl ConfidenceFormula {
    pub fn parse(s: &str) -> Result<Self, ConfidenceError> {
        match s {
            "exp_neg_entropy" => Ok(ConfidenceFormula::ExpNegEntropy),
            "normalized_entropy" => Ok(ConfidenceFormula::NormalizedEntropy),
            other => Err(ConfidenceError::UnknownFormula(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConfidenceFormula::ExpNegEntropy => "exp_neg_entropy",
            ConfidenceFormula::NormalizedEntropy => "normalized_entropy",
        }
    }
}

/// Applies the chosen formula to one distribution.
pub fn confidence_of<R: Real>(
    p: &ProbabilityDistribution<R>,
    formula: ConfidenceFormula,
) -> Result<R, ConfidenceError> {
    match formula {
        ConfidenceFormula::ExpNegEntropy => Ok(confidence_exp(p)),
        ConfidenceFormula::NormalizedEntropy => confidence_normalized(p, p.len()),
    }
}

/// Arithmetic mean of token confidences over non-padding steps.
pub fn sequence_confidence<R: Real>(
    token_conf: &[R],
    pad_mask: &[bool],
) -> Result<R, ConfidenceError> {
    if token_conf.len() != pad_mask.len() {
        return Err(ConfidenceError::MaskLengthMismatch {
            conf: token_conf.len(),
            mask: pad_mask.len(),
        });
    }
    for (index, &c) in token_conf.iter().enumerate() {
        if !(R::zero()..=R::one()).contains(&c) {
            return Err(ConfidenceError::ConfidenceOutOfRange {
                index,
                value: c.f64(),
            });
        }
    }
    let mut sum = R::zero();
    let mut n = 0usize;
    for (&c, &pad) in token_conf.iter().zip(pad_mask) {
        if !pad {
            sum += c;
            n += 1;
        }
    }
    if n == 0 {
        return Err(ConfidenceError::AllPadding);
    }
    Ok(sum / R::of(n as f64))
}

/// Per-step and sequence-level confidence for one decoded sequence.
#[derive(Debug, Clone)]
pub struct ConfidenceProfile<R: Real> {
    pub token_conf: Vec<R>,
    pub seq_conf: R,
    pub formula: ConfidenceFormula,
}

impl<R: Real> ConfidenceProfile<R> {
    /// Computes token confidences for each step's distribution and aggregates
    /// them into a sequence score over non-padding steps.
    pub fn from_distributions(
        dists: &[ProbabilityDistribution<R>],
        pad_mask: &[bool],
        formula: ConfidenceFormula,
    ) -> Result<Self, ConfidenceError> {
        let token_conf: Vec<R> = dists
            .iter()
            .map(|d| confidence_of(d, formula))
            .collect::<Result<_, _>>()?;
        let seq_conf = sequence_confidence(&token_conf, pad_mask)?;
        Ok(ConfidenceProfile {
            token_conf,
            seq_conf,
            formula,
        })
    }
}

/// How confidences become multiplicative gate weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingStrategy {
    /// Every gate open; distillation is ungated.
    None,
    /// Hard indicator against a fixed threshold tau.
    FixedThreshold,
    /// Smooth weight `sigmoid(slope * (c - tau))`.
    Sigmoid,
    /// Hard indicator against the batch mean confidence.
    BatchRelative,
}

impl GatingStrategy {
    pub fn parse(s: &str) -> Result<Self, ConfidenceError> {
        match s {
            "none" => Ok(GatingStrategy::None),
            "fixed_threshold" => Ok(GatingStrategy::FixedThreshold),
            "sigmoid" => Ok(GatingStrategy::Sigmoid),
            "batch_relative" => Ok(GatingStrategy::BatchRelative),
            other => Err(ConfidenceError::UnknownStrategy(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GatingStrategy::None => "none",
            GatingStrategy::FixedThreshold => "fixed_threshold",
            GatingStrategy::Sigmoid => "sigmoid",
            GatingStrategy::BatchRelative => "batch_relative",
        }
    }
}

/// Gate weights for a batch of examples (or a set of aligned layer pairs),
/// together with the strategy and parameters that produced them.
#[derive(Debug, Clone)]
pub struct GateVector<R: Real> {
    pub weights: Vec<R>,
    pub strategy: GatingStrategy,
    pub threshold_tau: R,
    pub sigmoid_slope: R,
}

impl<R: Real> GateVector<R> {
    /// Mean gate weight, the "gate open fraction" observable.
    pub fn open_fraction(&self) -> R {
        let sum: R = self.weights.iter().copied().sum();
        sum / R::of(self.weights.len() as f64)
    }
}

/// Builds gate weights from confidences under the given strategy.
///
/// Batch-relative comparison is strict: a confidence exactly equal to the
/// batch mean closes its gate, so a batch of identical confidences closes
/// every gate and a batch of size one closes its own.
pub fn make_gates<R: Real>(
    confidences: &[R],
    strategy: GatingStrategy,
    tau: R,
    slope: R,
) -> Result<GateVector<R>, ConfidenceError> {
    make_gates_with_ties(confidences, strategy, tau, slope, false)
}

/// As [`make_gates`], with the tie rule configurable: `ties_open = true`
/// opens batch-relative gates at confidence exactly equal to the mean.
pub fn make_gates_with_ties<R: Real>(
    confidences: &[R],
    strategy: GatingStrategy,
    tau: R,
    slope: R,
    ties_open: bool,
) -> Result<GateVector<R>, ConfidenceError> {
    if confidences.is_empty() {
        return Err(ConfidenceError::EmptyConfidences);
    }
    for (index, &c) in confidences.iter().enumerate() {
        if !(R::zero()..=R::one()).contains(&c) {
            return Err(ConfidenceError::ConfidenceOutOfRange {
                index,
                value: c.f64(),
            });
        }
    }
    let indicator = |open: bool| if open { R::one() } else { R::zero() };
    let weights = match strategy {
        GatingStrategy::None => vec![R::one(); confidences.len()],
        GatingStrategy::FixedThreshold => confidences.iter().map(|&c| indicator(c > tau)).collect(),
        GatingStrategy::Sigmoid => confidences
            .iter()
            .map(|&c| R::one() / (R::one() + (-slope * (c - tau)).exp()))
            .collect(),
        GatingStrategy::BatchRelative => {
            let mean =
                confidences.iter().copied().sum::<R>() / R::of(confidences.len() as f64);
            confidences
                .iter()
                .map(|&c| indicator(c > mean || (ties_open && c == mean)))
                .collect()
        }
    };
    Ok(GateVector {
        weights,
        strategy,
        threshold_tau: tau,
        sigmoid_slope: slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> ProbabilityDistribution<f64> {
        ProbabilityDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn entropy_known_values() {
        assert_relative_eq!(
            shannon_entropy(&dist(&[0.25; 4])),
            4.0f64.ln(),
            max_relative = 1e-12
        );
        assert_eq!(shannon_entropy(&dist(&[1.0, 0.0, 0.0])), 0.0);
        // Term-by-term oracle value for (0.7, 0.2, 0.1), frozen at high precision.
        assert_relative_eq!(
            shannon_entropy(&dist(&[0.7, 0.2, 0.1])),
            0.8018185525433373,
            max_relative = 1e-12
        );
    }

    #[test]
    fn confidence_exp_known_values() {
        assert_eq!(confidence_exp(&dist(&[0.0, 1.0])), 1.0);
        assert_relative_eq!(confidence_exp(&dist(&[0.5, 0.5])), 0.5, max_relative = 1e-12);
        assert_relative_eq!(
            confidence_exp(&dist(&[0.7, 0.2, 0.1])),
            0.4485125783319456,
            max_relative = 1e-12
        );
    }

    #[test]
    fn confidence_normalized_known_values() {
        let uniform = dist(&[0.125; 8]);
        assert!(confidence_normalized(&uniform, 8).unwrap().abs() < 1e-12);
        let onehot = dist(&[0.0, 0.0, 1.0]);
        assert_eq!(confidence_normalized(&onehot, 3).unwrap(), 1.0);
        assert_relative_eq!(
            confidence_normalized(&dist(&[0.7, 0.2, 0.1]), 3).unwrap(),
            0.2701533008379025,
            max_relative = 1e-12
        );
    }

    #[test]
    fn validation_errors() {
        assert_eq!(
            ProbabilityDistribution::<f64>::new(vec![]).unwrap_err(),
            ConfidenceError::Empty
        );
        assert!(matches!(
            ProbabilityDistribution::new(vec![0.5, -0.1, 0.6]).unwrap_err(),
            ConfidenceError::NegativeEntry { index: 1, .. }
        ));
        assert!(matches!(
            ProbabilityDistribution::new(vec![0.5, 0.4]).unwrap_err(),
            ConfidenceError::NotNormalized { .. }
        ));
        assert_eq!(
            confidence_normalized(&dist(&[1.0]), 1).unwrap_err(),
            ConfidenceError::DegenerateVocab(1)
        );
        assert!(matches!(
            confidence_normalized(&dist(&[0.5, 0.5]), 3).unwrap_err(),
            ConfidenceError::VocabMismatch { expected: 3, actual: 2 }
        ));
    }

    #[test]
    fn sequence_confidence_rules() {
        assert_relative_eq!(
            sequence_confidence(&[1.0, 0.5, 0.0], &[false, false, false]).unwrap(),
            0.5
        );
        assert_relative_eq!(sequence_confidence(&[0.8], &[false]).unwrap(), 0.8);
        assert_relative_eq!(
            sequence_confidence(&[0.9, 0.1], &[false, true]).unwrap(),
            0.9
        );
        assert_eq!(
            sequence_confidence(&[0.9, 0.1], &[true, true]).unwrap_err(),
            ConfidenceError::AllPadding
        );
        assert!(matches!(
            sequence_confidence(&[0.5], &[false, false]).unwrap_err(),
            ConfidenceError::MaskLengthMismatch { .. }
        ));
    }

    #[test]
    fn gates_per_strategy() {
        let g = make_gates(&[0.2, 0.8], GatingStrategy::BatchRelative, 0.5, 10.0).unwrap();
        assert_eq!(g.weights, vec![0.0, 1.0]);

        // Strict inequality: identical confidences all tie with the mean.
        let g = make_gates(&[0.5, 0.5, 0.5], GatingStrategy::BatchRelative, 0.5, 10.0).unwrap();
        assert_eq!(g.weights, vec![0.0, 0.0, 0.0]);
        let g =
            make_gates_with_ties(&[0.5, 0.5, 0.5], GatingStrategy::BatchRelative, 0.5, 10.0, true)
                .unwrap();
        assert_eq!(g.weights, vec![1.0, 1.0, 1.0]);

        let g = make_gates(&[0.3, 0.7], GatingStrategy::FixedThreshold, 0.5, 10.0).unwrap();
        assert_eq!(g.weights, vec![0.0, 1.0]);

        let g = make_gates(&[0.1, 0.9], GatingStrategy::None, 0.5, 10.0).unwrap();
        assert_eq!(g.weights, vec![1.0, 1.0]);

        let g = make_gates(&[0.5], GatingStrategy::Sigmoid, 0.5, 10.0).unwrap();
        assert_relative_eq!(g.weights[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(g.open_fraction(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn single_example_batch_relative_closes_its_own_gate() {
        let g = make_gates(&[0.9], GatingStrategy::BatchRelative, 0.5, 10.0).unwrap();
        assert_eq!(g.weights, vec![0.0]);
    }

    #[test]
    fn formula_and_strategy_parsing() {
        assert_eq!(
            ConfidenceFormula::parse("exp_neg_entropy").unwrap(),
            ConfidenceFormula::ExpNegEntropy
        );
        assert_eq!(
            GatingStrategy::parse("batch_relative").unwrap(),
            GatingStrategy::BatchRelative
        );
        assert!(ConfidenceFormula::parse("nope").is_err());
        assert!(GatingStrategy::parse("nope").is_err());
        for s in [
            GatingStrategy::None,
            GatingStrategy::FixedThreshold,
            GatingStrategy::Sigmoid,
            GatingStrategy::BatchRelative,
        ] {
            assert_eq!(GatingStrategy::parse(s.name()).unwrap(), s);
        }
    }

    #[test]
    fn profile_from_distributions() {
        let dists = vec![dist(&[1.0, 0.0]), dist(&[0.5, 0.5])];
        let p = ConfidenceProfile::from_distributions(
            &dists,
            &[false, false],
            ConfidenceFormula::NormalizedEntropy,
        )
        .unwrap();
        assert_relative_eq!(p.token_conf[0], 1.0);
        assert!(p.token_conf[1].abs() < 1e-12);
        assert_relative_eq!(p.seq_conf, 0.5, max_relative = 1e-9);
    }

    proptest! {
        #[test]
        fn confidence_bounds_and_permutation_symmetry(
            raw in proptest::collection::vec(1e-6f64..1.0, 2..32),
            rot in 0usize..31,
        ) {
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let p = ProbabilityDistribution::new(probs.clone()).unwrap();
            let ce = confidence_exp(&p);
            let cn = confidence_normalized(&p, probs.len()).unwrap();
            prop_assert!(ce > 0.0 && ce <= 1.0);
            prop_assert!((0.0..=1.0).contains(&cn));

            let mut rotated = probs.clone();
            rotated.rotate_left(rot % probs.len());
            let q = ProbabilityDistribution::new(rotated).unwrap();
            prop_assert!((confidence_exp(&q) - ce).abs() < 1e-12);
            prop_assert!((confidence_normalized(&q, probs.len()).unwrap() - cn).abs() < 1e-12);
        }

        #[test]
        fn batch_relative_opens_strictly_above_mean(
            confs in proptest::collection::vec(0.0f64..=1.0, 1..40)
        ) {
            let g = make_gates(&confs, GatingStrategy::BatchRelative, 0.5, 10.0).unwrap();
            let mean: f64 = confs.iter().sum::<f64>() / confs.len() as f64;
            for (c, w) in confs.iter().zip(&g.weights) {
                prop_assert_eq!((*c > mean) as u8 as f64, *w);
            }
        }

        #[test]
        fn sigmoid_gates_monotone_in_confidence(
            mut confs in proptest::collection::vec(0.0f64..=1.0, 2..20)
        ) {
            confs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let g = make_gates(&confs, GatingStrategy::Sigmoid, 0.5, 8.0).unwrap();
            for w in g.weights.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            for w in &g.weights {
                prop_assert!(*w > 0.0 && *w < 1.0);
            }
        }
    }
}
