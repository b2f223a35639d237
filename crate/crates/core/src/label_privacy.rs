//! ε-label-DP randomized response mechanisms.
//!
//! [`classic_rr`] releases the true class with probability `e^ε/(e^ε+K−1)`
//! and any other class with probability `1/(e^ε+K−1)`.
//!
//! [`selective_rr`] first narrows the output alphabet to a candidate set `I`
//! chosen from the *student's* prediction (classes whose probability exceeds a
//! threshold, padded to the top two). The candidate set never depends on the
//! private label. If the teacher's class `c` is in `I`, randomized response
//! runs over `I`; otherwise a uniformly random member of `I` is released.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ProbVector;

/// A privacy budget `ε > 0`.
///
/// `ε = 0` is accepted as the degenerate fully-random mechanism.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PrivacyBudget(f64);

impl PrivacyBudget {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "privacy budget must be finite and nonnegative, got {epsilon}"
            )));
        }
        Ok(Self(epsilon))
    }

    pub fn epsilon(self) -> f64 {
        self.0
    }

    /// `e^ε / (e^ε + k − 1)`, written to stay finite for large ε.
    pub fn keep_probability(self, k: usize) -> f64 {
        1.0 / (1.0 + (k as f64 - 1.0) * (-self.0).exp())
    }

    /// `1 / (e^ε + k − 1)`.
    pub fn flip_probability(self, k: usize) -> f64 {
        let e = (-self.0).exp();
        e / (1.0 + (k as f64 - 1.0) * e)
    }
}

impl fmt::Display for PrivacyBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ε={}", self.0)
    }
}

/// Threshold rule for the candidate set; `t = 1/(2K)` by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRule {
    pub num_classes: usize,
    pub threshold: f32,
}

impl ThresholdRule {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            threshold: 1.0 / (2.0 * num_classes as f32),
        }
    }

    pub fn with_threshold(num_classes: usize, threshold: f32) -> Self {
        Self {
            num_classes,
            threshold,
        }
    }
}

/// Strictly increasing class indices, at least two of them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CandidateSet(Vec<usize>);

impl CandidateSet {
    pub fn new(mut indices: Vec<usize>, num_classes: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.len() < 2 {
            return Err(Error::InvalidArgument(
                "candidate set needs at least two classes".into(),
            ));
        }
        if indices.last().is_some_and(|&i| i >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "candidate index out of range for {num_classes} classes"
            )));
        }
        Ok(Self(indices))
    }

    /// Every class `0..num_classes`.
    pub fn all(num_classes: usize) -> Result<Self> {
        Self::new((0..num_classes).collect(), num_classes)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.binary_search(&class).is_ok()
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "randomized response needs at least 2 classes, got {num_classes}"
        )));
    }
    Ok(())
}

/// Exact output distribution of [`classic_rr`].
pub fn classic_rr_distribution(
    true_label: usize,
    num_classes: usize,
    eps: PrivacyBudget,
) -> Result<Vec<f64>> {
    check_classes(num_classes)?;
    if true_label >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "label {true_label} out of range for {num_classes} classes"
        )));
    }
    let mut table = vec![eps.flip_probability(num_classes); num_classes];
    table[true_label] = eps.keep_probability(num_classes);
    Ok(table)
}

/// Randomized response over all `num_classes` labels.
pub fn classic_rr<R: Rng + ?Sized>(
    true_label: usize,
    num_classes: usize,
    eps: PrivacyBudget,
    rng: &mut R,
) -> Result<usize> {
    check_classes(num_classes)?;
    if true_label >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "label {true_label} out of range for {num_classes} classes"
        )));
    }
    if rng.random::<f64>() < eps.keep_probability(num_classes) {
        return Ok(true_label);
    }
    // Uniform over the other K−1 labels.
    let j = rng.random_range(0..num_classes - 1);
    Ok(if j >= true_label { j + 1 } else { j })
}

/// Classes with student probability strictly above the threshold; if fewer
/// than two qualify, the two most probable classes (ties to lower index).
pub fn select_candidates(y_s: &ProbVector, rule: &ThresholdRule) -> CandidateSet {
    let probs = y_s.as_slice();
    let passing: Vec<usize> = (0..probs.len())
        .filter(|&i| probs[i] > rule.threshold)
        .collect();
    if passing.len() >= 2 {
        return CandidateSet(passing);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Stable sort keeps lower indices first among equal probabilities.
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut top = vec![order[0], order[1]];
    top.sort_unstable();
    CandidateSet(top)
}

/// Exact distribution of the mechanism over candidate set `candidates` when
/// the teacher's class is `teacher_class`.
pub fn candidate_distribution(
    candidates: &CandidateSet,
    teacher_class: usize,
    num_classes: usize,
    eps: PrivacyBudget,
) -> Vec<f64> {
    let k = candidates.k();
    let mut table = vec![0.0; num_classes];
    if candidates.contains(teacher_class) {
        let other = eps.flip_probability(k);
        for &j in candidates.indices() {
            table[j] = other;
        }
        table[teacher_class] = eps.keep_probability(k);
    } else {
        let u = 1.0 / k as f64;
        for &j in candidates.indices() {
            table[j] = u;
        }
    }
    table
}

fn check_pair(y_s: &ProbVector, y_t: &ProbVector, rule: &ThresholdRule) -> Result<()> {
    if y_s.len() != y_t.len() || y_s.len() != rule.num_classes {
        return Err(Error::InvalidArgument(format!(
            "class count mismatch: y_s {}, y_t {}, rule {}",
            y_s.len(),
            y_t.len(),
            rule.num_classes
        )));
    }
    check_classes(rule.num_classes)
}

/// Exact probability of each one-hot outcome of [`selective_rr`].
pub fn mechanism_distribution(
    y_s: &ProbVector,
    y_t: &ProbVector,
    rule: &ThresholdRule,
    eps: PrivacyBudget,
) -> Result<Vec<f64>> {
    check_pair(y_s, y_t, rule)?;
    let candidates = select_candidates(y_s, rule);
    Ok(candidate_distribution(
        &candidates,
        y_t.argmax(),
        rule.num_classes,
        eps,
    ))
}

/// Draws one class from the mechanism for a precomputed candidate set.
pub fn sample_candidate<R: Rng + ?Sized>(
    candidates: &CandidateSet,
    teacher_class: usize,
    eps: PrivacyBudget,
    rng: &mut R,
) -> usize {
    let idx = candidates.indices();
    let k = idx.len();
    match idx.binary_search(&teacher_class) {
        Ok(pos) => {
            if rng.random::<f64>() < eps.keep_probability(k) {
                teacher_class
            } else {
                let j = rng.random_range(0..k - 1);
                idx[if j >= pos { j + 1 } else { j }]
            }
        }
        Err(_) => idx[rng.random_range(0..k)],
    }
}

/// Selective randomized response. Returns a one-hot vector over a member of
/// the candidate set derived from `y_s`.
pub fn selective_rr<R: Rng + ?Sized>(
    y_s: &ProbVector,
    y_t: &ProbVector,
    rule: &ThresholdRule,
    eps: PrivacyBudget,
    rng: &mut R,
) -> Result<ProbVector> {
    check_pair(y_s, y_t, rule)?;
    let candidates = select_candidates(y_s, rule);
    let class = sample_candidate(&candidates, y_t.argmax(), eps, rng);
    Ok(ProbVector::one_hot(class, rule.num_classes))
}
