//! Exact and Monte Carlo audits of the ε-label-DP guarantee.
//!
//! The candidate set depends only on the student's prediction, never on the
//! private label, so both audits hold it fixed and compare output
//! distributions across every pair of private labels.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

use crate::error::{Error, Result};
use crate::label_privacy::{
    candidate_distribution, select_candidates, sample_candidate, CandidateSet, PrivacyBudget,
    ThresholdRule,
};
use crate::seed;
use crate::tensor::ProbVector;

/// Multiplicative slack absorbing floating-point rounding in ratio checks.
pub const RATIO_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Private label inside the candidate set: randomized response over it.
    InCandidates,
    /// Private label outside: uniform over the candidate set.
    Uniform,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::InCandidates => "in-set",
            Branch::Uniform => "uniform",
        })
    }
}

/// Where the largest probability ratio occurred.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Witness {
    pub branches: (Branch, Branch),
    pub label: usize,
    pub other_label: usize,
    pub outcome: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub epsilon: f64,
    pub candidate_size: usize,
    pub num_classes: usize,
    /// `max P(ℓ|y) / P(ℓ|y′)` over labels and outcomes.
    pub max_ratio: f64,
    pub attained_at: Option<Witness>,
    /// `ln(max_ratio)`.
    pub epsilon_effective: f64,
    pub pass: bool,
}

impl AuditReport {
    fn finish(
        epsilon: f64,
        candidate_size: usize,
        num_classes: usize,
        max_ratio: f64,
        attained_at: Option<Witness>,
        pass: bool,
    ) -> Self {
        Self {
            epsilon,
            candidate_size,
            num_classes,
            max_ratio,
            attained_at,
            epsilon_effective: max_ratio.ln(),
            pass,
        }
    }

    /// True when the bound is attained: `max_ratio ≥ e^ε·(1 − slack)`.
    pub fn is_tight(&self) -> bool {
        self.max_ratio >= self.epsilon.exp() * (1.0 - RATIO_SLACK)
    }
}

fn within_bound(ratio: f64, epsilon: f64) -> bool {
    ratio <= epsilon.exp() * (1.0 + RATIO_SLACK)
}

/// Brute-force check of the likelihood-ratio bound for a fixed candidate set
/// of size `k` among `num_classes` classes. Runs in `O(K²·k)`.
pub fn exact_audit(k: usize, num_classes: usize, eps: PrivacyBudget) -> Result<AuditReport> {
    if k < 2 || k > num_classes {
        return Err(Error::InvalidArgument(format!(
            "candidate size must satisfy 2 <= k <= K, got k = {k}, K = {num_classes}"
        )));
    }
    let candidates = CandidateSet::new((0..k).collect(), num_classes)?;
    let tables: Vec<Vec<f64>> = (0..num_classes)
        .map(|y| candidate_distribution(&candidates, y, num_classes, eps))
        .collect();
    let branch = |y: usize| {
        if candidates.contains(y) {
            Branch::InCandidates
        } else {
            Branch::Uniform
        }
    };

    let mut max_ratio = 0.0f64;
    let mut witness = None;
    for (y, ty) in tables.iter().enumerate() {
        for (y2, ty2) in tables.iter().enumerate() {
            for &l in candidates.indices() {
                let ratio = match (ty[l], ty2[l]) {
                    (a, b) if b > 0.0 => a / b,
                    (a, _) if a > 0.0 => f64::INFINITY,
                    _ => continue,
                };
                if ratio > max_ratio {
                    max_ratio = ratio;
                    witness = Some(Witness {
                        branches: (branch(y), branch(y2)),
                        label: y,
                        other_label: y2,
                        outcome: l,
                    });
                }
            }
        }
    }
    let pass = within_bound(max_ratio, eps.epsilon());
    Ok(AuditReport::finish(
        eps.epsilon(),
        k,
        num_classes,
        max_ratio,
        witness,
        pass,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatisticalOptions {
    /// Draws per private label; at least 10,000.
    pub trials: usize,
    /// Family-wise one-sided false-alarm level (3σ ≈ 0.00135), split evenly
    /// across all tested (label, label′, outcome) cells.
    pub family_alpha: f64,
    pub seed: u64,
}

impl StatisticalOptions {
    pub const MIN_TRIALS: usize = 10_000;

    pub fn new(trials: usize, seed: u64) -> Self {
        Self {
            trials,
            family_alpha: 0.00135,
            seed,
        }
    }
}

/// Output histograms, one row per private label.
#[derive(Debug, Clone, PartialEq)]
pub struct Histograms {
    pub trials: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Histograms {
    pub fn frequencies(&self, label: usize) -> Vec<f64> {
        self.counts[label]
            .iter()
            .map(|&c| c as f64 / self.trials as f64)
            .collect()
    }
}

/// Runs `mechanism(label, rng)` `trials` times for every label in `0..num_classes`.
pub fn sample_histograms<M>(
    mut mechanism: M,
    num_classes: usize,
    trials: usize,
    seed: u64,
) -> Histograms
where
    M: FnMut(usize, &mut ChaCha8Rng) -> usize,
{
    let counts = (0..num_classes)
        .map(|y| {
            let mut rng = seed::rng(seed, seed::tag::LABEL, y as u64, u64::MAX);
            let mut row = vec![0u64; num_classes];
            for _ in 0..trials {
                row[mechanism(y, &mut rng)] += 1;
            }
            row
        })
        .collect();
    Histograms { trials, counts }
}

/// Monte Carlo audit of an arbitrary label mechanism.
///
/// A cell `(y, y′, ℓ)` is flagged when the lower Wilson score bound of
/// `p(ℓ|y)` exceeds `e^ε` times the upper bound of `p(ℓ|y′)`, both at `z`
/// chosen so the family-wise false-alarm rate over all tested cells is
/// `options.family_alpha`. Score bounds stay honest for empty and nearly
/// empty cells, so at large ε a broken mechanism needs more trials
/// (roughly `e^ε·z²`) before it can be told apart. The report's `max_ratio` is the
/// largest empirical frequency ratio.
pub fn statistical_audit<M>(
    mechanism: M,
    num_classes: usize,
    eps: PrivacyBudget,
    options: &StatisticalOptions,
) -> Result<AuditReport>
where
    M: FnMut(usize, &mut ChaCha8Rng) -> usize,
{
    if options.trials < StatisticalOptions::MIN_TRIALS {
        return Err(Error::InvalidArgument(format!(
            "statistical audit needs at least {} trials, got {}",
            StatisticalOptions::MIN_TRIALS,
            options.trials
        )));
    }
    let hist = sample_histograms(mechanism, num_classes, options.trials, options.seed);
    Ok(audit_histograms(&hist, eps, options.family_alpha, None))
}

fn audit_histograms(
    hist: &Histograms,
    eps: PrivacyBudget,
    family_alpha: f64,
    candidate_size: Option<usize>,
) -> AuditReport {
    let num_classes = hist.counts.len();
    let n = hist.trials as f64;
    let bound = eps.epsilon().exp();
    let freqs: Vec<Vec<f64>> = (0..num_classes).map(|y| hist.frequencies(y)).collect();
    let cells = (num_classes * num_classes.saturating_sub(1) * num_classes).max(1);
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - family_alpha / cells as f64);

    let mut max_ratio = 0.0f64;
    let mut witness = None;
    let mut violation = false;
    for y in 0..num_classes {
        for y2 in 0..num_classes {
            for l in 0..num_classes {
                let (a, b) = (freqs[y][l], freqs[y2][l]);
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                let ratio = if b > 0.0 { a / b } else { f64::INFINITY };
                if ratio > max_ratio {
                    max_ratio = ratio;
                    witness = Some(Witness {
                        branches: (Branch::InCandidates, Branch::InCandidates),
                        label: y,
                        other_label: y2,
                        outcome: l,
                    });
                }
                if y != y2 && wilson_bounds(a, n, z).0 > bound * wilson_bounds(b, n, z).1 {
                    violation = true;
                }
            }
        }
    }
    AuditReport::finish(
        eps.epsilon(),
        candidate_size.unwrap_or(num_classes),
        num_classes,
        max_ratio,
        witness,
        !violation,
    )
}

/// Monte Carlo audit of selective randomized response with the candidate set
/// fixed by the student prediction `y_s`; private labels range over all classes.
pub fn statistical_audit_selective(
    y_s: &ProbVector,
    rule: &ThresholdRule,
    eps: PrivacyBudget,
    options: &StatisticalOptions,
) -> Result<AuditReport> {
    let candidates = select_candidates(y_s, rule);
    let k = candidates.k();
    let mut report = statistical_audit(
        |y, rng| sample_candidate(&candidates, y, eps, rng),
        rule.num_classes,
        eps,
        options,
    )?;
    report.candidate_size = k;
    if let Some(w) = &mut report.attained_at {
        let branch = |y| {
            if candidates.contains(y) {
                Branch::InCandidates
            } else {
                Branch::Uniform
            }
        };
        w.branches = (branch(w.label), branch(w.other_label));
    }
    Ok(report)
}

/// Wilson score interval `(lower, upper)` for a binomial proportion.
pub fn wilson_bounds(freq: f64, trials: f64, z: f64) -> (f64, f64) {
    let z2 = z * z;
    let denom = 1.0 + z2 / trials;
    let centre = (freq + z2 / (2.0 * trials)) / denom;
    let half = z * (freq * (1.0 - freq) / trials + z2 / (4.0 * trials * trials)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Two-sided exact binomial p-value of observing `count` in `trials` draws
/// of an outcome with probability `p` (doubled smaller tail, capped at 1).
pub fn binomial_two_sided_p(count: u64, trials: u64, p: f64) -> f64 {
    if p <= 0.0 {
        return if count == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if count == trials { 1.0 } else { 0.0 };
    }
    let dist = Binomial::new(p, trials).expect("valid binomial");
    let lower = dist.cdf(count);
    let upper = if count == 0 { 1.0 } else { dist.sf(count - 1) };
    (2.0 * lower.min(upper)).min(1.0)
}

/// Smallest exact two-sided p-value over the cells of one histogram row
/// against its closed-form table, and the number of cells tested (outcomes
/// with nonzero probability, plus any impossible outcome that was drawn).
pub fn min_cell_pvalue(table: &[f64], counts: &[u64], trials: usize) -> (f64, usize) {
    let mut worst = 1.0f64;
    let mut cells = 0;
    for (&p, &c) in table.iter().zip(counts) {
        if p == 0.0 && c == 0 {
            continue;
        }
        cells += 1;
        worst = worst.min(binomial_two_sided_p(c, trials as u64, p));
    }
    (worst, cells)
}

/// Two-sided tail mass beyond 3σ of a normal, `2·(1 − Φ(3))`.
pub fn three_sigma_level() -> f64 {
    2.0 * (1.0 - Normal::new(0.0, 1.0).expect("standard normal").cdf(3.0))
}

/// Per-cell check that an empirical histogram row matches an exact table:
/// every cell within `z` binomial standard errors, and zero-probability
/// outcomes never observed. Returns the largest |z-score| seen.
pub fn max_cell_zscore(table: &[f64], counts: &[u64], trials: usize) -> f64 {
    let n = trials as f64;
    let mut worst = 0.0f64;
    for (&p, &c) in table.iter().zip(counts) {
        let freq = c as f64 / n;
        if p == 0.0 {
            if c > 0 {
                return f64::INFINITY;
            }
            continue;
        }
        let sd = (p * (1.0 - p) / n).sqrt();
        let z = if sd > 0.0 {
            (freq - p).abs() / sd
        } else if freq == p {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eps(e: f64) -> PrivacyBudget {
        PrivacyBudget::new(e).unwrap()
    }

    #[test]
    fn zero_epsilon_ratio_is_one() {
        for k in 2..=10 {
            let r = exact_audit(k, 10, eps(0.0)).unwrap();
            assert_eq!(r.max_ratio, 1.0);
            assert!(r.pass);
        }
    }

    #[test]
    fn k_two_eps_one_attains_e_within_set() {
        let r = exact_audit(2, 10, eps(1.0)).unwrap();
        assert!((r.max_ratio - std::f64::consts::E).abs() < 1e-12);
        let w = r.attained_at.unwrap();
        assert_eq!(w.branches, (Branch::InCandidates, Branch::InCandidates));
        assert_eq!(w.outcome, w.label);
        assert!(r.pass && r.is_tight());
    }

    #[test]
    fn rejects_small_candidate_sets() {
        assert!(exact_audit(1, 10, eps(1.0)).is_err());
        assert!(exact_audit(11, 10, eps(1.0)).is_err());
    }

    #[test]
    fn zscore_flags_impossible_outcome() {
        assert_eq!(max_cell_zscore(&[0.5, 0.5, 0.0], &[5, 4, 1], 10), f64::INFINITY);
        assert_eq!(max_cell_zscore(&[0.5, 0.5], &[50, 50], 100), 0.0);
    }

    #[test]
    fn wilson_bounds_cover_empty_cells() {
        let (lo, hi) = wilson_bounds(0.0, 10_000.0, 3.0);
        assert_eq!(lo, 0.0);
        assert!((hi - 9.0 / 10_009.0).abs() < 1e-12);
        let (lo, hi) = wilson_bounds(0.5, 100.0, 2.0);
        assert!(lo < 0.5 && hi > 0.5 && (0.5 - lo - (hi - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn binomial_p_values() {
        assert_eq!(binomial_two_sided_p(5, 10, 0.5), 1.0);
        // P(X = 0) for Bin(10, 1/2) is 2^-10; doubled.
        assert!((binomial_two_sided_p(0, 10, 0.5) - 2.0 / 1024.0).abs() < 1e-12);
        assert_eq!(binomial_two_sided_p(1, 10, 0.0), 0.0);
        assert!((three_sigma_level() - 0.0026998).abs() < 1e-6);
    }

    #[test]
    fn too_few_trials_rejected() {
        let r = statistical_audit(|y, _| y, 3, eps(1.0), &StatisticalOptions::new(100, 0));
        assert!(r.is_err());
    }
}
