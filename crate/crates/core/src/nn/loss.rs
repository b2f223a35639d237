//! Probability-space losses on [`ProbVector`]s.
//!
//! These are the reference definitions used for reporting and for checking
//! the differentiable graph ops. All logarithms see probabilities floored at
//! [`PROB_FLOOR`].

use crate::error::{Error, Result};
use crate::nn::graph::PROB_FLOOR;
use crate::tensor::{ProbVector, Tensor};

/// Row-wise softmax of a `[batch, K]` logit matrix.
pub fn softmax(logits: &Tensor) -> Vec<ProbVector> {
    let k = logits.cols();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = row.iter().map(|&z| ((z - max) as f64).exp()).collect();
            let total: f64 = exps.iter().sum();
            ProbVector::new(exps.iter().map(|e| (e / total) as f32).collect())
                .expect("softmax of finite logits is a distribution")
        })
        .collect()
}

/// `−Σ target·log(pred)` for a one-hot `target`.
pub fn cross_entropy(pred: &ProbVector, target: &ProbVector) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: pred {} vs target {}",
            pred.len(),
            target.len()
        )));
    }
    let class = target
        .hot_index()
        .ok_or_else(|| Error::InvalidArgument("cross entropy target is not one-hot".into()))?;
    let p = pred.as_slice()[class].clamp(PROB_FLOOR, 1.0) as f64;
    Ok(-p.ln())
}

fn clamped(p: &ProbVector) -> Vec<f64> {
    let raw: Vec<f64> = p
        .as_slice()
        .iter()
        .map(|&v| v.clamp(PROB_FLOOR, 1.0) as f64)
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// `KL(p ‖ q) = Σ p·log(p/q)` after flooring both sides and renormalizing.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let (p, q) = (clamped(p), clamped(q));
    let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    // Rounding can leave a tiny negative residue when p == q.
    Ok(kl.max(0.0))
}
