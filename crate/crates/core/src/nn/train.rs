//! Supervised training and evaluation helpers.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Reduction};
use crate::nn::model::{Mode, Model};
use crate::nn::optim::OptimizerState;
use crate::seed;
use crate::tensor::{argmax, Tensor};

/// Shuffled mini-batch index lists for one epoch. A trailing batch of a
/// single row is folded into the previous one (normalization needs two rows).
pub fn epoch_batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(shuffle_seed, seed::tag::TEACHER_SHUFFLE, epoch, 0);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Target for one optimization step.
pub enum Targets<'a> {
    Classes(&'a [usize]),
    /// Probability rows matched with KL divergence.
    Distributions(&'a Tensor),
}

/// One optimizer step on `batch`; returns the mean loss before the update.
pub fn train_step(
    model: &mut Model,
    batch: &Tensor,
    targets: Targets<'_>,
    optimizer: &mut OptimizerState,
) -> Result<f32> {
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let x = g.leaf(batch.clone());
    let fwd = model.forward_graph(&mut g, &params, x, Mode::Train)?;
    let loss = match targets {
        Targets::Classes(labels) => g.cross_entropy_logits(fwd.output, labels)?,
        Targets::Distributions(t) => g.kl_div_logits(fwd.output, t, Reduction::Mean)?,
    };
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = g.backward(loss)?;
    let grads: Vec<Tensor> = params.iter().map(|&v| grads.get(v)).collect();
    optimizer.step_model(model, &grads)?;
    model.absorb_stats(&fwd.batch_stats);
    Ok(value)
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

/// Cross-entropy training on integer labels. Returns the mean loss per epoch.
pub fn train_classifier(
    model: &mut Model,
    features: &Tensor,
    labels: &[usize],
    cfg: &ClassifierTraining,
    optimizer: &mut OptimizerState,
) -> Result<Vec<f32>> {
    if features.rows() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0f64;
        let batches = epoch_batches(labels.len(), cfg.batch_size, cfg.shuffle_seed, epoch as u64);
        for idx in &batches {
            let x = features.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            total += train_step(model, &x, Targets::Classes(&y), optimizer)? as f64;
        }
        history.push((total / batches.len() as f64) as f32);
    }
    Ok(history)
}

/// Argmax class per row (lowest index on ties), using running statistics.
pub fn predict_classes(model: &Model, features: &Tensor) -> Result<Vec<usize>> {
    let logits = model.predict(features)?;
    let k = logits.cols();
    Ok(logits.data().chunks(k).map(argmax).collect())
}

pub fn accuracy(model: &Model, features: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of empty set".into()));
    }
    let pred = predict_classes(model, features)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
