//! Data-free generator training against a frozen teacher.
//!
//! The generator maps standard-normal noise to synthetic samples. Its loss
//! is measured entirely through the frozen teacher:
//!
//! ```text
//! L_g = w_ce·CE(φt(x̃), argmax φt(x̃))  +  α·Σ p̄ log p̄  +  β·N(φt, x̃)
//! ```
//!
//! where `p̄` is the batch-mean teacher prediction (minimizing `Σ p̄ log p̄`
//! balances classes across the batch) and `N` sums, over every normalization
//! layer of the teacher, the L2 distances between the batch mean/variance of
//! that layer's input and the running mean/variance the teacher stored while
//! training on private data.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Graph, Mode, Model, OptimizerState, Var};
use crate::seed;
use crate::tensor::{argmax, Tensor};

/// Weights of the three generator loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLossWeights {
    /// Weight on the class-balance (negative entropy) term.
    pub alpha: f32,
    /// Weight on the normalization-statistics term.
    pub beta: f32,
    /// Weight on the one-hot cross-entropy term; 1 unless ablating it.
    pub ce: f32,
}

impl Default for GeneratorLossWeights {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 10.0,
            ce: 1.0,
        }
    }
}

impl GeneratorLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("ce", self.ce)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub dim: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub const DEFAULT_DIM: usize = 64;

    /// A `[rows, dim]` standard-normal batch drawn from stream `(tag, counter)`.
    pub fn sample(&self, rows: usize, tag: u64, counter: u64) -> Tensor {
        let mut rng = seed::rng(self.seed, tag, counter, 0);
        let data = (0..rows * self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::matrix(rows, self.dim, data)
    }
}

/// Unweighted values of the three terms plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub ie: f64,
    pub norm: f64,
    pub total: f64,
}

impl LossTerms {
    fn new(ce: f32, ie: f32, norm: f32, w: &GeneratorLossWeights) -> Self {
        let (ce, ie, norm) = (ce as f64, ie as f64, norm as f64);
        Self {
            ce,
            ie,
            norm,
            total: w.ce as f64 * ce + w.alpha as f64 * ie + w.beta as f64 * norm,
        }
    }

    fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.ie.is_finite() && self.norm.is_finite() && self.total.is_finite()
    }
}

struct Objective {
    total: Var,
    ce: Var,
    ie: Var,
    norm: Var,
}

fn check_statistics(teacher: &Model) -> Result<()> {
    let mut layers = teacher.norm_layers().peekable();
    if layers.peek().is_none() || layers.any(|bn| !bn.populated) {
        return Err(Error::StatisticsNotPopulated);
    }
    Ok(())
}

/// Records `Σ_l ‖μ_batch − μ_run‖₂ + ‖σ²_batch − σ²_run‖₂` over the teacher's
/// normalization layers.
fn record_statistics_norm(g: &mut Graph, teacher: &Model, norm_inputs: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (bn, &h) in teacher.norm_layers().zip(norm_inputs) {
        let mean = g.col_mean(h)?;
        let var = g.col_var(h)?;
        let dm = g.l2_distance(mean, &bn.running_mean)?;
        let dv = g.l2_distance(var, &bn.running_var)?;
        let layer = g.add(dm, dv)?;
        total = Some(match total {
            Some(t) => g.add(t, layer)?,
            None => layer,
        });
    }
    total.ok_or(Error::StatisticsNotPopulated)
}

fn record_objective(
    g: &mut Graph,
    teacher: &Model,
    x: Var,
    weights: &GeneratorLossWeights,
) -> Result<Objective> {
    let teacher_params = teacher.bind(g);
    let fwd = teacher.forward_graph(g, &teacher_params, x, Mode::Eval)?;
    let logits = g.value(fwd.output);
    let k = logits.cols();
    let targets: Vec<usize> = logits.data().chunks(k).map(argmax).collect();
    let ce = g.cross_entropy_logits(fwd.output, &targets)?;
    let probs = g.softmax(fwd.output)?;
    let mean_probs = g.col_mean(probs)?;
    let ie = g.neg_entropy(mean_probs);
    let norm = record_statistics_norm(g, teacher, &fwd.norm_inputs)?;

    let a = g.scale(ce, weights.ce);
    let b = g.scale(ie, weights.alpha);
    let c = g.scale(norm, weights.beta);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(Objective { total, ce, ie, norm })
}

/// Evaluates the generator loss of a fixed synthetic batch.
pub fn generator_loss(
    teacher: &Model,
    batch: &Tensor,
    weights: &GeneratorLossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    batch.ensure_finite("synthetic batch")?;
    check_statistics(teacher)?;
    let mut g = Graph::new();
    let x = g.leaf(batch.clone().reshape(vec![batch.rows(), batch.cols()])?);
    let obj = record_objective(&mut g, teacher, x, weights)?;
    Ok(LossTerms::new(
        g.scalar(obj.ce),
        g.scalar(obj.ie),
        g.scalar(obj.norm),
        weights,
    ))
}

/// Gradient of the weighted generator loss with respect to the batch itself.
pub fn generator_loss_gradient(
    teacher: &Model,
    batch: &Tensor,
    weights: &GeneratorLossWeights,
) -> Result<Tensor> {
    weights.validate()?;
    batch.ensure_finite("synthetic batch")?;
    check_statistics(teacher)?;
    let mut g = Graph::new();
    let x = g.leaf(batch.clone().reshape(vec![batch.rows(), batch.cols()])?);
    let obj = record_objective(&mut g, teacher, x, weights)?;
    Ok(g.backward(obj.total)?.get(x))
}

/// The normalization-statistics term `N(φt, x̃)` alone.
pub fn statistics_norm(teacher: &Model, batch: &Tensor) -> Result<f64> {
    batch.ensure_finite("synthetic batch")?;
    check_statistics(teacher)?;
    let mut g = Graph::new();
    let params = teacher.bind(&mut g);
    let x = g.leaf(batch.clone().reshape(vec![batch.rows(), batch.cols()])?);
    let fwd = teacher.forward_graph(&mut g, &params, x, Mode::Eval)?;
    let norm = record_statistics_norm(&mut g, teacher, &fwd.norm_inputs)?;
    Ok(g.scalar(norm) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub terms: LossTerms,
}

/// Generator training settings.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTraining {
    pub weights: GeneratorLossWeights,
    pub steps: usize,
    pub batch_size: usize,
    pub noise: NoiseSpec,
    /// Stream tag for noise draws, so pretraining and per-stage fine-tuning
    /// never reuse noise.
    pub noise_tag: u64,
}

/// Trains `generator` against the frozen `teacher` for `cfg.steps` steps.
///
/// Only the generator changes. If a step produces a non-finite loss or
/// gradient, the generator is restored to its state before that step and
/// [`Error::Diverged`] is returned.
pub fn train_generator(
    teacher: &Model,
    generator: &mut Model,
    cfg: &GeneratorTraining,
    optimizer: &mut OptimizerState,
) -> Result<Vec<StepLog>> {
    cfg.weights.validate()?;
    check_statistics(teacher)?;
    if generator.input_dim() != cfg.noise.dim {
        return Err(Error::Shape {
            layer: "generator input".into(),
            expected: format!("noise dim {}", generator.input_dim()),
            actual: format!("noise dim {}", cfg.noise.dim),
        });
    }
    if generator.output_dim() != teacher.input_dim() {
        return Err(Error::Shape {
            layer: "generator output".into(),
            expected: format!("teacher input width {}", teacher.input_dim()),
            actual: format!("{}", generator.output_dim()),
        });
    }
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let counter = optimizer.steps_taken();
        let z = cfg.noise.sample(cfg.batch_size, cfg.noise_tag, counter);
        let mut g = Graph::new();
        let gen_params = generator.bind(&mut g);
        let zv = g.leaf(z);
        let gen_fwd = generator.forward_graph(&mut g, &gen_params, zv, Mode::Train)?;
        let obj = record_objective(&mut g, teacher, gen_fwd.output, &cfg.weights)?;
        let terms = LossTerms::new(
            g.scalar(obj.ce),
            g.scalar(obj.ie),
            g.scalar(obj.norm),
            &cfg.weights,
        );
        if !terms.is_finite() || !g.scalar(obj.total).is_finite() {
            return Err(Error::Diverged {
                step,
                what: "generator loss".into(),
            });
        }
        let grads = g.backward(obj.total)?;
        let grads: Vec<Tensor> = gen_params.iter().map(|&v| grads.get(v)).collect();
        let snapshot = generator.clone();
        if let Err(e) = optimizer.step_model(generator, &grads) {
            *generator = snapshot;
            return Err(match e {
                Error::NonFinite(what) => Error::Diverged { step, what },
                other => other,
            });
        }
        generator.absorb_stats(&gen_fwd.batch_stats);
        if generator.params().iter().any(|t| !t.all_finite()) {
            *generator = snapshot;
            return Err(Error::Diverged {
                step,
                what: "generator parameters".into(),
            });
        }
        log.push(StepLog { step, terms });
    }
    Ok(log)
}

/// Draws `count` synthetic samples from the generator (running statistics).
pub fn synthesize(generator: &Model, noise: &NoiseSpec, count: usize, tag: u64, counter: u64) -> Result<Tensor> {
    let z = noise.sample(count, tag, counter);
    generator.predict(&z)
}
