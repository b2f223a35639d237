//! First-order optimizers.

use crate::error::{Error, Result};
use crate::nn::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f32 },
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn adam(lr: f32) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer plus its per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    optimizer: Optimizer,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer) -> Self {
        Self {
            optimizer,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in place. Nothing is modified if any
    /// gradient is non-finite or mismatched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("param{i}"));
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    layer: name(i),
                    expected: format!("gradient {:?}", p.shape()),
                    actual: format!("{:?}", g.shape()),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", name(i))));
            }
        }

        self.step += 1;
        match self.optimizer {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if self.first.len() != params.len() {
                    self.first = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - (beta1 as f64).powi(t);
                let c2 = 1.0 - (beta2 as f64).powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv as f64 / c1;
                        let vhat = *vv as f64 / c2;
                        *pv -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
                    }
                }
            }
        }
        Ok(())
    }

    /// Updates every trainable tensor of `model` from gradients in [`Model::params`] order.
    pub fn step_model(&mut self, model: &mut Model, grads: &[Tensor]) -> Result<()> {
        let names = model.param_names();
        let mut params = model.params_mut();
        self.step(&mut params, grads, &names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(opt: Optimizer, p: f32, g: f32) -> f32 {
        let mut t = Tensor::scalar(p);
        let mut state = OptimizerState::new(opt);
        state
            .step(&mut [&mut t], &[Tensor::scalar(g)], &["p".into()])
            .unwrap();
        t.data()[0]
    }

    #[test]
    fn sgd_arithmetic() {
        assert!((run(Optimizer::Sgd { lr: 0.1 }, 1.0, 2.0) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        assert_eq!(run(Optimizer::Sgd { lr: 0.1 }, 1.5, 0.0), 1.5);
        assert_eq!(run(Optimizer::adam(0.1), 1.5, 0.0), 1.5);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps) ≈ lr for any g scale.
        for g in [1.0, 1e-3, 250.0] {
            let delta = 1.0 - run(Optimizer::adam(0.01), 1.0, g);
            assert!((delta - 0.01).abs() < 1e-6, "g = {g}: {delta}");
        }
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut t = Tensor::scalar(1.0);
        let mut state = OptimizerState::new(Optimizer::Sgd { lr: 0.1 });
        let err = state
            .step(&mut [&mut t], &[Tensor::scalar(f32::NAN)], &["layer0.weight".into()])
            .unwrap_err();
        assert!(err.to_string().contains("layer0.weight"));
        assert_eq!(t.data()[0], 1.0);
    }
}
