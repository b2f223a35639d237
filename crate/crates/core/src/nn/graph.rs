//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its variables in order.
//! [`Graph::backward`] walks the tape in reverse and produces the gradient of a
//! scalar loss with respect to every recorded variable. Only the handful of ops
//! needed by the teacher, student and generator networks exist here.
//!
//! Matrices are `[rows, cols]`; reductions accumulate in `f64` and round once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f32 = 1e-7;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Per-column statistics of a batch entering a normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance.
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Softmax(Var),
    ColMean(Var),
    ColVar(Var),
    L2Distance(Var, Vec<f32>),
    NegEntropy(Var),
    CrossEntropyLogits {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    KlDivLogits {
        logits: Var,
        targets: Vec<f32>,
        probs: Vec<f32>,
        reduction: Reduction,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every variable of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; all zeros if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn shape_err(layer: &str, expected: impl Into<String>, actual: &[usize]) -> Error {
    Error::Shape {
        layer: layer.to_string(),
        expected: expected.into(),
        actual: format!("{actual:?}"),
    }
}

fn row_softmax(logits: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; logits.len()];
    for (row, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        for (d, &z) in dst.iter_mut().zip(row) {
            let e = ((z - max) as f64).exp();
            *d = e as f32;
            total += e;
        }
        for d in dst.iter_mut() {
            *d = (*d as f64 / total) as f32;
        }
    }
    out
}

/// Row-wise log-softmax in f64 (max-subtracted).
fn row_log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&z| z as f64 - lse).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter, data batch or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element variable.
    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v).data()[0]
    }

    fn matrix_dims(&self, v: Var, layer: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() < 2 {
            return Err(shape_err(layer, "a matrix [rows, cols]", t.shape()));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, m) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("rhs with {k} rows"),
                self.value(b).shape(),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b)))
    }

    /// Adds a length-`cols` bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "add_bias")?;
        if self.value(bias).numel() != m {
            return Err(shape_err(
                "add_bias",
                format!("bias of length {m}"),
                self.value(bias).shape(),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out), Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?}", self.value(a).shape()),
                self.value(b).shape(),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, s))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(total as f32), Op::Sum(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = map_tensor(t, |v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let t = self.value(x);
        let out = map_tensor(t, |v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = map_tensor(t, f32::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Batch normalization using the statistics of the batch itself.
    /// Returns the output and the batch statistics of the input.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BatchStats)> {
        let (n, m) = self.matrix_dims(x, "batch_norm")?;
        if n < 2 {
            return Err(shape_err(
                "batch_norm",
                "at least 2 rows in training mode",
                self.value(x).shape(),
            ));
        }
        let (mean, var) = column_moments(self.value(x).data(), n, m);
        self.batch_norm_with(x, gamma, beta, &mean, &var, eps, true)
            .map(|v| (v, BatchStats { mean, var }))
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        self.batch_norm_with(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "batch_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != m {
                return Err(shape_err(
                    &format!("batch_norm {name}"),
                    format!("length {m}"),
                    self.value(v).shape(),
                ));
            }
        }
        if mean.len() != m || var.len() != m {
            return Err(Error::Shape {
                layer: "batch_norm statistics".into(),
                expected: format!("length {m}"),
                actual: format!("mean {} / var {}", mean.len(), var.len()),
            });
        }
        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| (1.0 / ((v as f64 + eps as f64).sqrt())) as f32)
            .collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xd = self.value(x).data();
        let mut xhat = vec![0.0f32; n * m];
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            for j in 0..m {
                let h = (xd[i * m + j] - mean[j]) * inv_std[j];
                xhat[i * m + j] = h;
                out[i * m + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            Tensor::matrix(n, m, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "softmax")?;
        let out = row_softmax(self.value(x).data(), m);
        Ok(self.push(Tensor::matrix(n, m, out), Op::Softmax(x)))
    }

    /// Column means of a matrix, as a vector.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "col_mean")?;
        let (mean, _) = column_moments(self.value(x).data(), n, m);
        Ok(self.push(Tensor::vector(mean), Op::ColMean(x)))
    }

    /// Biased column variances of a matrix, as a vector.
    pub fn col_var(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "col_var")?;
        let (_, var) = column_moments(self.value(x).data(), n, m);
        Ok(self.push(Tensor::vector(var), Op::ColVar(x)))
    }

    /// Euclidean distance between `x` and a constant target.
    pub fn l2_distance(&mut self, x: Var, target: &[f32]) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != target.len() {
            return Err(shape_err(
                "l2_distance",
                format!("{} elements", target.len()),
                t.shape(),
            ));
        }
        let sq: f64 = t
            .data()
            .iter()
            .zip(target)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(sq.sqrt() as f32),
            Op::L2Distance(x, target.to_vec()),
        ))
    }

    /// `Σ p log p` over all entries, with `log` floored at [`PROB_FLOOR`].
    pub fn neg_entropy(&mut self, p: Var) -> Var {
        let total: f64 = self
            .value(p)
            .data()
            .iter()
            .map(|&v| v as f64 * (v.max(PROB_FLOOR) as f64).ln())
            .sum();
        self.push(Tensor::scalar(total as f32), Op::NegEntropy(p))
    }

    /// Mean cross entropy between `softmax(logits)` and integer class targets.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, m) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err(
                "cross_entropy targets",
                format!("{n} targets"),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::InvalidArgument(format!(
                "target class {bad} out of range for {m} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            total -= row_log_softmax(&z[i * m..(i + 1) * m])[t];
        }
        let probs = row_softmax(z, m);
        Ok(self.push(
            Tensor::scalar((total / n as f64) as f32),
            Op::CrossEntropyLogits {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ_i KL(targets_i ‖ softmax(logits_i))`, optionally averaged over rows.
    ///
    /// Target rows are floored at [`PROB_FLOOR`] and renormalized first; the
    /// model side uses the exact log-softmax so gradients never vanish.
    pub fn kl_div_logits(
        &mut self,
        logits: Var,
        targets: &Tensor,
        reduction: Reduction,
    ) -> Result<Var> {
        let (n, m) = self.matrix_dims(logits, "kl_div")?;
        if targets.numel() != n * m {
            return Err(shape_err(
                "kl_div targets",
                format!("[{n}, {m}]"),
                targets.shape(),
            ));
        }
        let mut t = targets.data().to_vec();
        for row in t.chunks_mut(m) {
            clamp_renormalize(row);
        }
        let z = self.value(logits).data();
        let mut total = 0.0f64;
        for i in 0..n {
            let lsm = row_log_softmax(&z[i * m..(i + 1) * m]);
            for j in 0..m {
                let tj = t[i * m + j] as f64;
                total += tj * (tj.ln() - lsm[j]);
            }
        }
        if reduction == Reduction::Mean {
            total /= n as f64;
        }
        let probs = row_softmax(z, m);
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::KlDivLogits {
                logits,
                targets: t,
                probs,
                reduction,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every variable.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        self.backward_with(loss, &Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: gradients of `Σ seed ⊙ output` with respect
    /// to every variable. `seed` must have the output's element count.
    pub fn backward_with(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let numel = self.value(output).numel();
        if seed.numel() != numel {
            return Err(shape_err(
                "backward seed",
                format!("{numel} elements"),
                seed.shape(),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.data().to_vec());

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |v: Var, g: Vec<f32>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k) = (av.rows(), av.cols());
                let m = bv.cols();
                // dA = dY · Bᵀ, dB = Aᵀ · dY
                let bt = transpose(bv.data(), k, m);
                acc(*a, matmul_raw(dy, &bt, n, m, k));
                let at = transpose(av.data(), n, k);
                acc(*b, matmul_raw(&at, dy, k, n, m));
            }
            Op::AddBias(x, bias) => {
                let m = self.value(*bias).numel();
                acc(*x, dy.to_vec());
                acc(*bias, column_sums(dy, m));
            }
            Op::Add(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.to_vec());
            }
            Op::Scale(x, s) => acc(*x, dy.iter().map(|g| g * s).collect()),
            Op::Sum(x) => acc(*x, vec![dy[0]; self.value(*x).numel()]),
            Op::Relu(x) => {
                let g = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                acc(*x, g);
            }
            Op::LeakyRelu(x, slope) => {
                let g = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
                    .collect();
                acc(*x, g);
            }
            Op::Tanh(x) => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&y, &g)| g * (1.0 - y * y))
                    .collect();
                acc(*x, g);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; m];
                let mut dbeta = vec![0.0f64; m];
                for i in 0..n {
                    for j in 0..m {
                        let d = dy[i * m + j] as f64;
                        dgamma[j] += d * xhat[i * m + j] as f64;
                        dbeta[j] += d;
                    }
                }
                let mut dx = vec![0.0f32; n * m];
                if *batch_stats {
                    // dx = γ·istd/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
                    let nf = n as f64;
                    for i in 0..n {
                        for j in 0..m {
                            let d = dy[i * m + j] as f64;
                            let v = g[j] as f64 * inv_std[j] as f64 / nf
                                * (nf * d - dbeta[j] - xhat[i * m + j] as f64 * dgamma[j]);
                            dx[i * m + j] = v as f32;
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..m {
                            dx[i * m + j] = dy[i * m + j] * g[j] * inv_std[j];
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma.into_iter().map(|v| v as f32).collect());
                acc(*beta, dbeta.into_iter().map(|v| v as f32).collect());
            }
            Op::Softmax(x) => {
                let m = node.value.cols();
                let s = node.value.data();
                let mut dx = vec![0.0f32; s.len()];
                for ((srow, grow), drow) in s.chunks(m).zip(dy.chunks(m)).zip(dx.chunks_mut(m)) {
                    let dot: f64 = srow
                        .iter()
                        .zip(grow)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum();
                    for ((d, &sv), &gv) in drow.iter_mut().zip(srow).zip(grow) {
                        *d = (sv as f64 * (gv as f64 - dot)) as f32;
                    }
                }
                acc(*x, dx);
            }
            Op::ColMean(x) => {
                let xv = self.value(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let inv = 1.0 / n as f32;
                let mut dx = vec![0.0f32; n * m];
                for row in dx.chunks_mut(m) {
                    for (d, &g) in row.iter_mut().zip(dy) {
                        *d = g * inv;
                    }
                }
                acc(*x, dx);
            }
            Op::ColVar(x) => {
                let xv = self.value(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let (mean, _) = column_moments(xv.data(), n, m);
                let scale = 2.0 / n as f32;
                let dx = xv
                    .data()
                    .chunks(m)
                    .flat_map(|row| {
                        row.iter()
                            .enumerate()
                            .map(|(j, &v)| dy[j] * scale * (v - mean[j]))
                            .collect::<Vec<_>>()
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::L2Distance(x, target) => {
                let dist = node.value.data()[0];
                let dx = if dist > 0.0 {
                    self.value(*x)
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&a, &b)| dy[0] * (a - b) / dist)
                        .collect()
                } else {
                    vec![0.0; target.len()]
                };
                acc(*x, dx);
            }
            Op::NegEntropy(p) => {
                let dx = self
                    .value(*p)
                    .data()
                    .iter()
                    .map(|&v| {
                        let d = if v > PROB_FLOOR {
                            (v as f64).ln() + 1.0
                        } else {
                            (PROB_FLOOR as f64).ln()
                        };
                        (dy[0] as f64 * d) as f32
                    })
                    .collect();
                acc(*p, dx);
            }
            Op::CrossEntropyLogits {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let m = probs.len() / n;
                let scale = dy[0] / n as f32;
                let mut dx: Vec<f32> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * m + t] -= scale;
                }
                acc(*logits, dx);
            }
            Op::KlDivLogits {
                logits,
                targets,
                probs,
                reduction,
            } => {
                let n = self.value(*logits).rows();
                let scale = match reduction {
                    Reduction::Sum => dy[0],
                    Reduction::Mean => dy[0] / n as f32,
                };
                // Target rows sum to one, so d/dz Σ t (log t − log softmax z) = softmax z − t.
                let dx = probs
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                acc(*logits, dx);
            }
        }
    }
}

fn map_tensor(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("same shape")
}

/// `[n, k] × [k, m]` with f64 row accumulators.
pub(crate) fn matmul_raw(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * m];
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let aip = aip as f64;
            for (o, &bpj) in acc.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bpj as f64;
            }
        }
        for (o, &v) in out[i * m..(i + 1) * m].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out
}

fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn column_sums(a: &[f32], cols: usize) -> Vec<f32> {
    let mut sums = vec![0.0f64; cols];
    for row in a.chunks(cols) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    sums.into_iter().map(|v| v as f32).collect()
}

/// Column means and biased variances.
pub(crate) fn column_moments(a: &[f32], n: usize, m: usize) -> (Vec<f32>, Vec<f32>) {
    let mut mean = vec![0.0f64; m];
    for row in a.chunks(m) {
        for (s, &v) in mean.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    mean.iter_mut().for_each(|s| *s /= n as f64);
    let mut var = vec![0.0f64; m];
    for row in a.chunks(m) {
        for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v as f64 - mu;
            *s += d * d;
        }
    }
    (
        mean.into_iter().map(|v| v as f32).collect(),
        var.into_iter().map(|v| (v / n as f64) as f32).collect(),
    )
}

/// Floors every entry at [`PROB_FLOOR`], caps at 1, and rescales to sum to one.
pub(crate) fn clamp_renormalize(row: &mut [f32]) {
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = v.clamp(PROB_FLOOR, 1.0);
        total += *v as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / total) as f32;
    }
}
