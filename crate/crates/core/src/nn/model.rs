//! Sequential models built from dense, normalization and activation layers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::graph::{BatchStats, Graph, Var};
use crate::seed;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.9;
pub const BN_EPS: f32 = 1e-5;

/// Architecture descriptor for one layer; the input width is implied by the
/// previous layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense(usize),
    BatchNorm,
    Relu,
    LeakyRelu(f32),
    Tanh,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense(n) => write!(f, "dense:{n}"),
            LayerSpec::BatchNorm => write!(f, "bn"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::LeakyRelu(s) => write!(f, "lrelu:{s}"),
            LayerSpec::Tanh => write!(f, "tanh"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::Config(format!("bad layer descriptor `{s}`"));
        match (name, arg) {
            ("dense", Some(a)) => {
                let n: usize = a.parse().map_err(|_| bad())?;
                if n == 0 {
                    return Err(bad());
                }
                Ok(LayerSpec::Dense(n))
            }
            ("bn", None) => Ok(LayerSpec::BatchNorm),
            ("relu", None) => Ok(LayerSpec::Relu),
            ("lrelu", Some(a)) => Ok(LayerSpec::LeakyRelu(a.parse().map_err(|_| bad())?)),
            ("tanh", None) => Ok(LayerSpec::Tanh),
            _ => Err(bad()),
        }
    }
}

/// Parses a comma-separated architecture such as `dense:32,bn,relu,dense:4`.
pub fn parse_arch(s: &str) -> Result<Vec<LayerSpec>> {
    let specs = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(LayerSpec::from_str)
        .collect::<Result<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(Error::Config("empty architecture".into()));
    }
    Ok(specs)
}

pub fn format_arch(specs: &[LayerSpec]) -> String {
    specs
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    /// Set once running statistics have absorbed at least one training batch.
    pub populated: bool,
}

impl BatchNormLayer {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![dim], 1.0),
            beta: Tensor::zeros(vec![dim]),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            populated: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average: `running ← momentum·running + (1−momentum)·batch`.
    pub fn absorb(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
        self.populated = true;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = x·W + b` with `W` stored `[in, out]`.
    Dense { weight: Tensor, bias: Tensor },
    BatchNorm(BatchNormLayer),
    Relu,
    LeakyRelu(f32),
    Tanh,
}

impl Layer {
    fn describe(&self) -> String {
        match self {
            Layer::Dense { weight, .. } => {
                format!("dense {}->{}", weight.shape()[0], weight.shape()[1])
            }
            Layer::BatchNorm(bn) => format!("batchnorm {}", bn.dim()),
            Layer::Relu => "relu".into(),
            Layer::LeakyRelu(s) => format!("leaky_relu {s}"),
            Layer::Tanh => "tanh".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalization uses batch statistics.
    Train,
    /// Normalization uses running statistics.
    Eval,
}

/// Result of recording a forward pass on a graph.
#[derive(Debug)]
pub struct Forward {
    pub output: Var,
    /// Input to each normalization layer, in layer order.
    pub norm_inputs: Vec<Var>,
    /// Batch statistics per normalization layer (only in [`Mode::Train`]).
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_dim: usize,
    layers: Vec<Layer>,
    seed: u64,
}

impl Model {
    /// Builds a model with weights drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn new(input_dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be positive".into()));
        }
        let mut rng = seed::rng(seed, 0, 0, 0);
        let mut width = input_dim;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Dense(out) => {
                    let bound = 1.0 / (width as f32).sqrt();
                    let mut sample = |n: usize| -> Vec<f32> {
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    };
                    let weight = Tensor::matrix(width, out, sample(width * out));
                    let bias = Tensor::vector(sample(out));
                    width = out;
                    Layer::Dense { weight, bias }
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNormLayer::new(width)),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::LeakyRelu(s) => Layer::LeakyRelu(s),
                LayerSpec::Tanh => Layer::Tanh,
            };
            layers.push(layer);
        }
        Ok(Self {
            input_dim,
            layers,
            seed,
        })
    }

    /// Assembles a model from explicit layers (used by checkpoint loading).
    pub fn from_layers(input_dim: usize, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Dense { weight, bias } => {
                    if weight.shape() != [width, bias.numel()] {
                        return Err(Error::Shape {
                            layer: format!("layer {i} ({})", layer.describe()),
                            expected: format!("weight [{width}, {}]", bias.numel()),
                            actual: format!("{:?}", weight.shape()),
                        });
                    }
                    width = bias.numel();
                }
                Layer::BatchNorm(bn) => {
                    if bn.dim() != width
                        || bn.gamma.numel() != width
                        || bn.beta.numel() != width
                        || bn.running_var.len() != width
                    {
                        return Err(Error::Shape {
                            layer: format!("layer {i} ({})", layer.describe()),
                            expected: format!("width {width}"),
                            actual: format!("width {}", bn.dim()),
                        });
                    }
                }
                _ => {}
            }
        }
        Ok(Self {
            input_dim,
            layers,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense { bias, .. } => Some(bias.numel()),
                _ => None,
            })
            .unwrap_or(self.input_dim)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { bias, .. } => LayerSpec::Dense(bias.numel()),
                Layer::BatchNorm(_) => LayerSpec::BatchNorm,
                Layer::Relu => LayerSpec::Relu,
                Layer::LeakyRelu(s) => LayerSpec::LeakyRelu(*s),
                Layer::Tanh => LayerSpec::Tanh,
            })
            .collect()
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &BatchNormLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Trainable tensors in a fixed order: per layer, weight then bias
    /// (dense) or gamma then beta (normalization).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { weight, bias } => out.extend([weight, bias]),
                Layer::BatchNorm(bn) => out.extend([&bn.gamma, &bn.beta]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { weight, bias } => out.extend([weight, bias]),
                Layer::BatchNorm(bn) => out.extend([&mut bn.gamma, &mut bn.beta]),
                _ => {}
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { .. } => {
                    out.push(format!("layer{i}.weight"));
                    out.push(format!("layer{i}.bias"));
                }
                Layer::BatchNorm(_) => {
                    out.push(format!("layer{i}.gamma"));
                    out.push(format!("layer{i}.beta"));
                }
                _ => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Records every trainable tensor on `graph`, in [`Model::params`] order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| graph.leaf(t.clone()))
            .collect()
    }

    /// Records a forward pass of `x` using parameter variables from [`Model::bind`].
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        params: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<Forward> {
        let width = graph.value(x).cols();
        if graph.value(x).shape().len() < 2 || width != self.input_dim {
            return Err(Error::Shape {
                layer: format!(
                    "layer 0 ({})",
                    self.layers.first().map(Layer::describe).unwrap_or_default()
                ),
                expected: format!("input [batch, {}]", self.input_dim),
                actual: format!("{:?}", graph.value(x).shape()),
            });
        }
        let mut h = x;
        let mut p = params.iter().copied();
        let mut norm_inputs = Vec::new();
        let mut batch_stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let ctx = |e: Error| match e {
                Error::Shape {
                    expected, actual, ..
                } => Error::Shape {
                    layer: format!("layer {i} ({})", layer.describe()),
                    expected,
                    actual,
                },
                other => other,
            };
            h = match layer {
                Layer::Dense { .. } => {
                    let (w, b) = (next(&mut p)?, next(&mut p)?);
                    let y = graph.matmul(h, w).map_err(ctx)?;
                    graph.add_bias(y, b).map_err(ctx)?
                }
                Layer::BatchNorm(bn) => {
                    let (gamma, beta) = (next(&mut p)?, next(&mut p)?);
                    norm_inputs.push(h);
                    match mode {
                        Mode::Train => {
                            let (y, stats) = graph
                                .batch_norm_train(h, gamma, beta, bn.eps)
                                .map_err(ctx)?;
                            batch_stats.push(stats);
                            y
                        }
                        Mode::Eval => graph
                            .batch_norm_eval(
                                h,
                                gamma,
                                beta,
                                &bn.running_mean,
                                &bn.running_var,
                                bn.eps,
                            )
                            .map_err(ctx)?,
                    }
                }
                Layer::Relu => graph.relu(h),
                Layer::LeakyRelu(s) => graph.leaky_relu(h, *s),
                Layer::Tanh => graph.tanh(h),
            };
        }
        Ok(Forward {
            output: h,
            norm_inputs,
            batch_stats,
        })
    }

    fn as_matrix(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape().len() < 2 {
            return Err(Error::Shape {
                layer: "model input".into(),
                expected: format!("[batch, {}]", self.input_dim),
                actual: format!("{:?}", batch.shape()),
            });
        }
        batch
            .clone()
            .reshape(vec![batch.rows(), batch.cols()])
    }

    /// Forward pass returning the output (logits for classifiers). In training
    /// mode normalization layers use batch statistics and fold them into their
    /// running averages.
    pub fn forward(&mut self, batch: &Tensor, training: bool) -> Result<Tensor> {
        let mode = if training { Mode::Train } else { Mode::Eval };
        let mut g = Graph::new();
        let params = self.bind(&mut g);
        let x = g.leaf(self.as_matrix(batch)?);
        let fwd = self.forward_graph(&mut g, &params, x, mode)?;
        if training {
            self.absorb_stats(&fwd.batch_stats);
        }
        let out = g.value(fwd.output).clone();
        out.ensure_finite("model output")?;
        Ok(out)
    }

    /// Read-only inference with running statistics.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g);
        let x = g.leaf(self.as_matrix(batch)?);
        let fwd = self.forward_graph(&mut g, &params, x, Mode::Eval)?;
        let out = g.value(fwd.output).clone();
        out.ensure_finite("model output")?;
        Ok(out)
    }

    /// Folds batch statistics (one entry per normalization layer) into the running averages.
    pub fn absorb_stats(&mut self, stats: &[BatchStats]) {
        let layers = self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        });
        for (bn, s) in layers.zip(stats) {
            bn.absorb(s);
        }
    }

    /// SHA-256 over architecture, parameters and running statistics.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.input_dim as u64).to_le_bytes());
        h.update(format_arch(&self.specs()).as_bytes());
        for t in self.params() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        for bn in self.norm_layers() {
            for v in bn.running_mean.iter().chain(&bn.running_var) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn next(p: &mut impl Iterator<Item = Var>) -> Result<Var> {
    p.next()
        .ok_or_else(|| Error::InvalidArgument("fewer parameter variables than layers need".into()))
}
