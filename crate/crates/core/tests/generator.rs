use std::sync::OnceLock;

use dpdfd_core::config::ExperimentConfig;
use dpdfd_core::generator::{
    generator_loss, statistics_norm, synthesize, train_generator, GeneratorLossWeights,
    GeneratorTraining, StepLog,
};
use dpdfd_core::nn::{parse_arch, softmax, Layer, Model, Optimizer, OptimizerState};
use dpdfd_core::pipeline::{self, noise_spec, PrivateStore};
use dpdfd_core::seed::{self, tag};
use dpdfd_core::{Error, Tensor};
use rand_distr::{Distribution, StandardNormal};

fn randn(rows: usize, cols: usize, s: u64) -> Tensor {
    let mut rng = seed::rng(s, 77, 0, 0);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
}

fn warmed_teacher(arch: &str, input: usize, s: u64) -> Model {
    let mut t = Model::new(input, &parse_arch(arch).unwrap(), s).unwrap();
    for i in 0..5 {
        t.forward(&randn(32, input, 100 + i), true).unwrap();
    }
    t
}

/// Straight f64 re-implementation of an eval-mode forward pass. Returns the
/// logits and, per normalization layer, the (mean, biased variance) of its
/// input together with its running statistics.
#[allow(clippy::type_complexity)]
fn oracle_forward(model: &Model, x: &Tensor) -> (Vec<Vec<f64>>, Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>) {
    let mut h: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).iter().map(|&v| v as f64).collect()).collect();
    let mut dumps = Vec::new();
    for layer in model.layers() {
        match layer {
            Layer::Dense { weight, bias } => {
                let (i, o) = (weight.shape()[0], weight.shape()[1]);
                h = h
                    .iter()
                    .map(|row| {
                        (0..o)
                            .map(|j| {
                                (0..i).map(|k| row[k] * weight.data()[k * o + j] as f64).sum::<f64>()
                                    + bias.data()[j] as f64
                            })
                            .collect()
                    })
                    .collect();
            }
            Layer::BatchNorm(bn) => {
                let n = h.len() as f64;
                let d = bn.dim();
                let mean: Vec<f64> = (0..d).map(|j| h.iter().map(|r| r[j]).sum::<f64>() / n).collect();
                let var: Vec<f64> = (0..d)
                    .map(|j| h.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n)
                    .collect();
                let rm: Vec<f64> = bn.running_mean.iter().map(|&v| v as f64).collect();
                let rv: Vec<f64> = bn.running_var.iter().map(|&v| v as f64).collect();
                for row in h.iter_mut() {
                    for j in 0..d {
                        row[j] = bn.gamma.data()[j] as f64 * (row[j] - rm[j]) / (rv[j] + bn.eps as f64).sqrt()
                            + bn.beta.data()[j] as f64;
                    }
                }
                dumps.push((mean, var, rm, rv));
            }
            Layer::Relu => h.iter_mut().flatten().for_each(|v| *v = v.max(0.0)),
            Layer::LeakyRelu(s) => h.iter_mut().flatten().for_each(|v| {
                if *v < 0.0 {
                    *v *= *s as f64
                }
            }),
            Layer::Tanh => h.iter_mut().flatten().for_each(|v| *v = v.tanh()),
        }
    }
    (h, dumps)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn softmax64(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn loss_terms_match_independent_recomputation() {
    let weights = GeneratorLossWeights { alpha: 2.5, beta: 0.7, ce: 1.3 };
    for s in 0..5 {
        let teacher = warmed_teacher("bn,dense:6,bn,relu,dense:6,bn,tanh,dense:4", 5, s);
        let x = randn(20, 5, 40 + s);
        let terms = generator_loss(&teacher, &x, &weights).unwrap();
        let (logits, dumps) = oracle_forward(&teacher, &x);
        let probs: Vec<Vec<f64>> = logits.iter().map(|r| softmax64(r)).collect();
        let n = probs.len() as f64;
        let ce = probs
            .iter()
            .zip(&logits)
            .map(|(p, z)| {
                let c = dpdfd_core::tensor::argmax(&z.iter().map(|&v| v as f32).collect::<Vec<_>>());
                -p[c].max(1e-7).ln()
            })
            .sum::<f64>()
            / n;
        let mean_p: Vec<f64> = (0..4).map(|j| probs.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        let ie: f64 = mean_p.iter().map(|&p| p * p.max(1e-7).ln()).sum();
        let norm: f64 = dumps.iter().map(|(m, v, rm, rv)| euclid(m, rm) + euclid(v, rv)).sum();
        assert!((terms.ce - ce).abs() < 1e-5, "ce {} vs {ce}", terms.ce);
        assert!((terms.ie - ie).abs() < 1e-5, "ie {} vs {ie}", terms.ie);
        assert!((terms.norm - norm).abs() < 1e-5 * norm.max(1.0), "norm {} vs {norm}", terms.norm);
        let total = 1.3 * ce + 2.5 * ie + 0.7 * norm;
        assert!((terms.total - total).abs() < 1e-5 * total.abs().max(1.0));
        let alone = statistics_norm(&teacher, &x).unwrap();
        assert!((alone - norm).abs() < 1e-5 * norm.max(1.0));
    }
}

#[test]
fn one_hot_teacher_has_zero_cross_entropy() {
    let mut teacher = warmed_teacher("bn,dense:3", 4, 1);
    if let Layer::Dense { weight, .. } = &mut teacher.layers_mut()[1] {
        weight.data_mut().iter_mut().for_each(|w| *w *= 1e4);
    }
    let terms = generator_loss(&teacher, &randn(16, 4, 2), &GeneratorLossWeights::default()).unwrap();
    assert!(terms.ce.abs() < 1e-6, "{}", terms.ce);
}

#[test]
fn uniform_teacher_hits_entropy_minimum() {
    let mut teacher = warmed_teacher("bn,dense:10", 4, 1);
    if let Layer::Dense { weight, bias } = &mut teacher.layers_mut()[1] {
        weight.data_mut().fill(0.0);
        bias.data_mut().fill(0.0);
    }
    let terms = generator_loss(&teacher, &randn(16, 4, 2), &GeneratorLossWeights::default()).unwrap();
    assert!((terms.ie + 10f64.ln()).abs() < 1e-5, "{}", terms.ie);
    assert!((terms.ce - 10f64.ln()).abs() < 1e-5);
}

fn single_norm_teacher(mean: [f32; 2], var: [f32; 2]) -> Model {
    let mut t = Model::new(2, &parse_arch("bn,dense:2").unwrap(), 0).unwrap();
    if let Layer::BatchNorm(bn) = &mut t.layers_mut()[0] {
        bn.running_mean = mean.to_vec();
        bn.running_var = var.to_vec();
        bn.populated = true;
    }
    t
}

#[test]
fn statistics_norm_examples() {
    // Batch mean (3, 4), biased variance (1, 1).
    let batch = Tensor::matrix(2, 2, vec![2.0, 3.0, 4.0, 5.0]);
    let t = single_norm_teacher([0.0, 0.0], [1.0, 1.0]);
    assert!((statistics_norm(&t, &batch).unwrap() - 5.0).abs() < 1e-6);
    let t = single_norm_teacher([3.0, 4.0], [1.0, 1.0]);
    assert!(statistics_norm(&t, &batch).unwrap().abs() < 1e-6);
}

#[test]
fn unpopulated_statistics_are_rejected() {
    let t = Model::new(2, &parse_arch("bn,dense:2").unwrap(), 0).unwrap();
    let batch = randn(4, 2, 0);
    let err = statistics_norm(&t, &batch).unwrap_err();
    assert!(matches!(err, Error::StatisticsNotPopulated));
    assert!(err.to_string().contains("teacher"), "{err}");
    assert!(generator_loss(&t, &batch, &GeneratorLossWeights::default()).is_err());
}

#[test]
fn nonfinite_batch_is_rejected() {
    let t = warmed_teacher("bn,dense:2", 2, 0);
    let mut batch = randn(4, 2, 0);
    batch.data_mut()[3] = f32::INFINITY;
    assert!(generator_loss(&t, &batch, &GeneratorLossWeights::default()).is_err());
}

#[test]
fn zero_steps_leave_generator_unchanged() {
    let teacher = warmed_teacher("bn,dense:3", 4, 0);
    let mut generator = Model::new(8, &parse_arch("dense:6,bn,relu,dense:4").unwrap(), 1).unwrap();
    let before = generator.clone();
    let cfg = GeneratorTraining {
        weights: GeneratorLossWeights::default(),
        steps: 0,
        batch_size: 16,
        noise: noise_spec(0, 8),
        noise_tag: tag::GENERATOR_NOISE,
    };
    let log = train_generator(&teacher, &mut generator, &cfg, &mut OptimizerState::new(Optimizer::adam(1e-3))).unwrap();
    assert!(log.is_empty());
    assert_eq!(generator, before);
}

#[test]
fn divergence_restores_last_good_generator() {
    let teacher = warmed_teacher("bn,dense:3", 4, 0);
    let mut generator = Model::new(8, &parse_arch("dense:4").unwrap(), 1).unwrap();
    let cfg = GeneratorTraining {
        weights: GeneratorLossWeights::default(),
        steps: 50,
        batch_size: 16,
        noise: noise_spec(0, 8),
        noise_tag: tag::GENERATOR_NOISE,
    };
    let mut opt = OptimizerState::new(Optimizer::Sgd { lr: f32::MAX });
    let before = generator.clone();
    let err = train_generator(&teacher, &mut generator, &cfg, &mut opt).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    assert!(generator.params().iter().all(|p| p.all_finite()));
    // The failing step was rolled back; earlier steps may have succeeded.
    if let Error::Diverged { step: 0, .. } = err {
        assert_eq!(generator, before);
    }
}

struct Trained {
    teacher: Model,
    teacher_sum_before: String,
    initial: Model,
    generator: Model,
    log: Vec<StepLog>,
    weights: GeneratorLossWeights,
    noise: dpdfd_core::generator::NoiseSpec,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let pc = cfg.pipeline().unwrap();
        let (train, _) = cfg.load_data().unwrap();
        let store = PrivateStore::new(train);
        let teacher = pipeline::train_teacher(&store, &pc.teacher, pc.seed).unwrap();
        let teacher_sum_before = teacher.checksum();
        let initial = pipeline::init_generator(&pc.generator, teacher.input_dim(), pc.seed).unwrap();
        let (generator, log) = pipeline::pretrain_generator(&teacher, &pc.generator, pc.seed).unwrap();
        Trained {
            teacher,
            teacher_sum_before,
            initial,
            generator,
            log,
            weights: pc.generator.weights,
            noise: noise_spec(pc.seed, pc.generator.noise_dim),
        }
    })
}

#[test]
fn reference_training_lowers_the_loss() {
    let t = trained();
    let n = t.log.len();
    let tenth = n / 10;
    let mean = |s: &[StepLog]| s.iter().map(|l| l.terms.total).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&t.log[..tenth]), mean(&t.log[n - tenth..]));
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn teacher_is_frozen_during_generator_training() {
    let t = trained();
    assert_eq!(t.teacher.checksum(), t.teacher_sum_before);
}

#[test]
fn logged_totals_decompose_exactly() {
    let t = trained();
    let w = t.weights;
    for l in &t.log {
        let sum = w.ce as f64 * l.terms.ce + w.alpha as f64 * l.terms.ie + w.beta as f64 * l.terms.norm;
        assert!((l.terms.total - sum).abs() <= 1e-6, "step {}", l.step);
    }
}

fn batch_mean_entropy(teacher: &Model, batch: &Tensor) -> f64 {
    let probs = softmax(&teacher.predict(batch).unwrap());
    let k = teacher.output_dim();
    let n = probs.len() as f64;
    (0..k)
        .map(|j| probs.iter().map(|p| p.as_slice()[j] as f64).sum::<f64>() / n)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

#[test]
fn training_improves_class_balance() {
    let t = trained();
    let before = synthesize(&t.initial, &t.noise, 1000, 999, 0).unwrap();
    let after = synthesize(&t.generator, &t.noise, 1000, 999, 0).unwrap();
    let (h0, h1) = (batch_mean_entropy(&t.teacher, &before), batch_mean_entropy(&t.teacher, &after));
    assert!(h1 > h0, "entropy {h0} -> {h1}");
}
