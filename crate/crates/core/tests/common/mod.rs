//! Helpers shared by the integration test binaries: a finite-difference
//! gradient harness and independent reference oracles.

#![allow(dead_code)]

use dpdfd_core::nn::{Graph, Reduction, Var};
use dpdfd_core::seed;
use dpdfd_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-3;

/// A differentiable op under test: how to draw inputs and how to record it.
pub struct OpCase {
    pub name: &'static str,
    pub sample: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: fn(&mut Graph, &[Var]) -> Var,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Normal draws kept at least `gap` away from zero (kinks of relu-style ops).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let mut t = normal(rng, shape);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap - v.abs() } else { gap + v.abs() };
        }
    }
    t
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn distribution_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(rng, &[rows, cols], 0.05, 1.0);
    for row in t.data_mut().chunks_mut(cols) {
        let s: f32 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

const CE_TARGETS: [usize; 4] = [2, 0, 3, 1];

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            sample: |r| vec![normal(r, &[3, 4]), normal(r, &[4, 2])],
            build: |g, v| g.matmul(v[0], v[1]).unwrap(),
        },
        OpCase {
            name: "add_bias",
            sample: |r| vec![normal(r, &[3, 4]), normal(r, &[4])],
            build: |g, v| g.add_bias(v[0], v[1]).unwrap(),
        },
        OpCase {
            name: "add",
            sample: |r| vec![normal(r, &[3, 4]), normal(r, &[3, 4])],
            build: |g, v| g.add(v[0], v[1]).unwrap(),
        },
        OpCase {
            name: "scale",
            sample: |r| vec![normal(r, &[3, 4])],
            build: |g, v| g.scale(v[0], -1.7),
        },
        OpCase {
            name: "sum",
            sample: |r| vec![normal(r, &[3, 4])],
            build: |g, v| g.sum(v[0]),
        },
        OpCase {
            name: "relu",
            sample: |r| vec![away_from_zero(r, &[3, 4], 0.01)],
            build: |g, v| g.relu(v[0]),
        },
        OpCase {
            name: "leaky_relu",
            sample: |r| vec![away_from_zero(r, &[3, 4], 0.01)],
            build: |g, v| g.leaky_relu(v[0], 0.2),
        },
        OpCase {
            name: "tanh",
            sample: |r| vec![normal(r, &[3, 4])],
            build: |g, v| g.tanh(v[0]),
        },
        OpCase {
            name: "batch_norm_train",
            sample: |r| vec![normal(r, &[5, 3]), uniform(r, &[3], 0.5, 1.5), normal(r, &[3])],
            build: |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
        },
        OpCase {
            name: "batch_norm_eval",
            sample: |r| vec![normal(r, &[5, 3]), uniform(r, &[3], 0.5, 1.5), normal(r, &[3])],
            build: |g, v| {
                g.batch_norm_eval(v[0], v[1], v[2], &[0.3, -0.2, 0.1], &[1.5, 0.7, 2.0], 1e-5)
                    .unwrap()
            },
        },
        OpCase {
            name: "softmax",
            sample: |r| vec![normal(r, &[3, 4])],
            build: |g, v| g.softmax(v[0]).unwrap(),
        },
        OpCase {
            name: "col_mean",
            sample: |r| vec![normal(r, &[5, 3])],
            build: |g, v| g.col_mean(v[0]).unwrap(),
        },
        OpCase {
            name: "col_var",
            sample: |r| vec![normal(r, &[5, 3])],
            build: |g, v| g.col_var(v[0]).unwrap(),
        },
        OpCase {
            name: "l2_distance",
            sample: |r| vec![normal(r, &[1, 4])],
            build: |g, v| g.l2_distance(v[0], &[0.5, -1.0, 2.0, 0.0]).unwrap(),
        },
        OpCase {
            name: "neg_entropy",
            sample: |r| vec![uniform(r, &[1, 4], 0.05, 0.9)],
            build: |g, v| g.neg_entropy(v[0]),
        },
        OpCase {
            name: "cross_entropy_logits",
            sample: |r| vec![normal(r, &[4, 4])],
            build: |g, v| g.cross_entropy_logits(v[0], &CE_TARGETS).unwrap(),
        },
        OpCase {
            name: "kl_div_logits_sum",
            sample: |r| vec![normal(r, &[3, 4]), distribution_rows(r, 3, 4)],
            build: |g, v| {
                let t = g.value(v[1]).clone();
                g.kl_div_logits(v[0], &t, Reduction::Sum).unwrap()
            },
        },
        OpCase {
            name: "kl_div_logits_mean",
            sample: |r| vec![normal(r, &[3, 4]), distribution_rows(r, 3, 4)],
            build: |g, v| {
                let t = g.value(v[1]).clone();
                g.kl_div_logits(v[0], &t, Reduction::Mean).unwrap()
            },
        },
    ]
}

/// Largest relative error seen for one op.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: &'static str,
    pub points: usize,
    pub coords: usize,
    pub max_rel_error: f64,
}

/// `|a − n| / max(|a|, |n|, 1)`: relative for gradients of magnitude ≥ 1,
/// absolute below that (f32 forward passes leave ~1e-4 absolute noise in a
/// central difference with h = 1e-3).
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn projected(case: &OpCase, inputs: &[Tensor], weights: &[f32]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &vars);
    g.value(out)
        .data()
        .iter()
        .zip(weights)
        .map(|(&y, &w)| y as f64 * w as f64)
        .sum()
}

/// Checks `case` at `points` random inputs against central differences of
/// `Σ W ⊙ op(x)` for a random projection `W`, over every input coordinate.
/// Inputs the op treats as constants (e.g. KL targets) get zero analytic
/// gradient and are skipped.
pub fn check_op(case: &OpCase, points: usize, run_seed: u64) -> GradReport {
    let mut rng = seed::rng(run_seed, 0x6772_6164, 0, 0);
    let mut max_rel_error = 0.0f64;
    let mut coords = 0;
    for _ in 0..points {
        let inputs = (case.sample)(&mut rng);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = (case.build)(&mut g, &vars);
        let shape = g.value(out).shape().to_vec();
        let weights = normal(&mut rng, &shape);
        let grads = g.backward_with(out, &weights).unwrap();
        for (i, var) in vars.iter().enumerate() {
            if case.name.starts_with("kl_div") && i == 1 {
                continue;
            }
            let analytic = grads.get(*var);
            for j in 0..inputs[i].numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += FD_STEP as f32;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= FD_STEP as f32;
                // Use the step actually representable in f32.
                let h = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
                let numeric = (projected(case, &plus, weights.data())
                    - projected(case, &minus, weights.data()))
                    / h;
                max_rel_error = max_rel_error.max(rel_error(analytic.data()[j] as f64, numeric));
                coords += 1;
            }
        }
    }
    GradReport {
        name: case.name,
        points,
        coords,
        max_rel_error,
    }
}

/// Closed-form randomized response over `k` candidates among `num_classes`
/// classes, written independently of the library: `e^ε/(e^ε+k−1)` to the kept
/// class, `1/(e^ε+k−1)` to the other candidates.
pub fn oracle_in_set(candidates: &[usize], kept: usize, num_classes: usize, eps: f64) -> Vec<f64> {
    let k = candidates.len() as f64;
    let denom = eps.exp() + k - 1.0;
    let mut t = vec![0.0; num_classes];
    for &c in candidates {
        t[c] = if c == kept { eps.exp() / denom } else { 1.0 / denom };
    }
    t
}

pub fn oracle_uniform(candidates: &[usize], num_classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; num_classes];
    for &c in candidates {
        t[c] = 1.0 / candidates.len() as f64;
    }
    t
}

/// Independent candidate selection: strict threshold, else top two with
/// lower indices winning ties.
pub fn oracle_candidates(y_s: &[f32], threshold: f32) -> Vec<usize> {
    let above: Vec<usize> = (0..y_s.len()).filter(|&i| y_s[i] > threshold).collect();
    if above.len() >= 2 {
        return above;
    }
    let mut best = 0;
    for i in 1..y_s.len() {
        if y_s[i] > y_s[best] {
            best = i;
        }
    }
    let mut second = if best == 0 { 1 } else { 0 };
    for i in 0..y_s.len() {
        if i != best && y_s[i] > y_s[second] {
            second = i;
        }
    }
    let mut out = vec![best, second];
    out.sort();
    out
}

/// Nearest-centroid classifier fitted on `(x, labels)`; returns test accuracy.
pub fn nearest_centroid_accuracy(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    classes: usize,
) -> f64 {
    let d = train.cols();
    let mut centroids = vec![vec![0.0f64; d]; classes];
    let mut counts = vec![0usize; classes];
    for (r, &y) in train_labels.iter().enumerate() {
        for (c, &v) in centroids[y].iter_mut().zip(train.row(r)) {
            *c += v as f64;
        }
        counts[y] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = test_labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let x = test.row(r);
            let dist = |c: &Vec<f64>| -> f64 {
                c.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum()
            };
            let best = (0..classes)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == y
        })
        .count();
    correct as f64 / test_labels.len() as f64
}

/// Sample mean and (n−1) standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// One fuzzed mechanism input: student prediction, teacher prediction, ε.
#[derive(Debug, Clone)]
pub struct MechanismFixture {
    pub y_s: dpdfd_core::ProbVector,
    pub y_t: dpdfd_core::ProbVector,
    pub eps: f64,
}

fn random_distribution(rng: &mut ChaCha8Rng, k: usize, peaked: bool) -> dpdfd_core::ProbVector {
    let mut v: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
    if peaked {
        let hot = rng.random_range(0..k);
        v[hot] += 20.0;
    }
    let s: f64 = v.iter().sum();
    dpdfd_core::ProbVector::new(v.iter().map(|x| (x / s) as f32).collect()).unwrap()
}

/// `n` fixtures over K ∈ 2..=10 and a spread of budgets; every fourth
/// student prediction is sharply peaked so the top-two fallback is exercised.
pub fn mechanism_fixtures(n: usize, run_seed: u64) -> Vec<MechanismFixture> {
    const BUDGETS: [f64; 6] = [0.0, 0.5, 1.0, 2.197_224_577_336_219_6, 3.0, 10.0];
    let mut rng = seed::rng(run_seed, 0x6d65_6368, 0, 0);
    (0..n)
        .map(|i| {
            let k = rng.random_range(2..=10);
            MechanismFixture {
                y_s: random_distribution(&mut rng, k, i % 4 == 0),
                y_t: random_distribution(&mut rng, k, false),
                eps: BUDGETS[i % BUDGETS.len()],
            }
        })
        .collect()
}

/// Per-cell comparison of many sampled histograms with their closed forms.
#[derive(Debug, Clone, Default)]
pub struct HistogramSweep {
    pub rows: usize,
    pub cells: usize,
    /// Smallest exact two-sided binomial p-value over all cells.
    pub min_p: f64,
    /// Largest normal-approximation |z| over cells with nonzero probability.
    pub max_z: f64,
    /// Cells whose normal-approximation |z| exceeds 3.
    pub beyond_three_sigma: usize,
    /// Impossible outcomes that were drawn.
    pub impossible: usize,
}

impl HistogramSweep {
    /// The 3σ two-sided level split evenly over every tested cell.
    pub fn cell_level(&self) -> f64 {
        dpdfd_core::verifier::three_sigma_level() / self.cells.max(1) as f64
    }

    pub fn pass(&self) -> bool {
        self.impossible == 0 && self.min_p >= self.cell_level()
    }

    /// Cells expected beyond raw 3σ by chance alone.
    pub fn expected_beyond(&self) -> f64 {
        dpdfd_core::verifier::three_sigma_level() * self.cells as f64
    }

    pub fn add<F: FnMut(&mut ChaCha8Rng) -> usize>(
        &mut self,
        table: &[f64],
        trials: usize,
        stream: u64,
        mut draw: F,
    ) {
        let mut rng = seed::rng(stream, 0x6869_7374, 0, 0);
        let mut counts = vec![0u64; table.len()];
        for _ in 0..trials {
            counts[draw(&mut rng)] += 1;
        }
        let (p, cells) = dpdfd_core::verifier::min_cell_pvalue(table, &counts, trials);
        if self.rows == 0 {
            self.min_p = 1.0;
        }
        self.rows += 1;
        self.cells += cells;
        self.min_p = self.min_p.min(p);
        for (&q, &c) in table.iter().zip(&counts) {
            if q == 0.0 {
                self.impossible += (c > 0) as usize;
                continue;
            }
            let z = dpdfd_core::verifier::max_cell_zscore(&[q, 1.0 - q], &[c, trials as u64 - c], trials);
            self.max_z = self.max_z.max(z);
            self.beyond_three_sigma += (z > 3.0) as usize;
        }
    }
}

/// Samples both mechanisms `trials` times on every fixture.
pub fn sweep_mechanisms(fixtures: &[MechanismFixture], trials: usize) -> HistogramSweep {
    use dpdfd_core::label_privacy::{
        classic_rr, classic_rr_distribution, mechanism_distribution, selective_rr, PrivacyBudget,
        ThresholdRule,
    };
    let mut sweep = HistogramSweep::default();
    for (i, fx) in fixtures.iter().enumerate() {
        let k = fx.y_s.len();
        let rule = ThresholdRule::new(k);
        let e = PrivacyBudget::new(fx.eps).unwrap();
        let table = mechanism_distribution(&fx.y_s, &fx.y_t, &rule, e).unwrap();
        sweep.add(&table, trials, i as u64, |rng| {
            selective_rr(&fx.y_s, &fx.y_t, &rule, e, rng).unwrap().hot_index().unwrap()
        });
        let label = fx.y_t.argmax();
        let classic = classic_rr_distribution(label, k, e).unwrap();
        sweep.add(&classic, trials, 1000 + i as u64, |rng| classic_rr(label, k, e, rng).unwrap());
    }
    sweep
}
