//! Staged private distillation.
//!
//! 1. A teacher is trained on the private data (the only read of it).
//! 2. A generator is trained against the frozen teacher.
//! 3. For each stage: synthesize samples, query the teacher and the current
//!    student once per sample, release one label per sample through
//!    selective randomized response, distill the student on the released
//!    labels with KL divergence, then fine-tune the generator.
//!
//! Stages never see the private store: [`distill`] takes no reference to it,
//! and [`run_pipeline`] checks the store's read counter across the stages.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorLossWeights, GeneratorTraining, LossTerms, NoiseSpec, StepLog};
use crate::label_privacy::{
    sample_candidate, select_candidates, PrivacyBudget, ThresholdRule,
};
use crate::nn::train::{self, epoch_batches, ClassifierTraining, Targets};
use crate::nn::{kl_divergence, softmax, LayerSpec, Model, Optimizer, OptimizerState};
use crate::seed::{self, tag};
use crate::tensor::{ProbVector, Tensor};

/// Private training data behind a read counter.
#[derive(Debug)]
pub struct PrivateStore {
    data: LabeledData,
    reads: AtomicU64,
}

impl PrivateStore {
    pub fn new(data: LabeledData) -> Self {
        Self {
            data,
            reads: AtomicU64::new(0),
        }
    }

    pub fn read(&self) -> &LabeledData {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.data
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::SeqCst)
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub arch: Vec<LayerSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub arch: Vec<LayerSpec>,
    pub noise_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weights: GeneratorLossWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub num_stages: usize,
    /// Identical for every stage.
    pub samples_per_stage: usize,
    pub student_arch: Vec<LayerSpec>,
    pub student_epochs: usize,
    pub student_batch: usize,
    pub student_lr: f32,
    pub eps: PrivacyBudget,
    /// Candidate threshold; `1/(2K)` when `None`.
    pub threshold: Option<f32>,
    /// Generator fine-tuning steps after each stage's distillation.
    pub finetune_steps: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(Error::Config("num_stages must be at least 1".into()));
        }
        if self.samples_per_stage < 2 {
            return Err(Error::Config("samples_per_stage must be at least 2".into()));
        }
        if self.student_batch < 2 {
            return Err(Error::Config("student_batch must be at least 2".into()));
        }
        Ok(())
    }

    pub fn rule(&self, num_classes: usize) -> ThresholdRule {
        match self.threshold {
            Some(t) => ThresholdRule::with_threshold(num_classes, t),
            None => ThresholdRule::new(num_classes),
        }
    }

    pub fn total_samples(&self) -> usize {
        self.num_stages * self.samples_per_stage
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub teacher: TeacherConfig,
    pub generator: GeneratorConfig,
    pub stages: StageConfig,
}

/// Trains the teacher on the private store (one read).
pub fn train_teacher(store: &PrivateStore, cfg: &TeacherConfig, run_seed: u64) -> Result<Model> {
    let data = store.read();
    if data.is_empty() {
        return Err(Error::InvalidArgument("private dataset is empty".into()));
    }
    let mut teacher = Model::new(
        data.dim(),
        &cfg.arch,
        seed::derive(run_seed, tag::TEACHER_INIT, 0, 0),
    )?;
    if teacher.output_dim() != data.num_classes {
        return Err(Error::Config(format!(
            "teacher outputs {} classes but the data has {}",
            teacher.output_dim(),
            data.num_classes
        )));
    }
    let mut opt = OptimizerState::new(Optimizer::adam(cfg.lr));
    train::train_classifier(
        &mut teacher,
        &data.features,
        &data.labels,
        &ClassifierTraining {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            shuffle_seed: seed::derive(run_seed, tag::TEACHER_SHUFFLE, 0, 0),
        },
        &mut opt,
    )?;
    Ok(teacher)
}

pub fn noise_spec(run_seed: u64, dim: usize) -> NoiseSpec {
    NoiseSpec {
        dim,
        seed: seed::derive(run_seed, tag::GENERATOR_NOISE, 0, 0),
    }
}

pub fn init_generator(cfg: &GeneratorConfig, data_dim: usize, run_seed: u64) -> Result<Model> {
    let generator = Model::new(
        cfg.noise_dim,
        &cfg.arch,
        seed::derive(run_seed, tag::GENERATOR_INIT, 0, 0),
    )?;
    if generator.output_dim() != data_dim {
        return Err(Error::Config(format!(
            "generator emits {} features but the teacher expects {data_dim}",
            generator.output_dim()
        )));
    }
    Ok(generator)
}

/// Initializes and trains a generator against the frozen teacher.
pub fn pretrain_generator(
    teacher: &Model,
    cfg: &GeneratorConfig,
    run_seed: u64,
) -> Result<(Model, Vec<StepLog>)> {
    let mut generator = init_generator(cfg, teacher.input_dim(), run_seed)?;
    let mut opt = OptimizerState::new(Optimizer::adam(cfg.lr));
    let log = generator::train_generator(
        teacher,
        &mut generator,
        &GeneratorTraining {
            weights: cfg.weights,
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            noise: noise_spec(run_seed, cfg.noise_dim),
            noise_tag: tag::GENERATOR_NOISE,
        },
        &mut opt,
    )?;
    Ok((generator, log))
}

/// Synthetic samples with their privately released labels. Each label was
/// drawn exactly once and cannot be changed afterwards.
#[derive(Debug, Clone)]
pub struct LabeledSyntheticSet {
    samples: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    teacher_classes: Vec<usize>,
    candidate_sizes: Vec<usize>,
    teacher_in_candidates: Vec<bool>,
    teacher_query_count: usize,
}

impl LabeledSyntheticSet {
    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn teacher_query_count(&self) -> usize {
        self.teacher_query_count
    }

    pub fn candidate_sizes(&self) -> &[usize] {
        &self.candidate_sizes
    }

    /// One-hot label rows `[N, K]`.
    pub fn one_hot(&self, rows: &[usize]) -> Tensor {
        let k = self.num_classes;
        let mut data = vec![0.0f32; rows.len() * k];
        for (r, &i) in rows.iter().enumerate() {
            data[r * k + self.labels[i]] = 1.0;
        }
        Tensor::matrix(rows.len(), k, data)
    }

    /// Fraction of released labels equal to the teacher's argmax.
    pub fn label_agreement(&self) -> f64 {
        let same = self
            .labels
            .iter()
            .zip(&self.teacher_classes)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.len() as f64
    }

    /// Whether each sample's teacher class was among its candidates.
    pub fn teacher_in_candidates(&self) -> &[bool] {
        &self.teacher_in_candidates
    }

    /// Label agreement restricted to samples whose candidate set contained
    /// the teacher's class; `None` if there are none.
    pub fn covered_agreement(&self) -> Option<f64> {
        let mut covered = 0usize;
        let mut same = 0usize;
        for ((l, t), &c) in self.labels.iter().zip(&self.teacher_classes).zip(&self.teacher_in_candidates) {
            if c {
                covered += 1;
                same += (l == t) as usize;
            }
        }
        (covered > 0).then(|| same as f64 / covered as f64)
    }

    pub fn mean_candidate_size(&self) -> f64 {
        self.candidate_sizes.iter().sum::<usize>() as f64 / self.len() as f64
    }
}

/// Releases labels through selective randomized response and counts every
/// invocation of the mechanism.
#[derive(Debug)]
pub struct PrivateLabeler {
    rule: ThresholdRule,
    eps: PrivacyBudget,
    seed: u64,
    invocations: u64,
}

impl PrivateLabeler {
    pub fn new(rule: ThresholdRule, eps: PrivacyBudget, run_seed: u64) -> Self {
        Self {
            rule,
            eps,
            seed: run_seed,
            invocations: 0,
        }
    }

    pub fn invocations(&self) -> u64 {
        self.invocations
    }

    /// Queries teacher and student once on `samples` and draws one label per
    /// sample from a per-(stage, sample) random stream.
    pub fn label(
        &mut self,
        stage: usize,
        samples: Tensor,
        teacher: &Model,
        student: &Model,
    ) -> Result<LabeledSyntheticSet> {
        let y_t = softmax(&teacher.predict(&samples)?);
        let y_s = softmax(&student.predict(&samples)?);
        let n = samples.rows();
        let mut labels = Vec::with_capacity(n);
        let mut teacher_classes = Vec::with_capacity(n);
        let mut candidate_sizes = Vec::with_capacity(n);
        let mut teacher_in_candidates = Vec::with_capacity(n);
        for (j, (ys, yt)) in y_s.iter().zip(&y_t).enumerate() {
            let candidates = select_candidates(ys, &self.rule);
            let c = yt.argmax();
            let mut rng = seed::label_rng(self.seed, stage, j);
            labels.push(sample_candidate(&candidates, c, self.eps, &mut rng));
            self.invocations += 1;
            teacher_classes.push(c);
            candidate_sizes.push(candidates.k());
            teacher_in_candidates.push(candidates.contains(c));
        }
        Ok(LabeledSyntheticSet {
            samples,
            labels,
            num_classes: self.rule.num_classes,
            teacher_classes,
            candidate_sizes,
            teacher_in_candidates,
            teacher_query_count: y_t.len(),
        })
    }
}

/// `Σ_j KL(ỹ_j ‖ student_out_j)`: the distillation loss over a labeled set.
pub fn student_distill_loss(student_out: &[ProbVector], labels: &[ProbVector]) -> Result<f64> {
    if student_out.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} outputs but {} labels",
            student_out.len(),
            labels.len()
        )));
    }
    student_out
        .iter()
        .zip(labels)
        .map(|(out, y)| kl_divergence(y, out))
        .sum()
}

/// Per-stage metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub eps: f64,
    pub k_mean: f64,
    pub label_agreement: f64,
    /// Accuracy on the evaluation set, if one was supplied.
    pub student_acc: Option<f64>,
    /// Distillation loss over the stage's labeled set after training.
    pub distill_loss: f64,
    /// Mean generator loss terms over the stage's fine-tuning steps.
    pub gen_terms: Option<LossTerms>,
    pub teacher_queries: usize,
}

/// Mutable state carried from stage to stage.
pub struct StageState {
    pub student: Model,
    pub generator: Model,
    pub student_opt: OptimizerState,
    pub generator_opt: OptimizerState,
    pub labeler: PrivateLabeler,
}

pub fn init_student(cfg: &StageConfig, data_dim: usize, num_classes: usize, run_seed: u64) -> Result<Model> {
    let student = Model::new(
        data_dim,
        &cfg.student_arch,
        seed::derive(run_seed, tag::STUDENT_INIT, 0, 0),
    )?;
    if student.output_dim() != num_classes {
        return Err(Error::Config(format!(
            "student outputs {} classes, expected {num_classes}",
            student.output_dim()
        )));
    }
    Ok(student)
}

/// Distills the student on a labeled set for `epochs` passes.
pub fn train_student(
    student: &mut Model,
    set: &LabeledSyntheticSet,
    epochs: usize,
    batch_size: usize,
    optimizer: &mut OptimizerState,
    shuffle_seed: u64,
) -> Result<()> {
    for epoch in 0..epochs {
        for idx in epoch_batches(set.len(), batch_size, shuffle_seed, epoch as u64) {
            let x = set.samples().select_rows(&idx);
            let targets = set.one_hot(&idx);
            train::train_step(student, &x, Targets::Distributions(&targets), optimizer)?;
        }
    }
    Ok(())
}

fn mean_terms(log: &[StepLog]) -> Option<LossTerms> {
    if log.is_empty() {
        return None;
    }
    let n = log.len() as f64;
    let sum = |f: fn(&LossTerms) -> f64| log.iter().map(|s| f(&s.terms)).sum::<f64>() / n;
    Some(LossTerms {
        ce: sum(|t| t.ce),
        ie: sum(|t| t.ie),
        norm: sum(|t| t.norm),
        total: sum(|t| t.total),
    })
}

/// One stage (1-based `stage`). On failure student and generator are restored
/// to their state at the start of the stage.
pub fn run_stage(
    stage: usize,
    teacher: &Model,
    state: &mut StageState,
    cfg: &StageConfig,
    gen_cfg: &GeneratorConfig,
    run_seed: u64,
    eval: Option<&LabeledData>,
) -> Result<StageRecord> {
    let student_before = state.student.clone();
    let generator_before = state.generator.clone();
    let result = stage_inner(stage, teacher, state, cfg, gen_cfg, run_seed, eval);
    if result.is_err() {
        state.student = student_before;
        state.generator = generator_before;
    }
    result
}

fn stage_inner(
    stage: usize,
    teacher: &Model,
    state: &mut StageState,
    cfg: &StageConfig,
    gen_cfg: &GeneratorConfig,
    run_seed: u64,
    eval: Option<&LabeledData>,
) -> Result<StageRecord> {
    let noise = noise_spec(run_seed, gen_cfg.noise_dim);
    // (a) synthesize
    let samples = generator::synthesize(
        &state.generator,
        &noise,
        cfg.samples_per_stage,
        tag::STAGE_NOISE,
        stage as u64,
    )?;
    // (b, c) query once, release labels once
    let set = state
        .labeler
        .label(stage, samples, teacher, &state.student)?;
    // (d) distill, then fine-tune the generator on fresh noise
    train_student(
        &mut state.student,
        &set,
        cfg.student_epochs,
        cfg.student_batch,
        &mut state.student_opt,
        seed::derive(run_seed, tag::STUDENT_SHUFFLE, stage as u64, 0),
    )?;
    let outputs = softmax(&state.student.predict(set.samples())?);
    let labels: Vec<ProbVector> = set
        .labels()
        .iter()
        .map(|&l| ProbVector::one_hot(l, set.num_classes))
        .collect();
    let distill_loss = student_distill_loss(&outputs, &labels)?;
    if !distill_loss.is_finite() {
        return Err(Error::Diverged {
            step: stage,
            what: "distillation loss".into(),
        });
    }
    let log = generator::train_generator(
        teacher,
        &mut state.generator,
        &GeneratorTraining {
            weights: gen_cfg.weights,
            steps: cfg.finetune_steps,
            batch_size: gen_cfg.batch_size,
            noise,
            noise_tag: tag::FINETUNE_NOISE,
        },
        &mut state.generator_opt,
    )?;
    let student_acc = eval
        .map(|d| train::accuracy(&state.student, &d.features, &d.labels))
        .transpose()?;
    Ok(StageRecord {
        stage,
        eps: cfg.eps.epsilon(),
        k_mean: set.mean_candidate_size(),
        label_agreement: set.label_agreement(),
        student_acc,
        distill_loss,
        gen_terms: mean_terms(&log),
        teacher_queries: set.teacher_query_count(),
    })
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: Model,
    pub generator: Model,
    pub records: Vec<StageRecord>,
    /// Selective randomized response invocations across all stages.
    pub mechanism_invocations: u64,
    pub total_synthetic: usize,
    pub teacher_queries: usize,
}

/// Runs every stage starting from a pretrained generator. Has no access to
/// private training data.
pub fn distill(
    teacher: &Model,
    generator: Model,
    cfg: &PipelineConfig,
    eval: Option<&LabeledData>,
) -> Result<DistillOutcome> {
    cfg.stages.validate()?;
    let num_classes = teacher.output_dim();
    let student = init_student(&cfg.stages, teacher.input_dim(), num_classes, cfg.seed)?;
    let mut state = StageState {
        student,
        generator,
        student_opt: OptimizerState::new(Optimizer::adam(cfg.stages.student_lr)),
        generator_opt: OptimizerState::new(Optimizer::adam(cfg.generator.lr)),
        labeler: PrivateLabeler::new(cfg.stages.rule(num_classes), cfg.stages.eps, cfg.seed),
    };
    let mut records = Vec::with_capacity(cfg.stages.num_stages);
    for stage in 1..=cfg.stages.num_stages {
        records.push(run_stage(
            stage,
            teacher,
            &mut state,
            &cfg.stages,
            &cfg.generator,
            cfg.seed,
            eval,
        )?);
    }
    Ok(DistillOutcome {
        teacher_queries: records.iter().map(|r| r.teacher_queries).sum(),
        student: state.student,
        generator: state.generator,
        mechanism_invocations: state.labeler.invocations(),
        total_synthetic: cfg.stages.total_samples(),
        records,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub teacher: Model,
    pub teacher_accuracy: Option<f64>,
    pub generator_log: Vec<StepLog>,
    pub distill: DistillOutcome,
    /// Private-store reads while stages ran; zero by construction.
    pub private_reads_during_stages: u64,
}

impl PipelineOutcome {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.distill.records.last().and_then(|r| r.student_acc)
    }
}

/// Teacher pretraining, generator pretraining, then every stage.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    store: &PrivateStore,
    eval: Option<&LabeledData>,
) -> Result<PipelineOutcome> {
    cfg.stages.validate()?;
    let teacher = train_teacher(store, &cfg.teacher, cfg.seed)?;
    let teacher_accuracy = eval
        .map(|d| train::accuracy(&teacher, &d.features, &d.labels))
        .transpose()?;
    let (generator, generator_log) = pretrain_generator(&teacher, &cfg.generator, cfg.seed)?;
    let reads_before = store.reads();
    let distill = distill(&teacher, generator, cfg, eval)?;
    let private_reads_during_stages = store.reads() - reads_before;
    if private_reads_during_stages != 0 {
        return Err(Error::InvalidArgument(format!(
            "stages read the private store {private_reads_during_stages} times"
        )));
    }
    Ok(PipelineOutcome {
        teacher,
        teacher_accuracy,
        generator_log,
        distill,
        private_reads_during_stages,
    })
}
