//! Experiment configuration: a flat TOML table of typed keys.
//!
//! Unknown keys are rejected as a group so a typo-laden file reports every
//! offending key at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, BlobSpec, LabeledData};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::generator::GeneratorLossWeights;
use crate::label_privacy::PrivacyBudget;
use crate::nn::parse_arch;
use crate::pipeline::{GeneratorConfig, PipelineConfig, StageConfig, TeacherConfig};

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "DPDFD_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Blobs,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub data_seed: u64,

    pub classes: usize,
    pub blob_dim: usize,
    pub blob_separation: f64,
    /// Leading blob coordinates carrying class signal; the rest are
    /// class-independent noise with std `blob_nuisance_std`.
    pub blob_informative: usize,
    pub blob_nuisance_std: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,

    pub teacher_arch: String,
    pub teacher_epochs: usize,
    pub teacher_batch: usize,
    pub teacher_lr: f64,

    pub generator_arch: String,
    pub noise_dim: usize,
    pub generator_steps: usize,
    pub generator_batch: usize,
    pub generator_lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub ce_weight: f64,

    pub student_arch: String,
    pub student_epochs: usize,
    pub student_batch: usize,
    pub student_lr: f64,

    pub eps: f64,
    pub num_stages: usize,
    pub samples_per_stage: usize,
    /// Overrides `samples_per_stage` with `total_synthetic / num_stages`;
    /// must divide evenly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_synthetic: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub finetune_steps: usize,

    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Blobs,
            seed: 0,
            data_seed: 0,
            classes: 4,
            blob_dim: 16,
            blob_separation: 5.0,
            blob_informative: 8,
            blob_nuisance_std: 0.1,
            train_samples: 2000,
            test_samples: 1000,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            teacher_arch: "bn,dense:32,bn,relu,dense:32,bn,relu,dense:4".into(),
            teacher_epochs: 10,
            teacher_batch: 64,
            teacher_lr: 1e-2,
            generator_arch: "dense:64,bn,lrelu:0.2,dense:16,bn".into(),
            noise_dim: 64,
            generator_steps: 1500,
            generator_batch: 64,
            generator_lr: 1e-3,
            alpha: 5.0,
            beta: 10.0,
            ce_weight: 1.0,
            student_arch: "dense:32,relu,dense:4".into(),
            student_epochs: 5,
            student_batch: 128,
            student_lr: 1e-3,
            eps: 10.0,
            num_stages: 16,
            samples_per_stage: 1250,
            total_synthetic: None,
            threshold: None,
            finetune_steps: 20,
            output_dir: PathBuf::from("run"),
        }
    }
}

/// Every key the schema accepts.
pub const KNOWN_KEYS: &[&str] = &[
    "task",
    "seed",
    "data_seed",
    "classes",
    "blob_dim",
    "blob_separation",
    "blob_informative",
    "blob_nuisance_std",
    "train_samples",
    "test_samples",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "teacher_arch",
    "teacher_epochs",
    "teacher_batch",
    "teacher_lr",
    "generator_arch",
    "noise_dim",
    "generator_steps",
    "generator_batch",
    "generator_lr",
    "alpha",
    "beta",
    "ce_weight",
    "student_arch",
    "student_epochs",
    "student_batch",
    "student_lr",
    "eps",
    "num_stages",
    "samples_per_stage",
    "total_synthetic",
    "threshold",
    "finetune_steps",
    "output_dir",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut unknown: Vec<String> = table
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            unknown.sort();
            return Err(Error::UnknownConfigKeys(unknown));
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical serialization. Fails only for seeds beyond TOML's signed
    /// 64-bit integers.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_toml()?.as_bytes())
    }

    /// First 16 hex digits of SHA-256 over the canonical serialization.
    pub fn digest(&self) -> Result<String> {
        let full = hex::encode(Sha256::digest(self.to_toml()?.as_bytes()));
        Ok(full[..16].to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, arch) in [
            ("teacher_arch", &self.teacher_arch),
            ("generator_arch", &self.generator_arch),
            ("student_arch", &self.student_arch),
        ] {
            if let Err(e) = parse_arch(arch) {
                problems.push(format!("{name}: {e}"));
            }
        }
        for (name, v) in [("seed", self.seed), ("data_seed", self.data_seed)] {
            if v > i64::MAX as u64 {
                problems.push(format!("{name} must be at most {}, got {v}", i64::MAX));
            }
        }
        if self.classes < 2 {
            problems.push(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.num_stages == 0 {
            problems.push("num_stages must be at least 1".into());
        }
        if let Some(total) = self.total_synthetic {
            if self.num_stages > 0 && total % self.num_stages != 0 {
                problems.push(format!(
                    "total_synthetic = {total} does not split into {} equal stages",
                    self.num_stages
                ));
            }
        }
        if self.stage_samples() < 2 {
            problems.push("each stage needs at least 2 samples".into());
        }
        for (name, v) in [
            ("teacher_batch", self.teacher_batch),
            ("generator_batch", self.generator_batch),
            ("student_batch", self.student_batch),
        ] {
            if v < 2 {
                problems.push(format!("{name} must be at least 2, got {v}"));
            }
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            problems.push(format!("eps must be finite and nonnegative, got {}", self.eps));
        }
        for (name, v) in [
            ("teacher_lr", self.teacher_lr),
            ("generator_lr", self.generator_lr),
            ("student_lr", self.student_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("ce_weight", self.ce_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if let Some(t) = self.threshold {
            if !(0.0..1.0).contains(&t) {
                problems.push(format!("threshold must lie in [0, 1), got {t}"));
            }
        }
        match self.task {
            Task::Blobs => {
                if self.blob_dim == 0 || self.train_samples < 2 || self.test_samples == 0 {
                    problems.push("blob task needs blob_dim > 0, train_samples >= 2, test_samples > 0".into());
                }
                if self.blob_informative == 0 || self.blob_informative > self.blob_dim {
                    problems.push(format!(
                        "blob_informative must be in 1..={}, got {}",
                        self.blob_dim, self.blob_informative
                    ));
                }
            }
            Task::Idx => {
                for (name, p) in [
                    ("train_images", &self.train_images),
                    ("train_labels", &self.train_labels),
                    ("test_images", &self.test_images),
                    ("test_labels", &self.test_labels),
                ] {
                    if p.is_none() {
                        problems.push(format!("task = \"idx\" requires {name}"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn stage_samples(&self) -> usize {
        match self.total_synthetic {
            Some(total) if self.num_stages > 0 => total / self.num_stages,
            _ => self.samples_per_stage,
        }
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            seed: self.seed,
            teacher: TeacherConfig {
                arch: parse_arch(&self.teacher_arch)?,
                epochs: self.teacher_epochs,
                batch_size: self.teacher_batch,
                lr: self.teacher_lr as f32,
            },
            generator: GeneratorConfig {
                arch: parse_arch(&self.generator_arch)?,
                noise_dim: self.noise_dim,
                steps: self.generator_steps,
                batch_size: self.generator_batch,
                lr: self.generator_lr as f32,
                weights: GeneratorLossWeights {
                    alpha: self.alpha as f32,
                    beta: self.beta as f32,
                    ce: self.ce_weight as f32,
                },
            },
            stages: StageConfig {
                num_stages: self.num_stages,
                samples_per_stage: self.stage_samples(),
                student_arch: parse_arch(&self.student_arch)?,
                student_epochs: self.student_epochs,
                student_batch: self.student_batch,
                student_lr: self.student_lr as f32,
                eps: PrivacyBudget::new(self.eps)?,
                threshold: self.threshold.map(|t| t as f32),
                finetune_steps: self.finetune_steps,
            },
        })
    }

    /// Loads `(train, test)` data for the configured task.
    pub fn load_data(&self) -> Result<(LabeledData, LabeledData)> {
        match self.task {
            Task::Blobs => {
                let spec = BlobSpec {
                    informative: self.blob_informative,
                    nuisance_std: self.blob_nuisance_std as f32,
                    ..BlobSpec::new(self.classes, self.blob_dim, self.blob_separation as f32)
                };
                let all = data::make_blob_task(
                    &spec,
                    self.train_samples + self.test_samples,
                    self.data_seed,
                )?;
                all.split_at(self.train_samples)
            }
            Task::Idx => {
                let path = |p: &Option<PathBuf>| p.clone().expect("validated");
                let train = data::load_idx(&path(&self.train_images), &path(&self.train_labels))?;
                let test = data::load_idx(&path(&self.test_images), &path(&self.test_labels))?;
                Ok((train.to_labeled(self.classes)?, test.to_labeled(self.classes)?))
            }
        }
    }

    /// The output directory, resolved against `DPDFD_OUTPUT_ROOT` when relative.
    pub fn output_path(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
