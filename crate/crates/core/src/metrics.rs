//! CSV metrics. Every row carries the run seed and config digest.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::generator::StepLog;
use crate::pipeline::StageRecord;
use crate::verifier::AuditReport;

pub const TEACHER_CSV: &str = "teacher.csv";
pub const GENERATOR_CSV: &str = "generator.csv";
pub const STAGES_CSV: &str = "stages.csv";
pub const PRIVACY_CSV: &str = "privacy.csv";

/// A CSV row type with a fixed column list, so empty files still get a header.
pub trait CsvRow: Serialize {
    const COLUMNS: &'static [&'static str];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRow {
    pub seed: u64,
    pub config_digest: String,
    pub train_samples: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub checksum: String,
}

impl CsvRow for TeacherRow {
    const COLUMNS: &'static [&'static str] = &[
        "seed",
        "config_digest",
        "train_samples",
        "train_accuracy",
        "test_accuracy",
        "checksum",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRow {
    pub seed: u64,
    pub config_digest: String,
    pub step: usize,
    pub ce_term: f64,
    pub ie_term: f64,
    pub norm_term: f64,
    pub total: f64,
}

impl CsvRow for GeneratorRow {
    const COLUMNS: &'static [&'static str] =
        &["seed", "config_digest", "step", "ce_term", "ie_term", "norm_term", "total"];
}

impl GeneratorRow {
    pub fn from_log(p: &Provenance, log: &StepLog) -> Self {
        Self {
            seed: p.seed,
            config_digest: p.config_digest.clone(),
            step: log.step,
            ce_term: log.terms.ce,
            ie_term: log.terms.ie,
            norm_term: log.terms.norm,
            total: log.terms.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub seed: u64,
    pub config_digest: String,
    pub stage: usize,
    pub eps: f64,
    pub k_mean: f64,
    pub label_agreement: f64,
    pub student_acc: Option<f64>,
    pub distill_loss: f64,
    pub gen_ce: Option<f64>,
    pub gen_ie: Option<f64>,
    pub gen_norm: Option<f64>,
    pub gen_total: Option<f64>,
    pub teacher_queries: usize,
}

impl CsvRow for StageRow {
    const COLUMNS: &'static [&'static str] = &[
        "seed",
        "config_digest",
        "stage",
        "eps",
        "k_mean",
        "label_agreement",
        "student_acc",
        "distill_loss",
        "gen_ce",
        "gen_ie",
        "gen_norm",
        "gen_total",
        "teacher_queries",
    ];
}

impl StageRow {
    pub fn from_record(p: &Provenance, r: &StageRecord) -> Self {
        Self {
            seed: p.seed,
            config_digest: p.config_digest.clone(),
            stage: r.stage,
            eps: r.eps,
            k_mean: r.k_mean,
            label_agreement: r.label_agreement,
            student_acc: r.student_acc,
            distill_loss: r.distill_loss,
            gen_ce: r.gen_terms.map(|t| t.ce),
            gen_ie: r.gen_terms.map(|t| t.ie),
            gen_norm: r.gen_terms.map(|t| t.norm),
            gen_total: r.gen_terms.map(|t| t.total),
            teacher_queries: r.teacher_queries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRow {
    pub seed: u64,
    pub config_digest: String,
    pub eps: f64,
    pub k: usize,
    pub classes: usize,
    pub max_ratio: f64,
    pub bound: f64,
    pub epsilon_effective: f64,
    pub tight: bool,
    pub pass: bool,
    pub witness: String,
}

impl CsvRow for PrivacyRow {
    const COLUMNS: &'static [&'static str] = &[
        "seed",
        "config_digest",
        "eps",
        "k",
        "classes",
        "max_ratio",
        "bound",
        "epsilon_effective",
        "tight",
        "pass",
        "witness",
    ];
}

impl PrivacyRow {
    pub fn from_report(p: &Provenance, r: &AuditReport) -> Self {
        Self {
            seed: p.seed,
            config_digest: p.config_digest.clone(),
            eps: r.epsilon,
            k: r.candidate_size,
            classes: r.num_classes,
            max_ratio: r.max_ratio,
            bound: r.epsilon.exp(),
            epsilon_effective: r.epsilon_effective,
            tight: r.is_tight(),
            pass: r.pass,
            witness: r
                .attained_at
                .map(|w| {
                    format!(
                        "y={} y'={} out={} ({}/{})",
                        w.label, w.other_label, w.outcome, w.branches.0, w.branches.1
                    )
                })
                .unwrap_or_default(),
        }
    }
}

/// Serializes rows (header first) to CSV bytes.
pub fn to_csv<R: CsvRow>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(R::COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Csv(csv::Error::from(e.into_error())))
}

/// Writes the whole file atomically.
pub fn write_csv<R: CsvRow>(path: &Path, rows: &[R]) -> Result<()> {
    fsutil::write_atomic(path, &to_csv(rows)?)
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let bytes = fsutil::read(path)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Stage-versus-accuracy table.
pub fn stage_table(rows: &[StageRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5}  {:>11}  {:>15}  {:>6}  {:>12}",
        "stage", "student_acc", "label_agreement", "k_mean", "distill_loss"
    );
    for r in rows {
        let acc = r
            .student_acc
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:>5}  {:>11}  {:>15.4}  {:>6.3}  {:>12.4}",
            r.stage, acc, r.label_agreement, r.k_mean, r.distill_loss
        );
    }
    out
}
