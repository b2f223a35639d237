//! `dpdfd` command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::config::{self, ExperimentConfig};
use crate::error::{Error, Result};
use crate::label_privacy::{PrivacyBudget, ThresholdRule};
use crate::metrics::{
    self, GeneratorRow, PrivacyRow, Provenance, StageRow, TeacherRow, GENERATOR_CSV, PRIVACY_CSV,
    STAGES_CSV, TEACHER_CSV,
};
use crate::nn::{checkpoint, train, Model};
use crate::pipeline::{self, PrivateStore};
use crate::tensor::ProbVector;
use crate::verifier::{self, AuditReport, StatisticalOptions};

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const FINAL_GENERATOR_CKPT: &str = "generator_final.ckpt";

#[derive(Debug, Parser)]
#[command(name = "dpdfd", version, about = "Data-free distillation with label-private teacher queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the teacher on the private dataset.
    TrainTeacher(ConfigArg),
    /// Train the generator against a saved teacher.
    TrainGenerator(ConfigArg),
    /// Run every distillation stage, training missing checkpoints first.
    Distill(ConfigArg),
    /// Audit the label mechanism's likelihood-ratio bound.
    VerifyPrivacy(VerifyArgs),
    /// Print the stage-versus-accuracy table of a finished run.
    Report(ConfigArg),
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Comma-separated privacy budgets.
    #[arg(long, value_delimiter = ',', required = true)]
    eps: Vec<f64>,
    /// Inclusive candidate-set size range, `lo:hi`.
    #[arg(long, value_parser = parse_range)]
    k_range: (usize, usize),
    #[arg(long)]
    classes: usize,
    /// Also run a Monte Carlo audit with this many draws per label.
    #[arg(long)]
    trials: Option<usize>,
    /// Provenance and output directory come from this config when given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV destination; defaults to `privacy.csv` in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    let lo: usize = lo.trim().parse().map_err(|e| format!("{lo:?}: {e}"))?;
    let hi: usize = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
    if lo > hi {
        return Err(format!("empty range {lo}:{hi}"));
    }
    Ok((lo, hi))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::TrainTeacher(a) => train_teacher_cmd(&load(&a.config)?).map(|_| 0),
        Command::TrainGenerator(a) => train_generator_cmd(&load(&a.config)?).map(|_| 0),
        Command::Distill(a) => distill_cmd(&load(&a.config)?).map(|_| 0),
        Command::VerifyPrivacy(a) => verify_cmd(&a),
        Command::Report(a) => report_cmd(&load(&a.config)?).map(|_| 0),
    }
}

/// A loaded config with its resolved output directory.
struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    provenance: Provenance,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn load(path: &Path) -> Result<Run> {
    let cfg = ExperimentConfig::load(path)?;
    let out = cfg.output_path();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(Run {
        provenance: Provenance {
            seed: cfg.seed,
            config_digest: cfg.digest()?,
        },
        out,
        cfg,
    })
}

fn train_teacher_cmd(run: &Run) -> Result<Model> {
    let (train_data, test_data) = run.cfg.load_data()?;
    let pipe = run.cfg.pipeline()?;
    let store = PrivateStore::new(train_data);
    let teacher = pipeline::train_teacher(&store, &pipe.teacher, pipe.seed)?;
    let private = store.read();
    let train_accuracy = train::accuracy(&teacher, &private.features, &private.labels)?;
    let test_accuracy = train::accuracy(&teacher, &test_data.features, &test_data.labels)?;
    checkpoint::save(&teacher, &run.path(TEACHER_CKPT))?;
    metrics::write_csv(
        &run.path(TEACHER_CSV),
        &[TeacherRow {
            seed: run.provenance.seed,
            config_digest: run.provenance.config_digest.clone(),
            train_samples: private.len(),
            train_accuracy,
            test_accuracy,
            checksum: teacher.checksum(),
        }],
    )?;
    println!(
        "teacher: train accuracy {train_accuracy:.4}, test accuracy {test_accuracy:.4} -> {}",
        run.path(TEACHER_CKPT).display()
    );
    Ok(teacher)
}

fn load_matching(path: &Path, expected: &ExpectedShape) -> Result<Model> {
    let model = checkpoint::load(path)?;
    if model.specs() != expected.arch || model.input_dim() != expected.input_dim {
        return Err(Error::Checkpoint(format!(
            "{} does not match the configured {} architecture; retrain it",
            path.display(),
            expected.role
        )));
    }
    Ok(model)
}

struct ExpectedShape {
    role: &'static str,
    arch: Vec<crate::nn::LayerSpec>,
    input_dim: usize,
}

fn data_dim(cfg: &ExperimentConfig) -> Result<usize> {
    match cfg.task {
        config::Task::Blobs => Ok(cfg.blob_dim),
        config::Task::Idx => Ok(cfg.load_data()?.0.dim()),
    }
}

fn saved_teacher(run: &Run) -> Result<Model> {
    let path = run.path(TEACHER_CKPT);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "{} not found; run train-teacher first",
            path.display()
        )));
    }
    load_matching(
        &path,
        &ExpectedShape {
            role: "teacher",
            arch: run.cfg.pipeline()?.teacher.arch,
            input_dim: data_dim(&run.cfg)?,
        },
    )
}

fn train_generator_cmd(run: &Run) -> Result<Model> {
    let teacher = saved_teacher(run)?;
    let pipe = run.cfg.pipeline()?;
    let (generator, log) = pipeline::pretrain_generator(&teacher, &pipe.generator, pipe.seed)?;
    checkpoint::save(&generator, &run.path(GENERATOR_CKPT))?;
    let rows: Vec<GeneratorRow> = log
        .iter()
        .map(|s| GeneratorRow::from_log(&run.provenance, s))
        .collect();
    metrics::write_csv(&run.path(GENERATOR_CSV), &rows)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "generator: loss {:.4} -> {:.4} over {} steps -> {}",
            first.terms.total,
            last.terms.total,
            log.len(),
            run.path(GENERATOR_CKPT).display()
        );
    }
    Ok(generator)
}

fn distill_cmd(run: &Run) -> Result<()> {
    let teacher = if run.path(TEACHER_CKPT).exists() {
        saved_teacher(run)?
    } else {
        train_teacher_cmd(run)?
    };
    let pipe = run.cfg.pipeline()?;
    let generator = if run.path(GENERATOR_CKPT).exists() {
        load_matching(
            &run.path(GENERATOR_CKPT),
            &ExpectedShape {
                role: "generator",
                arch: pipe.generator.arch.clone(),
                input_dim: pipe.generator.noise_dim,
            },
        )?
    } else {
        train_generator_cmd(run)?
    };
    let (_, test_data) = run.cfg.load_data()?;
    let outcome = pipeline::distill(&teacher, generator, &pipe, Some(&test_data))?;
    checkpoint::save(&outcome.student, &run.path(STUDENT_CKPT))?;
    checkpoint::save(&outcome.generator, &run.path(FINAL_GENERATOR_CKPT))?;
    let rows: Vec<StageRow> = outcome
        .records
        .iter()
        .map(|r| StageRow::from_record(&run.provenance, r))
        .collect();
    metrics::write_csv(&run.path(STAGES_CSV), &rows)?;
    print!("{}", metrics::stage_table(&rows));
    println!(
        "{} synthetic samples, {} private label releases -> {}",
        outcome.total_synthetic,
        outcome.mechanism_invocations,
        run.path(STUDENT_CKPT).display()
    );
    Ok(())
}

fn report_cmd(run: &Run) -> Result<()> {
    let rows: Vec<StageRow> = metrics::read_csv(&run.path(STAGES_CSV))?;
    print!("{}", metrics::stage_table(&rows));
    let teacher_path = run.path(TEACHER_CSV);
    if teacher_path.exists() {
        let teacher: Vec<TeacherRow> = metrics::read_csv(&teacher_path)?;
        if let Some(t) = teacher.last() {
            println!("teacher test accuracy: {:.4}", t.test_accuracy);
            if let Some(acc) = rows.last().and_then(|r| r.student_acc) {
                println!(
                    "final student / teacher: {:.4}",
                    acc / t.test_accuracy.max(f64::MIN_POSITIVE)
                );
            }
        }
    }
    Ok(())
}

/// Student prediction whose candidate set is exactly `{0, .., k-1}`.
fn prediction_with_candidates(k: usize, classes: usize) -> ProbVector {
    let mut p = vec![0.0f32; classes];
    for v in &mut p[..k] {
        *v = 1.0 / k as f32;
    }
    ProbVector::new(p).expect("valid distribution")
}

fn verify_cmd(args: &VerifyArgs) -> Result<i32> {
    let (lo, hi) = args.k_range;
    if lo < 2 || hi > args.classes {
        return Err(Error::InvalidArgument(format!(
            "k-range {lo}:{hi} must lie within 2:{}",
            args.classes
        )));
    }
    let (provenance, out_dir) = match &args.config {
        Some(path) => {
            let run = load(path)?;
            (run.provenance, run.out)
        }
        None => {
            let key = format!("{:?} {lo}:{hi} {} {:?}", args.eps, args.classes, args.trials);
            let digest = hex::encode(Sha256::digest(key.as_bytes()));
            (
                Provenance {
                    seed: 0,
                    config_digest: digest[..16].to_string(),
                },
                config::resolve_output(Path::new("")),
            )
        }
    };
    let mut reports: Vec<AuditReport> = Vec::new();
    for &e in &args.eps {
        let eps = PrivacyBudget::new(e)?;
        for k in lo..=hi {
            reports.push(verifier::exact_audit(k, args.classes, eps)?);
        }
    }
    println!(
        "{:>8}  {:>3}  {:>14}  {:>14}  {:>5}  {:>5}",
        "eps", "k", "max_ratio", "e^eps", "tight", "pass"
    );
    for r in &reports {
        println!(
            "{:>8.4}  {:>3}  {:>14.8}  {:>14.8}  {:>5}  {:>5}",
            r.epsilon,
            r.candidate_size,
            r.max_ratio,
            r.epsilon.exp(),
            r.is_tight(),
            r.pass
        );
    }
    let mut ok = reports.iter().all(|r| r.pass);
    if let Some(trials) = args.trials {
        let rule = ThresholdRule::new(args.classes);
        for &e in &args.eps {
            let eps = PrivacyBudget::new(e)?;
            for k in lo..=hi {
                let y_s = prediction_with_candidates(k, args.classes);
                let opts = StatisticalOptions::new(trials, provenance.seed ^ k as u64);
                let r = verifier::statistical_audit_selective(&y_s, &rule, eps, &opts)?;
                println!(
                    "monte carlo eps {:.4} k {k}: empirical max ratio {:.4}, {}",
                    r.epsilon,
                    r.max_ratio,
                    if r.pass { "consistent" } else { "VIOLATION" }
                );
                ok &= r.pass;
            }
        }
    }
    let path = match &args.out {
        Some(p) => p.clone(),
        None => {
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            out_dir.join(PRIVACY_CSV)
        }
    };
    let rows: Vec<PrivacyRow> = reports
        .iter()
        .map(|r| PrivacyRow::from_report(&provenance, r))
        .collect();
    metrics::write_csv(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(if ok { 0 } else { 1 })
}
