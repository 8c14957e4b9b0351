//! Command-line experiment harness: `generate`, `check`, `train`,
//! `evaluate`, `reproduce`, `report`.
//!
//! Exit codes: 0 success, 1 assumption or criterion failure, 2 input error,
//! 3 runtime or training error.

pub mod config;
pub mod plot;
pub mod report;
pub mod study;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::estimator::{train, train_from, EstimatorError, FittedModel};
use crate::eval::{
    evaluate, evaluate_encoder, jacobian_summary, local_disentanglement_check, mcc, pairwise_disentanglement_check,
    CorrMode, EvalError, EvalReport, GeneratorInverse, LatentEncoder,
};
use crate::estimator::ExtractedStructure;
use crate::genmodel::{
    conditional_density_distinctness, read_dataset, sample_dataset, write_dataset, Dataset, DatasetMeta, GenError,
    GenerativeSpec, SpecOptions,
};
use crate::structure::{check_structural_diversity, StructureMatrix};

pub use config::ExperimentConfig;
pub use study::{load_record, run_study, Arm, RunRecord, StudyKind};

/// Environment variable overriding `--jobs`.
pub const JOBS_ENV: &str = "CONCEPT_IDENT_JOBS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("integrity failure: {0}")]
    Integrity(String),
    #[error("{0}")]
    Assumption(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Assumption(_) => 1,
            Self::Input(_) | Self::Integrity(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "concept-ident", version, about = "Concept identifiability experiments")]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed for generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of trial seeds, starting at --seed.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Worker threads for trials; CONCEPT_IDENT_JOBS takes precedence.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset (data.csv + meta.json) from the generation block.
    Generate,
    /// Check structural diversity and conditional distinctness of a structure,
    /// spec, or dataset meta.json.
    Check { file: PathBuf },
    /// Fit the estimator for every λ in the grid.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Epochs to run (defaults to the config value).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint against a dataset with ground-truth latents.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "generator_inverse")]
        model: Option<PathBuf>,
        /// Evaluate the exact inverse of the generating mixing instead.
        #[arg(long)]
        generator_inverse: bool,
    },
    /// Run a paired study over concept counts and seeds.
    Reproduce { study: StudyKind },
    /// Verify a run directory and regenerate its summary and plots.
    Report { dir: PathBuf },
}

/// Parses `args` and runs the command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve_jobs(flag: usize) -> Result<usize, CliError> {
    match std::env::var(JOBS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&j| j > 0)
            .ok_or_else(|| CliError::Input(format!("{JOBS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(flag.max(1)),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.trials, cli.out.as_deref());
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn gen_err(e: GenError) -> CliError {
    match e {
        GenError::Io(m) => CliError::Input(m),
        other => CliError::Input(other.to_string()),
    }
}

fn train_err(e: EstimatorError) -> CliError {
    match e {
        EstimatorError::Diverged { epoch, batch, loss } => CliError::Runtime(format!(
            "training diverged at epoch {epoch}, batch {batch} (loss {loss:e}); \
             try a smaller learning rate, a smaller λ, or a shallower flow"
        )),
        EstimatorError::Config(m) => CliError::Input(m),
        other => CliError::Runtime(other.to_string()),
    }
}

fn eval_err(e: EvalError) -> CliError {
    match e {
        EvalError::MissingLatents | EvalError::Shape(_) => CliError::Input(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

pub fn run(cli: &Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Generate => cmd_generate(&load_config(cli)?),
        Command::Check { file } => cmd_check(file),
        Command::Train { data, resume, epochs } => cmd_train(&load_config(cli)?, data, resume.as_deref(), *epochs),
        Command::Evaluate {
            data,
            model,
            generator_inverse,
        } => cmd_evaluate(&load_config(cli)?, data, model.as_deref(), *generator_inverse),
        Command::Reproduce { study } => cmd_reproduce(&load_config(cli)?, *study, resolve_jobs(cli.jobs)?),
        Command::Report { dir } => cmd_report(dir),
    }
}

/// Assumption checks embedded in dataset metadata.
fn spec_checks(spec: &GenerativeSpec) -> Result<serde_json::Value, CliError> {
    let diversity = check_structural_diversity(&spec.structure).map_err(|e| CliError::Input(e.to_string()))?;
    Ok(serde_json::json!({
        "structural_diversity": diversity,
        "failing_rows": diversity.failing_rows(),
        "distinctness": conditional_density_distinctness(spec),
        "intersection_violations": spec.intersection_violations(),
    }))
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<i32, CliError> {
    let g = &cfg.generation;
    let opts = g.spec_options(g.seed)?;
    let spec = GenerativeSpec::sample(&opts).map_err(gen_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed ^ 0xda7a_5eed);
    let data = sample_dataset(&spec, g.n_samples, g.class_mode, &mut rng).map_err(gen_err)?;
    let checks = spec_checks(&spec)?;
    write_dataset(&cfg.output_dir, &data, &spec, g.seed, checks).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "wrote {} rows (m = {}, u = {}, n = {}) to {}",
        data.len(),
        spec.m,
        spec.u,
        spec.n(),
        cfg.output_dir.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct CheckOutput {
    source: &'static str,
    holds: bool,
    structural_diversity: Option<crate::structure::DiversityReport>,
    failing_rows: Vec<usize>,
    distinctness: Option<crate::genmodel::DistinctnessReport>,
    errors: Vec<String>,
}

/// Parses a structure matrix, a generative spec, or a dataset `meta.json`.
fn parse_check_input(text: &str) -> Result<(&'static str, StructureMatrix, Option<GenerativeSpec>), CliError> {
    if let Ok(m) = serde_json::from_str::<StructureMatrix>(text) {
        return Ok(("structure", m, None));
    }
    if let Ok(spec) = serde_json::from_str::<GenerativeSpec>(text) {
        return Ok(("spec", spec.structure.clone(), Some(spec)));
    }
    if let Ok(meta) = serde_json::from_str::<DatasetMeta>(text) {
        return Ok(("dataset-meta", meta.spec.structure.clone(), Some(meta.spec)));
    }
    let why = serde_json::from_str::<StructureMatrix>(text).err().map(|e| e.to_string()).unwrap_or_default();
    Err(CliError::Input(format!(
        "not a structure matrix, generative spec, or dataset meta: {why}"
    )))
}

pub fn cmd_check(file: &Path) -> Result<i32, CliError> {
    let text = fs::read_to_string(file).map_err(|e| CliError::Input(format!("{}: {e}", file.display())))?;
    let (source, m, spec) = parse_check_input(&text)?;
    let mut out = CheckOutput {
        source,
        holds: false,
        structural_diversity: None,
        failing_rows: Vec::new(),
        distinctness: None,
        errors: Vec::new(),
    };
    match check_structural_diversity(&m) {
        Ok(r) => {
            out.failing_rows = r.failing_rows();
            out.structural_diversity = Some(r);
        }
        Err(e) => out.errors.push(e.to_string()),
    }
    // distinctness needs class-conditional parameters: use the generative spec when
    // given, otherwise a generic draw over the same structure
    let spec = match spec {
        Some(s) => Some(s),
        None if out.errors.is_empty() => {
            let mut o = SpecOptions::new(m.n_a(), 0, m.u(), 0);
            o.structure = Some(m.clone());
            GenerativeSpec::sample(&o).map_err(|e| out.errors.push(e.to_string())).ok()
        }
        None => None,
    };
    out.distinctness = spec.as_ref().map(conditional_density_distinctness);
    out.holds = out.errors.is_empty()
        && out.structural_diversity.as_ref().is_some_and(|r| r.holds)
        && out.distinctness.as_ref().is_some_and(|d| d.holds);
    println!("{}", serde_json::to_string_pretty(&out).expect("serializes"));
    if !out.failing_rows.is_empty() {
        eprintln!("structural diversity fails for rows {:?}", out.failing_rows);
    }
    Ok(if out.holds { 0 } else { 1 })
}

fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta), CliError> {
    read_dataset(dir).map_err(|e| CliError::Input(format!("dataset {}: {e}", dir.display())))
}

#[derive(Serialize)]
struct Selection {
    criterion: &'static str,
    lambdas: Vec<f64>,
    scores: Vec<f64>,
    checkpoints: Vec<String>,
    selected: f64,
}

pub fn lambda_dir(l: f64) -> String {
    format!("lambda_{}", study::fmt_lambda(l))
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    resume: Option<&Path>,
    epochs: Option<usize>,
) -> Result<i32, CliError> {
    let (data, meta) = load_dataset(data_dir)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let save = |dir: &Path, model: &FittedModel| -> Result<(), CliError> {
        create_dir(dir)?;
        fs::write(dir.join("model.bin"), model.to_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(dir.join("train_log.csv"), model.log_csv()).map_err(|e| CliError::Runtime(e.to_string()))
    };
    if let Some(ckpt) = resume {
        let bytes = fs::read(ckpt).map_err(|e| CliError::Input(format!("{}: {e}", ckpt.display())))?;
        let model = FittedModel::from_bytes(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", ckpt.display())))?;
        let n = epochs.unwrap_or(cfg.training.epochs);
        let model = train_from(&data, model, n).map_err(train_err)?;
        save(out, &model)?;
        println!("resumed {} for {n} epochs; checkpoint in {}", ckpt.display(), out.display());
        return Ok(0);
    }
    let (n_a, n_b) = (meta.spec.n_a, meta.spec.n_b);
    let mut sel = Selection {
        criterion: if data.z.is_some() { "mcc" } else { "validation_objective" },
        lambdas: Vec::new(),
        scores: Vec::new(),
        checkpoints: Vec::new(),
        selected: f64::NAN,
    };
    for &lambda in &cfg.training.lambda_grid {
        let mut tc = cfg.training.train_config(n_a, n_b, lambda, cfg.training.seed);
        if let Some(e) = epochs {
            tc.epochs = e;
        }
        let model = train(&data, &tc).map_err(train_err)?;
        let dir = out.join(lambda_dir(lambda));
        save(&dir, &model)?;
        let score = match &data.z {
            Some(z) => {
                let z_hat = model.encode(&data.x).map_err(train_err)?;
                mcc(z, &z_hat, CorrMode::Spearman).map_err(eval_err)?.score
            }
            // lower objective is better; negate so that larger wins
            None => -model.curve.iter().find(|r| r.epoch == model.best_epoch).map_or(f64::INFINITY, |r| r.val_nll),
        };
        println!("λ = {}: {} = {score:.4}", study::fmt_lambda(lambda), sel.criterion);
        sel.lambdas.push(lambda);
        sel.scores.push(score);
        sel.checkpoints.push(format!("{}/model.bin", lambda_dir(lambda)));
    }
    let best = (0..sel.scores.len())
        .fold(0, |b, k| if sel.scores[k] > sel.scores[b] { k } else { b });
    sel.selected = sel.lambdas[best];
    write_json(&out.join("selection.json"), &sel)?;
    println!("selected λ = {}", study::fmt_lambda(sel.selected));
    Ok(0)
}

#[derive(Serialize)]
struct LocalChecks {
    pairs: Vec<crate::eval::DisentanglementVerdict>,
    sets: Vec<crate::eval::DisentanglementVerdict>,
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    model_path: Option<&Path>,
    generator_inverse: bool,
) -> Result<i32, CliError> {
    let (data, meta) = load_dataset(data_dir)?;
    if data.z.is_none() {
        return Err(CliError::Input(EvalError::MissingLatents.to_string()));
    }
    let spec = &meta.spec;
    let opts = cfg.evaluation.options(cfg.generation.seed);
    let (report, encoder): (EvalReport, Box<dyn LatentEncoder>) = if generator_inverse {
        let inv = GeneratorInverse::new(spec).map_err(eval_err)?;
        let truth = ExtractedStructure {
            matrix: spec.structure.clone(),
            zero_rows: Vec::new(),
            warnings: Vec::new(),
        };
        (evaluate_encoder(spec, &inv, Some(&truth), &data, &opts).map_err(eval_err)?, Box::new(inv))
    } else {
        let path = model_path.ok_or_else(|| CliError::Input("--model is required".into()))?;
        let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let model = FittedModel::from_bytes(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        (evaluate(spec, &model, &data, &opts).map_err(eval_err)?, Box::new(model))
    };
    let out = &cfg.output_dir;
    create_dir(out)?;
    write_json(&out.join("eval.json"), &report)?;
    let mut csv = report.summary_csv(&cfg.hash(), cfg.generation.seed);
    if !cfg.evaluation.metrics.is_empty() {
        csv = csv
            .lines()
            .enumerate()
            .filter(|(k, l)| *k == 0 || cfg.evaluation.metrics.iter().any(|m| l.starts_with(&format!("{m},"))))
            .map(|(_, l)| format!("{l}\n"))
            .collect();
    }
    fs::write(out.join("summary.csv"), csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    if !cfg.evaluation.class_pairs.is_empty() || !cfg.evaluation.class_sets.is_empty() {
        let summary = jacobian_summary(spec, encoder.as_ref(), opts.jacobian_points, opts.seed).map_err(eval_err)?;
        let mut local = LocalChecks {
            pairs: Vec::new(),
            sets: Vec::new(),
        };
        for p in &cfg.evaluation.class_pairs {
            local.pairs.push(
                pairwise_disentanglement_check(&summary, &spec.structure, (p[0], p[1]), opts.tau_support)
                    .map_err(eval_err)?,
            );
        }
        for s in &cfg.evaluation.class_sets {
            local
                .sets
                .push(local_disentanglement_check(&summary, &spec.structure, s, opts.tau_support).map_err(eval_err)?);
        }
        write_json(&out.join("local_checks.json"), &local)?;
    }
    println!(
        "MCC = {:.4} (pearson-after-fit {:.4}); structure: {}",
        report.mcc,
        report.mcc_pearson_fit,
        serde_json::to_string(&report.structure_verdict).expect("serializes")
    );
    Ok(0)
}

pub fn cmd_reproduce(cfg: &ExperimentConfig, study: StudyKind, jobs: usize) -> Result<i32, CliError> {
    let dir = &cfg.output_dir;
    let rec = run_study(study, cfg, dir, jobs)?;
    report::write_outputs(dir, &rec)?;
    println!(
        "{}: {}/{} trials succeeded; summary in {}",
        study.name(),
        rec.coverage.succeeded,
        rec.coverage.planned,
        dir.join(report::SUMMARY_MD).display()
    );
    if rec.coverage.succeeded == 0 {
        return Err(CliError::Runtime("every trial failed".into()));
    }
    Ok(0)
}

pub fn cmd_report(dir: &Path) -> Result<i32, CliError> {
    let rec = load_record(dir)?;
    report::write_outputs(dir, &rec)?;
    print!("{}", report::summary_markdown(&rec));
    Ok(0)
}
