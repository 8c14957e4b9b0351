//! Paired Ours/Base protocols, trial execution and the run record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{minimal_diverse_u, ExperimentConfig};
use super::CliError;
use crate::estimator::{train, EstimatorError, TrainConfig};
use crate::eval::{evaluate, EvalReport, StructureVerdict};
use crate::genmodel::{
    sample_dataset, write_dataset, GenerativeSpec, Intersect, MixingChoice, Nonlinearity, SpecOptions,
};
use crate::structure::StructureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    /// Dense mixing, `z_B` empty: Ours vs an unconstrained baseline.
    Thm2Changing,
    /// Sparse mixing with `z_B`, `2n + 1` classes: Ours vs an unconstrained baseline.
    Prop2AllConcepts,
    /// Ours vs partial sparsity violation (Base(a)) and `n + 1` classes (Base(b)).
    AblationsC2,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Thm2Changing => "thm2-changing",
            Self::Prop2AllConcepts => "prop2-all-concepts",
            Self::AblationsC2 => "ablations-c2",
        }
    }

    pub fn arms(self) -> &'static [Arm] {
        match self {
            Self::Thm2Changing | Self::Prop2AllConcepts => &[Arm::Ours, Arm::Base],
            Self::AblationsC2 => &[Arm::Ours, Arm::BaseA, Arm::BaseB],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Ours,
    Base,
    BaseA,
    BaseB,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Self::Ours => "Ours",
            Self::Base => "Base",
            Self::BaseA => "Base(a)",
            Self::BaseB => "Base(b)",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Self::Ours => "ours",
            Self::Base => "base",
            Self::BaseA => "base_a",
            Self::BaseB => "base_b",
        }
    }
}

/// One planned trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub arm: Arm,
    pub n_a: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl TrialPlan {
    pub fn id(&self) -> String {
        format!("{}_n{}_lam{}_s{}", self.arm.tag(), self.n_a, fmt_lambda(self.lambda), self.seed)
    }
}

pub fn fmt_lambda(l: f64) -> String {
    let s = format!("{l}");
    if s.contains('.') || s.contains('e') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Seed mixing for independent per-trial streams.
fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Generator and estimator settings of one trial.
pub fn protocol(
    study: StudyKind,
    cfg: &ExperimentConfig,
    plan: &TrialPlan,
) -> Result<(SpecOptions, TrainConfig), CliError> {
    let n_a = plan.n_a;
    let spec_seed = derive_seed(&[study as u64, plan.arm as u64, n_a as u64, plan.seed]);
    let train_seed = derive_seed(&[0x7a11, plan.seed, n_a as u64]);
    let t = &cfg.training;
    let ours = |n_b: usize, jac: bool| {
        let mut tc = t.train_config(n_a, n_b, plan.lambda, train_seed);
        tc.gating = true;
        tc.penalize_decoder_jacobian = jac;
        tc
    };
    let base = |n_b: usize| {
        let mut tc = t.train_config(n_a, n_b, 0.0, train_seed);
        tc.gating = false;
        tc.penalize_decoder_jacobian = false;
        tc
    };
    let sparse = |intersect: Intersect, violate: usize| {
        MixingChoice::sparse(Nonlinearity::TanhShift, intersect, violate)
    };
    Ok(match study {
        StudyKind::Thm2Changing => {
            let mut o = SpecOptions::new(n_a, 0, minimal_diverse_u(n_a), spec_seed);
            o.mixing = MixingChoice::Dense;
            match plan.arm {
                Arm::Ours => (o, ours(0, false)),
                _ => {
                    o.require_diversity = false;
                    (o, base(0))
                }
            }
        }
        StudyKind::Prop2AllConcepts | StudyKind::AblationsC2 => {
            let n_b = cfg.study.n_b;
            let n = n_a + n_b;
            let mut o = SpecOptions::new(n_a, n_b, 2 * n + 1, spec_seed);
            o.mixing = sparse(Intersect::All, 0);
            match plan.arm {
                Arm::Ours => (o, ours(n_b, true)),
                Arm::Base => {
                    o.require_diversity = false;
                    o.mixing = sparse(Intersect::None, 0);
                    (o, base(n_b))
                }
                Arm::BaseA => {
                    let k = 1 + (derive_seed(&[0xa, plan.seed, n_a as u64]) % (n / 2).max(1) as u64) as usize;
                    o.mixing = sparse(Intersect::All, k);
                    (o, ours(n_b, true))
                }
                Arm::BaseB => {
                    o.u = n + 1;
                    o.structure = Some(StructureMatrix::ones(n_a, n + 1));
                    o.require_diversity = false;
                    (o, ours(n_b, true))
                }
            }
        }
    })
}

/// Every trial of a study, in canonical order.
pub fn plan_trials(study: StudyKind, cfg: &ExperimentConfig) -> Vec<TrialPlan> {
    let mut plans = Vec::new();
    for &n_a in &cfg.study.concept_counts {
        for &arm in study.arms() {
            let lambdas: Vec<f64> = match arm {
                Arm::Base => vec![0.0],
                Arm::Ours if grid_applies(cfg, n_a) => lambda_set(cfg),
                _ => vec![cfg.study.primary_lambda],
            };
            for &lambda in &lambdas {
                for &seed in &cfg.trials {
                    plans.push(TrialPlan { arm, n_a, lambda, seed });
                }
            }
        }
    }
    plans
}

fn grid_applies(cfg: &ExperimentConfig, n_a: usize) -> bool {
    cfg.study.grid_concept_counts.as_ref().map_or(true, |c| c.contains(&n_a))
}

/// Grid values plus the primary λ, ascending.
fn lambda_set(cfg: &ExperimentConfig) -> Vec<f64> {
    let mut l = cfg.training.lambda_grid.clone();
    l.push(cfg.study.primary_lambda);
    l.sort_by(f64::total_cmp);
    l.dedup();
    l
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed { error: String },
}

/// Per-trial outcome as stored in `trial.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub plan: TrialPlan,
    pub status: TrialStatus,
    pub spec_hash: String,
    pub n_b: usize,
    pub u: usize,
    /// Latent columns whose support-intersection condition fails.
    pub violated: Vec<usize>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Training NLL at the retained epoch.
    pub final_train_nll: Option<f64>,
    pub best_val_nll: Option<f64>,
}

/// Metric values of one trial: every [`EvalReport`] metric plus training
/// and partial-violation quantities.
pub fn trial_metrics(result: &TrialResult, report: &EvalReport) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = report.metrics().into_iter().collect();
    if let Some(v) = result.final_train_nll {
        m.insert("final_train_nll".into(), v);
    }
    if let Some(v) = result.best_val_nll {
        m.insert("best_val_nll".into(), v);
    }
    if let StructureVerdict::Mismatch { count } = report.structure_verdict {
        m.insert("structure_mismatch".into(), count as f64);
    } else {
        m.insert("structure_mismatch".into(), 0.0);
    }
    if !result.violated.is_empty() {
        let kept: Vec<f64> = report
            .per_concept
            .iter()
            .enumerate()
            .filter(|(i, _)| !result.violated.contains(i))
            .map(|(_, v)| *v)
            .collect();
        if !kept.is_empty() {
            m.insert("mcc_excluding_violated".into(), kept.iter().sum::<f64>() / kept.len() as f64);
        }
    }
    m.retain(|_, v| v.is_finite());
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub id: String,
    /// Relative to the run directory.
    pub dir: String,
    pub result: TrialResult,
    pub metrics: BTreeMap<String, f64>,
    pub dataset: Option<String>,
    pub checkpoint: Option<String>,
    pub report: Option<String>,
    /// SHA-256 of every file in the trial directory.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub arm: Arm,
    pub n_a: usize,
    pub lambda: f64,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single trial).
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub n_a: usize,
    /// `None` for the selection by mean MCC over all seeds.
    pub seed: Option<u64>,
    pub lambdas: Vec<f64>,
    pub mcc: Vec<f64>,
    pub selected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub planned: usize,
    pub succeeded: usize,
    pub failed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub study: StudyKind,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub trials: Vec<TrialEntry>,
    pub aggregates: Vec<Aggregate>,
    pub lambda_selection: Vec<LambdaSelection>,
    pub coverage: Coverage,
}

pub const RECORD_FILE: &str = "run_record.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

/// Runs one trial and writes its directory. Generation, training and
/// evaluation errors produce a failed trial rather than an error; only
/// filesystem failures abort.
pub fn run_trial(
    study: StudyKind,
    cfg: &ExperimentConfig,
    plan: &TrialPlan,
    run_dir: &Path,
) -> Result<TrialEntry, CliError> {
    let id = plan.id();
    let rel = format!("trials/{id}");
    let dir = run_dir.join(&rel);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let (opts, tc) = protocol(study, cfg, plan)?;
    let mut result = TrialResult {
        plan: plan.clone(),
        status: TrialStatus::Ok,
        spec_hash: String::new(),
        n_b: opts.n_b,
        u: opts.u,
        violated: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
        final_train_nll: None,
        best_val_nll: None,
    };
    let mut entry = TrialEntry {
        id,
        dir: rel.clone(),
        result: result.clone(),
        metrics: BTreeMap::new(),
        dataset: None,
        checkpoint: None,
        report: None,
        files: BTreeMap::new(),
    };
    let fail = |e: &dyn std::fmt::Display, stage: &str| TrialStatus::Failed { error: format!("{stage}: {e}") };

    match GenerativeSpec::sample(&opts) {
        Err(e) => result.status = fail(&e, "generation"),
        Ok(spec) => {
            write(&dir.join("spec.json"), &pretty(&spec))?;
            result.spec_hash = spec.hash();
            result.violated = spec.intersection_violations();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[0xda7a, opts.seed]));
            match sample_dataset(&spec, cfg.generation.n_samples, cfg.generation.class_mode, &mut rng) {
                Err(e) => result.status = fail(&e, "sampling"),
                Ok(data) => {
                    if cfg.study.save_datasets {
                        write_dataset(&dir.join("data"), &data, &spec, opts.seed, serde_json::Value::Null)
                            .map_err(|e| CliError::Runtime(format!("{}: {e}", entry.id)))?;
                        entry.dataset = Some(format!("{rel}/data"));
                    }
                    match train(&data, &tc) {
                        Err(e @ EstimatorError::Diverged { .. }) => result.status = fail(&e, "training diverged"),
                        Err(e) => result.status = fail(&e, "training"),
                        Ok(model) => {
                            write(&dir.join("model.bin"), &model.to_bytes())?;
                            write(&dir.join("train_log.csv"), model.log_csv().as_bytes())?;
                            entry.checkpoint = Some(format!("{rel}/model.bin"));
                            result.best_epoch = model.best_epoch;
                            result.epochs_run = model.curve.len();
                            if let Some(r) = model.curve.iter().find(|r| r.epoch == model.best_epoch) {
                                result.final_train_nll = Some(r.train_nll);
                                result.best_val_nll = Some(r.val_nll);
                            }
                            match evaluate(&spec, &model, &data, &cfg.evaluation.options(plan.seed)) {
                                Err(e) => result.status = fail(&e, "evaluation"),
                                Ok(report) => {
                                    entry.metrics = trial_metrics(&result, &report);
                                    write(&dir.join("eval.json"), &pretty(&report))?;
                                    entry.report = Some(format!("{rel}/eval.json"));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    write(&dir.join("trial.json"), &pretty(&result))?;
    entry.files = hash_dir(&dir)?;
    entry.result = result;
    Ok(entry)
}

fn hash_dir(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(sub) = stack.pop() {
        let full = dir.join(&sub);
        for entry in fs::read_dir(&full).map_err(|e| io_err(&full, e))? {
            let entry = entry.map_err(|e| io_err(&full, e))?;
            let rel = sub.join(entry.file_name());
            if entry.path().is_dir() {
                stack.push(rel);
            } else {
                let bytes = fs::read(entry.path()).map_err(|e| io_err(&entry.path(), e))?;
                out.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
            }
        }
    }
    Ok(out)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// Mean/SD per (arm, n_A, λ, metric) over successful trials.
pub fn aggregate(trials: &[TrialEntry]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(Arm, usize, u64, String), Vec<f64>> = BTreeMap::new();
    for t in trials.iter().filter(|t| t.result.status == TrialStatus::Ok) {
        let p = &t.result.plan;
        for (k, v) in &t.metrics {
            groups
                .entry((p.arm, p.n_a, p.lambda.to_bits(), k.clone()))
                .or_default()
                .push(*v);
        }
    }
    let mut out: Vec<Aggregate> = groups
        .into_iter()
        .map(|((arm, n_a, l, metric), v)| {
            let (mean, sd) = mean_sd(&v);
            Aggregate {
                arm,
                n_a,
                lambda: f64::from_bits(l),
                metric,
                n: v.len(),
                mean,
                sd,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.n_a, a.arm)
            .cmp(&(b.n_a, b.arm))
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.metric.cmp(&b.metric))
    });
    out
}

/// λ chosen by MCC: per seed (one replication each) and by mean over seeds,
/// at every concept count where Ours ran more than one λ. Ties go to the
/// smaller λ.
pub fn select_lambda(trials: &[TrialEntry]) -> Vec<LambdaSelection> {
    let mut by: BTreeMap<usize, BTreeMap<u64, BTreeMap<u64, f64>>> = BTreeMap::new();
    for t in trials.iter().filter(|t| t.result.plan.arm == Arm::Ours && t.result.status == TrialStatus::Ok) {
        let p = &t.result.plan;
        if let Some(&mcc) = t.metrics.get("mcc") {
            by.entry(p.n_a)
                .or_default()
                .entry(p.seed)
                .or_default()
                .insert(p.lambda.to_bits(), mcc);
        }
    }
    let argmax = |lambdas: &[f64], vals: &[f64]| {
        let mut best = 0;
        for k in 1..vals.len() {
            if vals[k] > vals[best] {
                best = k;
            }
        }
        lambdas[best]
    };
    let mut out = Vec::new();
    for (n_a, seeds) in by {
        let mut all: Vec<f64> = seeds.values().flat_map(|m| m.keys().map(|b| f64::from_bits(*b))).collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        if all.len() < 2 {
            continue;
        }
        let mut sums = vec![Vec::new(); all.len()];
        for (&seed, m) in &seeds {
            if m.len() != all.len() {
                continue;
            }
            let mcc: Vec<f64> = all.iter().map(|l| m[&l.to_bits()]).collect();
            for (k, v) in mcc.iter().enumerate() {
                sums[k].push(*v);
            }
            out.push(LambdaSelection {
                n_a,
                seed: Some(seed),
                selected: argmax(&all, &mcc),
                lambdas: all.clone(),
                mcc,
            });
        }
        if sums[0].is_empty() {
            continue;
        }
        let means: Vec<f64> = sums.iter().map(|v| mean_sd(v).0).collect();
        out.push(LambdaSelection {
            n_a,
            seed: None,
            selected: argmax(&all, &means),
            lambdas: all,
            mcc: means,
        });
    }
    out
}

/// Plans, runs (in a pool of `jobs` workers) and records a study. The
/// record is written last; partial failures are kept as failed trials.
pub fn run_study(study: StudyKind, cfg: &ExperimentConfig, run_dir: &Path, jobs: usize) -> Result<RunRecord, CliError> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let plans = plan_trials(study, cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    let entries: Vec<Result<TrialEntry, CliError>> =
        pool.install(|| plans.par_iter().map(|p| run_trial(study, cfg, p, run_dir)).collect());
    let trials = entries.into_iter().collect::<Result<Vec<_>, _>>()?;
    let record = build_record(study, cfg, trials);
    write(&run_dir.join(RECORD_FILE), &pretty(&record))?;
    Ok(record)
}

pub fn build_record(study: StudyKind, cfg: &ExperimentConfig, trials: Vec<TrialEntry>) -> RunRecord {
    let failed: Vec<String> = trials
        .iter()
        .filter_map(|t| match &t.result.status {
            TrialStatus::Failed { error } => Some(format!("{}: {error}", t.id)),
            TrialStatus::Ok => None,
        })
        .collect();
    RunRecord {
        study,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        coverage: Coverage {
            planned: trials.len(),
            succeeded: trials.len() - failed.len(),
            failed,
        },
        aggregates: aggregate(&trials),
        lambda_selection: select_lambda(&trials),
        trials,
    }
}

/// Reads `run_record.json` and verifies it against the trial files: file
/// hashes, `trial.json` contents, metrics recomputed from `eval.json`, and
/// aggregates recomputed from the trials.
pub fn load_record(run_dir: &Path) -> Result<RunRecord, CliError> {
    let path = run_dir.join(RECORD_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let rec: RunRecord = serde_json::from_str(&text)
        .map_err(|e| CliError::Integrity(format!("{RECORD_FILE} does not parse: {e}")))?;
    if rec.config.hash() != rec.config_hash {
        return Err(CliError::Integrity("config hash does not match the embedded config".into()));
    }
    for t in &rec.trials {
        let dir = run_dir.join(&t.dir);
        for (name, want) in &t.files {
            let f = dir.join(name);
            let bytes = fs::read(&f).map_err(|e| CliError::Integrity(format!("{}/{name}: {e}", t.dir)))?;
            if &sha256_hex(&bytes) != want {
                return Err(CliError::Integrity(format!("{}/{name}: hash mismatch", t.dir)));
            }
        }
        let on_disk = hash_dir(&dir).map_err(|e| CliError::Integrity(e.to_string()))?;
        if let Some(extra) = on_disk.keys().find(|k| !t.files.contains_key(*k)) {
            return Err(CliError::Integrity(format!("{}/{extra}: file not in record", t.dir)));
        }
        let tr: TrialResult = read_json(&dir.join("trial.json"), &t.dir)?;
        if tr != t.result {
            return Err(CliError::Integrity(format!("{}/trial.json disagrees with record", t.dir)));
        }
        let metrics = match &t.report {
            Some(rel) => {
                let report: EvalReport = read_json(&run_dir.join(rel), &t.dir)?;
                trial_metrics(&tr, &report)
            }
            None => BTreeMap::new(),
        };
        if !same_metrics(&metrics, &t.metrics) {
            return Err(CliError::Integrity(format!("{}: metrics do not recompute from eval.json", t.dir)));
        }
    }
    let fresh = build_record(rec.study, &rec.config, rec.trials.clone());
    if !same_aggregates(&fresh.aggregates, &rec.aggregates) {
        return Err(CliError::Integrity("aggregates do not recompute from trials".into()));
    }
    if fresh.lambda_selection != rec.lambda_selection || fresh.coverage != rec.coverage {
        return Err(CliError::Integrity("λ selection or coverage does not recompute from trials".into()));
    }
    Ok(rec)
}

fn same_f64(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

fn same_metrics(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((ka, va), (kb, vb))| ka == kb && same_f64(*va, *vb))
}

fn same_aggregates(a: &[Aggregate], b: &[Aggregate]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.arm == y.arm
                && x.n_a == y.n_a
                && same_f64(x.lambda, y.lambda)
                && x.metric == y.metric
                && x.n == y.n
                && same_f64(x.mean, y.mean)
                && same_f64(x.sd, y.sd)
        })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, trial: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Integrity(format!("{trial}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))
}

impl RunRecord {
    pub fn ok_trials(&self) -> impl Iterator<Item = &TrialEntry> {
        self.trials.iter().filter(|t| t.result.status == TrialStatus::Ok)
    }

    /// Values of `metric` for successful trials of an arm, seed-ordered.
    pub fn values(&self, arm: Arm, n_a: usize, lambda: f64, metric: &str) -> Vec<f64> {
        self.ok_trials()
            .filter(|t| {
                let p = &t.result.plan;
                p.arm == arm && p.n_a == n_a && same_f64(p.lambda, lambda)
            })
            .filter_map(|t| t.metrics.get(metric).copied())
            .collect()
    }

    pub fn aggregate(&self, arm: Arm, n_a: usize, lambda: f64, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.arm == arm && a.n_a == n_a && same_f64(a.lambda, lambda) && a.metric == metric)
    }

    /// λ at which an arm's headline numbers are read.
    pub fn headline_lambda(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Base => 0.0,
            _ => self.config.study.primary_lambda,
        }
    }
}
