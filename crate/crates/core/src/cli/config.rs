//! Single-document JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::estimator::TrainConfig;
use crate::eval::{EvalOptions, JACOBIAN_POINTS};
use crate::genmodel::{ClassMode, MixingChoice, SpecOptions};
use crate::structure::StructureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub n_a: usize,
    pub n_b: usize,
    /// Observation dimension; defaults to `n_A + n_B`.
    pub m: Option<usize>,
    /// Class count; defaults to the smallest count admitting a diverse structure.
    pub u: Option<usize>,
    pub require_diversity: bool,
    /// JSON structure matrix to use instead of sampling one.
    pub structure_file: Option<PathBuf>,
    pub class_mode: ClassMode,
    #[serde(rename = "N")]
    pub n_samples: usize,
    pub seed: u64,
    pub mixing: MixingChoice,
    pub nonzero_means: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_a: 3,
            n_b: 0,
            m: None,
            u: None,
            require_diversity: true,
            structure_file: None,
            class_mode: ClassMode::OneHot,
            n_samples: 10_000,
            seed: 0,
            mixing: MixingChoice::Dense,
            nonzero_means: false,
        }
    }
}

/// Smallest `u >= 2` with `C(u, ⌊u/2⌋) >= n_A`: enough classes for `n_A`
/// pairwise incomparable zero sets.
pub fn minimal_diverse_u(n_a: usize) -> usize {
    let binom = |n: usize, k: usize| (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1));
    (2..).find(|&u| binom(u, u / 2) >= n_a as u128).expect("finite")
}

impl GenerationConfig {
    pub fn class_count(&self) -> usize {
        self.u.unwrap_or_else(|| minimal_diverse_u(self.n_a))
    }

    pub fn spec_options(&self, seed: u64) -> Result<SpecOptions, CliError> {
        let mut opts = SpecOptions::new(self.n_a, self.n_b, self.class_count(), seed);
        opts.m = self.m.unwrap_or(self.n_a + self.n_b);
        opts.require_diversity = self.require_diversity;
        opts.mixing = self.mixing.clone();
        opts.nonzero_means = self.nonzero_means;
        if let Some(path) = &self.structure_file {
            let m = read_structure(path)?;
            opts.u = m.u();
            opts.structure = Some(m);
        }
        Ok(opts)
    }
}

pub fn read_structure(path: &Path) -> Result<StructureMatrix, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda_grid: Vec<f64>,
    pub gating: bool,
    pub penalize_decoder_jacobian: bool,
    pub jacobian_points: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub patience: usize,
    pub depth: usize,
    pub volume_preserving: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::new(1, 0, 0);
        Self {
            lambda_grid: vec![0.1],
            gating: t.gating,
            penalize_decoder_jacobian: t.penalize_decoder_jacobian,
            jacobian_points: t.jacobian_points,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            val_fraction: t.val_fraction,
            patience: t.patience,
            depth: t.depth,
            volume_preserving: t.volume_preserving,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn train_config(&self, n_a: usize, n_b: usize, lambda: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            n_a,
            n_b,
            lambda,
            gating: self.gating,
            penalize_decoder_jacobian: self.penalize_decoder_jacobian,
            jacobian_points: self.jacobian_points,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            val_fraction: self.val_fraction,
            patience: self.patience,
            depth: self.depth,
            volume_preserving: self.volume_preserving,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Metrics written to `summary.csv`; empty means all.
    pub metrics: Vec<String>,
    pub tau_support: f64,
    pub tau_structure: f64,
    pub mig_bins: usize,
    pub jacobian_points: usize,
    /// Extra pairwise checks (all pairs are always checked).
    pub class_pairs: Vec<[usize; 2]>,
    /// Class sets for local disentanglement checks.
    pub class_sets: Vec<Vec<usize>>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let d = EvalOptions::default();
        Self {
            metrics: Vec::new(),
            tau_support: d.tau_support,
            tau_structure: d.tau_structure,
            mig_bins: d.mig_bins,
            jacobian_points: JACOBIAN_POINTS,
            class_pairs: Vec::new(),
            class_sets: Vec::new(),
        }
    }
}

impl EvaluationConfig {
    pub fn options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            tau_support: self.tau_support,
            tau_structure: self.tau_structure,
            mig_bins: self.mig_bins,
            jacobian_points: self.jacobian_points,
            seed,
        }
    }
}

/// Knobs of the `reproduce` protocols. Dimensions, mixing and structure
/// constraints of each arm are fixed by the protocol; `generation.N`,
/// `generation.class_mode` and the training block apply to every arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub concept_counts: Vec<usize>,
    /// Class-independent concepts in the sparse-mixing studies.
    pub n_b: usize,
    /// λ used when comparing Ours against the baselines.
    pub primary_lambda: f64,
    /// Concept counts at which Ours runs the whole λ grid (all when absent).
    pub grid_concept_counts: Option<Vec<usize>>,
    /// Also write each trial's `data.csv`.
    pub save_datasets: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            concept_counts: vec![2, 3, 5],
            n_b: 1,
            primary_lambda: 0.1,
            grid_concept_counts: None,
            save_datasets: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generation: GenerationConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub study: StudyConfig,
    pub trials: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
            study: StudyConfig::default(),
            trials: (0..10).collect(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Input(m));
        if self.trials.is_empty() {
            return bad("trial seed list is empty".into());
        }
        let mut seen = self.trials.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.trials.len() {
            return bad("trial seeds must be distinct".into());
        }
        if self.training.lambda_grid.is_empty() {
            return bad("λ grid is empty".into());
        }
        if let Some(l) = self.training.lambda_grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return bad(format!("λ grid entries must be nonnegative, got {l}"));
        }
        if self.generation.n_samples == 0 {
            return bad("N must be positive".into());
        }
        if let Some(p) = &self.generation.structure_file {
            if !p.exists() {
                return bad(format!("structure file {} does not exist", p.display()));
            }
        }
        if self.study.concept_counts.is_empty() || self.study.concept_counts.contains(&0) {
            return bad("study concept counts must be positive and nonempty".into());
        }
        let known = [
            "mcc",
            "mcc_pearson_fit",
            "mcc_a",
            "block_r2",
            "pairwise_pass_fraction",
            "structure_exact",
            "dci_disentanglement",
            "mig",
        ];
        if let Some(m) = self.evaluation.metrics.iter().find(|m| !known.contains(&m.as_str())) {
            return bad(format!("unknown metric {m:?}"));
        }
        if !(self.evaluation.tau_structure > 0.0 && self.evaluation.tau_structure < 1.0) {
            return bad("tau_structure must lie in (0, 1)".into());
        }
        if !(self.evaluation.tau_support > 0.0) {
            return bad("tau_support must be positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding, with the output directory
    /// blanked so the same study hashes alike wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_json().as_bytes()))
    }

    /// Applies `--seed`, `--trials` and `--out`. `--trials K` makes the seed
    /// list `s..s + K`, starting at `--seed` or the first listed seed.
    pub fn apply_overrides(&mut self, seed: Option<u64>, trials: Option<usize>, out: Option<&Path>) {
        if let Some(s) = seed {
            self.generation.seed = s;
            self.training.seed = s;
        }
        if let Some(k) = trials {
            let start = seed.unwrap_or_else(|| self.trials.first().copied().unwrap_or(0));
            self.trials = (start..start + k as u64).collect();
        }
        if let Some(o) = out {
            self.output_dir = o.to_path_buf();
        }
    }
}
