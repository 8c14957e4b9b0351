//! Identifiability measurements.

mod corr;
mod info;
mod regress;
mod support;

pub use corr::{isotonic, mcc, pearson, ranks, CorrMode, MccResult};
pub use info::{dci_disentanglement, dci_from_importance, equal_frequency_bins, importance_matrix, lasso, mig, DCI_ALPHA};
pub use regress::block_identifiability_score;
pub use support::{
    jacobian_summary, local_disentanglement_check, GeneratorInverse, LatentEncoder, pairwise_disentanglement_check, BlockCheck,
    DisentanglementVerdict, JacobianSummary, JACOBIAN_POINTS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{extract_structure, EstimatorError, ExtractedStructure, FittedModel};
use crate::flow::FlowError;
use crate::genmodel::{Dataset, GenError, GenerativeSpec};
use crate::numerics::{NumericsError, Tensor};
use crate::structure::{match_rows_up_to_permutation, optimal_assignment, StructureError, StructureMatrix};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("evaluation requires ground-truth latents")]
    MissingLatents,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum StructureVerdict {
    ExactUpToPermutation { permutation: Vec<usize> },
    /// Smallest number of differing entries over all row matchings.
    Mismatch { count: usize },
}

/// Exact match up to row permutation, or the minimal Hamming distance.
pub fn compare_structures(m_hat: &StructureMatrix, m: &StructureMatrix) -> Result<StructureVerdict, EvalError> {
    if let Some(permutation) = match_rows_up_to_permutation(m_hat, m)? {
        return Ok(StructureVerdict::ExactUpToPermutation { permutation });
    }
    let score: Vec<Vec<f64>> = m_hat
        .rows()
        .iter()
        .map(|a| {
            m.rows()
                .iter()
                .map(|b| -(a.iter().zip(b).filter(|(x, y)| x != y).count() as f64))
                .collect()
        })
        .collect();
    let perm = optimal_assignment(&score)?;
    let count = perm.iter().enumerate().map(|(k, &j)| -score[k][j]).sum::<f64>() as usize;
    Ok(StructureVerdict::Mismatch { count })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Threshold for Jacobian-block verdicts (row-normalized magnitudes).
    pub tau_support: f64,
    /// Threshold applied to `M̂`.
    pub tau_structure: f64,
    pub mig_bins: usize,
    pub jacobian_points: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau_support: 0.05,
            tau_structure: 0.5,
            mig_bins: 20,
            jacobian_points: JACOBIAN_POINTS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Spearman MCC over all latent coordinates.
    pub mcc: f64,
    pub mcc_assignment: Vec<usize>,
    /// MCC with isotonic-fit Pearson correlations.
    pub mcc_pearson_fit: f64,
    /// Spearman MCC between `z_A` and `ẑ_A` alone.
    pub mcc_a: f64,
    /// Matched `|corr|` per true coordinate (Spearman).
    pub per_concept: Vec<f64>,
    pub block_r2: f64,
    pub pairwise_checks: Vec<DisentanglementVerdict>,
    pub structure_verdict: StructureVerdict,
    pub mig: Option<f64>,
    pub dci_disentanglement: f64,
    pub tau_support: f64,
    pub tau_structure: f64,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// `(metric, value)` rows for the summary table.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut v = vec![
            ("mcc".to_string(), self.mcc),
            ("mcc_pearson_fit".to_string(), self.mcc_pearson_fit),
            ("mcc_a".to_string(), self.mcc_a),
            ("block_r2".to_string(), self.block_r2),
            (
                "pairwise_pass_fraction".to_string(),
                if self.pairwise_checks.is_empty() {
                    1.0
                } else {
                    self.pairwise_checks.iter().filter(|c| c.pass).count() as f64 / self.pairwise_checks.len() as f64
                },
            ),
            (
                "structure_exact".to_string(),
                f64::from(u8::from(matches!(self.structure_verdict, StructureVerdict::ExactUpToPermutation { .. }))),
            ),
            ("dci_disentanglement".to_string(), self.dci_disentanglement),
        ];
        if let Some(m) = self.mig {
            v.push(("mig".to_string(), m));
        }
        v
    }

    /// CSV `metric,value,config_hash,seed`.
    pub fn summary_csv(&self, config_hash: &str, seed: u64) -> String {
        let mut s = String::from("metric,value,config_hash,seed\n");
        for (k, v) in self.metrics() {
            s.push_str(&format!("{k},{v:.12e},{config_hash},{seed}\n"));
        }
        s
    }
}

/// Full evaluation of `model` against the generator and a dataset carrying
/// ground-truth latents.
pub fn evaluate(
    spec: &GenerativeSpec,
    model: &FittedModel,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let extracted = if spec.n_a > 0 {
        Some(extract_structure(model, opts.tau_structure)?)
    } else {
        None
    };
    evaluate_encoder(spec, model, extracted.as_ref(), data, opts)
}

/// [`evaluate`] for any encoder; `structure` is the estimated `M̂` (ignored
/// when `n_A = 0`, required otherwise).
pub fn evaluate_encoder(
    spec: &GenerativeSpec,
    model: &dyn LatentEncoder,
    structure: Option<&ExtractedStructure>,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let z = data.z.as_ref().ok_or(EvalError::MissingLatents)?;
    let z_hat = model.encode_batch(&data.x)?;
    if !z_hat.all_finite() {
        return Err(EvalError::NonFinite("encoded latents".into()));
    }
    let mut warnings = Vec::new();
    let all = mcc(z, &z_hat, CorrMode::Spearman)?;
    warnings.extend(all.warnings.iter().cloned());
    let fit = mcc(z, &z_hat, CorrMode::PearsonAfterFit)?;
    let n_a = spec.n_a;
    let cols_a: Vec<usize> = (0..n_a).collect();
    let mcc_a = if n_a > 0 {
        mcc(&z.select_cols(&cols_a), &z_hat.select_cols(&cols_a), CorrMode::Spearman)?.score
    } else {
        1.0
    };
    let cols_b: Vec<usize> = (n_a..spec.n()).collect();
    let block_r2 = block_identifiability_score(&z.select_cols(&cols_b), &z_hat.select_cols(&cols_b), opts.seed)?;
    if cols_b.is_empty() {
        warnings.push("no class-independent block; block_r2 defined as 1".into());
    }

    let summary = jacobian_summary(spec, model, opts.jacobian_points, opts.seed)?;
    let mut pairwise_checks = Vec::new();
    for i in 0..spec.u {
        for j in i + 1..spec.u {
            pairwise_checks.push(pairwise_disentanglement_check(&summary, &spec.structure, (i, j), opts.tau_support)?);
        }
    }

    let structure_verdict = if n_a > 0 {
        let extracted = structure.ok_or_else(|| EvalError::Shape("estimated structure required when n_A > 0".into()))?;
        warnings.extend(extracted.warnings.iter().cloned());
        compare_structures(&extracted.matrix, &spec.structure)?
    } else {
        StructureVerdict::ExactUpToPermutation { permutation: Vec::new() }
    };

    let mig = if z.cols() >= 2 && z.rows() >= 100 * opts.mig_bins {
        let (m, w) = mig(z, &z_hat, opts.mig_bins)?;
        warnings.extend(w);
        Some(m)
    } else {
        warnings.push("MIG skipped: needs two or more latents and 100 rows per bin".into());
        None
    };
    let dci = dci_disentanglement(z, &z_hat)?;
    Ok(EvalReport {
        mcc: all.score,
        per_concept: all.matched(),
        mcc_assignment: all.assignment,
        mcc_pearson_fit: fit.score,
        mcc_a,
        block_r2,
        pairwise_checks,
        structure_verdict,
        mig,
        dci_disentanglement: dci,
        tau_support: opts.tau_support,
        tau_structure: opts.tau_structure,
        warnings,
    })
}

/// Convenience: `ẑ` for a model and raw observations.
pub fn encode(model: &FittedModel, x: &Tensor) -> Result<Tensor, EvalError> {
    Ok(model.encode(x)?)
}
