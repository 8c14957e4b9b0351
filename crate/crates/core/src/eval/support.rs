//! Jacobian-block checks on `ĥ = f̂^{-1} ∘ f`.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corr::{mcc, CorrMode};
use super::EvalError;
use crate::estimator::FittedModel;
use crate::flow::reverse_jacobians;
use crate::genmodel::{sample_dataset, ClassMode, GenerativeSpec, Mixer};
use crate::numerics::{Tape, Tensor, Var};
use crate::structure::StructureMatrix;

/// Default number of Jacobian evaluation points.
pub const JACOBIAN_POINTS: usize = 256;
/// Points used to fix the concept permutation.
const ASSIGNMENT_POINTS: usize = 2048;

/// Entrywise mean of `|D_z ĥ|` and the concept matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianSummary {
    /// Row `k` is estimated coordinate `ẑ_k`, column `t` is true `z_t`.
    pub mean_abs: Tensor,
    /// `assignment[s]` is the estimated coordinate matched to true `z_s`.
    pub assignment: Vec<usize>,
}

impl JacobianSummary {
    /// Row-normalized magnitude of `∂ẑ_{π(s)} / ∂z_t`.
    pub fn normalized(&self, s: usize, t: usize) -> f64 {
        let r = self.assignment[s];
        let row = self.mean_abs.row(r);
        let top = row.iter().fold(0.0_f64, |m, v| m.max(*v));
        if top > 0.0 {
            row[t] / top
        } else {
            0.0
        }
    }

    /// Mean normalized magnitude of the block `π(rows) x cols`.
    pub fn block(&self, rows: &BTreeSet<usize>, cols: &BTreeSet<usize>) -> f64 {
        if rows.is_empty() || cols.is_empty() {
            return 0.0;
        }
        let mut s = 0.0;
        for &r in rows {
            for &c in cols {
                s += self.normalized(r, c);
            }
        }
        s / (rows.len() * cols.len()) as f64
    }
}

/// Anything mapping observations to latent codes on a tape.
pub trait LatentEncoder {
    fn latent_dim(&self) -> usize;
    fn encode_on(&self, tape: &mut Tape, x: Var) -> Result<Var, EvalError>;

    fn encode_batch(&self, x: &Tensor) -> Result<Tensor, EvalError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = self.encode_on(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }
}

impl LatentEncoder for FittedModel {
    fn latent_dim(&self) -> usize {
        self.n()
    }

    fn encode_on(&self, tape: &mut Tape, x: Var) -> Result<Var, EvalError> {
        let vars = self.flow.register(tape);
        Ok(FittedModel::encode_on(self, tape, &vars, x)?.0)
    }

    fn encode_batch(&self, x: &Tensor) -> Result<Tensor, EvalError> {
        Ok(self.encode(x)?)
    }
}

/// The exact inverse `f^{-1}` of a generator's mixing map.
#[derive(Debug, Clone)]
pub struct GeneratorInverse {
    mixer: Mixer,
    n: usize,
}

impl GeneratorInverse {
    pub fn new(spec: &GenerativeSpec) -> Result<Self, EvalError> {
        Ok(Self {
            mixer: spec.mixer()?,
            n: spec.n(),
        })
    }
}

impl LatentEncoder for GeneratorInverse {
    fn latent_dim(&self) -> usize {
        self.n
    }

    fn encode_on(&self, tape: &mut Tape, x: Var) -> Result<Var, EvalError> {
        Ok(self.mixer.inverse_on(tape, x)?)
    }
}

/// Evaluates `|D_z ĥ|` on `points` draws from the generator.
pub fn jacobian_summary(
    spec: &GenerativeSpec,
    model: &dyn LatentEncoder,
    points: usize,
    seed: u64,
) -> Result<JacobianSummary, EvalError> {
    if model.latent_dim() != spec.n() {
        return Err(EvalError::Shape("model and generator latent sizes differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = sample_dataset(spec, points.max(ASSIGNMENT_POINTS), ClassMode::OneHot, &mut rng)?;
    let z = draws.z.expect("generator latents");
    let z_hat = model.encode_batch(&draws.x)?;
    let assignment = mcc(&z, &z_hat, CorrMode::Spearman)?.assignment;

    let mixer = spec.mixer()?;
    let pts = z.select_rows(&(0..points).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let zv = tape.leaf(pts);
    let x = mixer.forward_on(&mut tape, zv)?;
    let zh = model.encode_on(&mut tape, x)?;
    let jacs = reverse_jacobians(&mut tape, zv, zh)?;
    let n = spec.n();
    let mut mean_abs = Tensor::zeros(n, n);
    for j in &jacs {
        for (acc, v) in mean_abs.data_mut().iter_mut().zip(j.data()) {
            *acc += v.abs() / points as f64;
        }
    }
    Ok(JacobianSummary { mean_abs, assignment })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    /// Concepts unique to the class under test.
    pub unique: Vec<usize>,
    /// Concepts they must be disentangled from.
    pub others: Vec<usize>,
    pub magnitude: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementVerdict {
    pub classes: Vec<usize>,
    pub pass: bool,
    /// True when no class has unique concepts, so nothing was asserted.
    pub vacuous: bool,
    pub blocks: Vec<BlockCheck>,
    pub max_magnitude: f64,
}

fn verdict(classes: Vec<usize>, blocks: Vec<BlockCheck>) -> DisentanglementVerdict {
    let max_magnitude = blocks.iter().fold(0.0_f64, |m, b| m.max(b.magnitude));
    DisentanglementVerdict {
        classes,
        pass: blocks.iter().all(|b| b.pass),
        vacuous: blocks.is_empty(),
        blocks,
        max_magnitude,
    }
}

fn check(summary: &JacobianSummary, unique: BTreeSet<usize>, others: BTreeSet<usize>, tau: f64) -> Option<BlockCheck> {
    if unique.is_empty() || others.is_empty() {
        return None;
    }
    let magnitude = summary.block(&unique, &others);
    Some(BlockCheck {
        unique: unique.into_iter().collect(),
        others: others.into_iter().collect(),
        magnitude,
        pass: magnitude < tau,
    })
}

fn validate_classes(m: &StructureMatrix, classes: &[usize]) -> Result<(), EvalError> {
    if let Some(&bad) = classes.iter().find(|&&c| c >= m.u()) {
        return Err(EvalError::Shape(format!("class {bad} out of range (u = {})", m.u())));
    }
    let distinct: BTreeSet<_> = classes.iter().collect();
    if distinct.len() != classes.len() {
        return Err(EvalError::Shape("classes must be distinct".into()));
    }
    Ok(())
}

/// `∂ẑ_{π(A_i \ A_j)} / ∂z_{A_j}` and `∂ẑ_{π(A_j \ A_i)} / ∂z_{A_i}` must have
/// normalized mean magnitude below `tau`.
pub fn pairwise_disentanglement_check(
    summary: &JacobianSummary,
    m: &StructureMatrix,
    pair: (usize, usize),
    tau: f64,
) -> Result<DisentanglementVerdict, EvalError> {
    let (i, j) = pair;
    validate_classes(m, &[i, j])?;
    let (ai, aj) = (m.concepts_of_class(i), m.concepts_of_class(j));
    let blocks = [
        check(summary, ai.difference(&aj).copied().collect(), aj.clone(), tau),
        check(summary, aj.difference(&ai).copied().collect(), ai.clone(), tau),
    ];
    Ok(verdict(vec![i, j], blocks.into_iter().flatten().collect()))
}

/// For every `i` in `classes`, `∂ẑ_{π(A_i \ A_{I\i})} / ∂z_{A_{I\i}}` must have
/// normalized mean magnitude below `tau`.
pub fn local_disentanglement_check(
    summary: &JacobianSummary,
    m: &StructureMatrix,
    classes: &[usize],
    tau: f64,
) -> Result<DisentanglementVerdict, EvalError> {
    if classes.len() < 2 {
        return Err(EvalError::Shape("local check needs at least two classes".into()));
    }
    validate_classes(m, classes)?;
    let mut blocks = Vec::new();
    for &i in classes {
        let rest: BTreeSet<usize> = classes
            .iter()
            .filter(|&&k| k != i)
            .flat_map(|&k| m.concepts_of_class(k))
            .collect();
        let unique: BTreeSet<usize> = m.concepts_of_class(i).difference(&rest).copied().collect();
        blocks.extend(check(summary, unique, rest, tau));
    }
    Ok(verdict(classes.to_vec(), blocks))
}
