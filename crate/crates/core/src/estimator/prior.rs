use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::numerics::{sigmoid, Tape, Tensor, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Learnable class-conditional Gaussian prior over `ẑ = (ẑ_A, ẑ_B)`.
///
/// For a sample with class vector `c`, concept `i` of `ẑ_A` gets
///
/// ```text
/// S    = Σ_j c_j M̂_ij,  D = max(S, 1)
/// mean = (Σ_j c_j M̂_ij μ_ij + (D - S) μ_i0) / D
/// var  = (Σ_j c_j M̂_ij σ²_ij + (D - S) σ²_i0) / D
/// ```
///
/// with `M̂ = sigmoid(L)`. For binary `M̂` and one-hot `c` this picks the
/// class entry when the class is connected and the base entry otherwise.
///
/// During training the gate is `sigmoid(L + ε)` with logistic noise `ε`
/// drawn once per batch (a binary-concrete relaxation of the hard mask).
/// Without the noise a shrinking gate can be offset by inflating the class
/// variance, so the `ℓ1` penalty would drive every gate towards zero; with
/// it only a gate that is reliably open or shut gives a stable fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPrior {
    pub n_a: usize,
    pub n_b: usize,
    pub u: usize,
    /// When false, `M̂` is held at all ones and `logits` are unused.
    pub gating: bool,
    pub means: Tensor,
    pub log_vars: Tensor,
    pub base_means: Tensor,
    pub base_log_vars: Tensor,
    pub logits: Tensor,
    pub zb_means: Tensor,
    pub zb_log_vars: Tensor,
}

pub(crate) struct PriorVars {
    means: Var,
    log_vars: Var,
    base_means: Var,
    base_log_vars: Var,
    logits: Var,
    zb_means: Var,
    zb_log_vars: Var,
}

impl PriorVars {
    pub(crate) fn all(&self) -> [Var; 7] {
        [
            self.means,
            self.log_vars,
            self.base_means,
            self.base_log_vars,
            self.logits,
            self.zb_means,
            self.zb_log_vars,
        ]
    }
}

impl ConditionalPrior {
    /// Zero means, near-unit variances (seeded jitter of 0.1 in log space)
    /// and zero logits, i.e. `M̂ = 0.5` everywhere.
    pub fn new(n_a: usize, n_b: usize, u: usize, gating: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = Normal::new(0.0, 0.1).expect("std");
        let mut log_vars = Tensor::zeros(n_a, u);
        log_vars.data_mut().iter_mut().for_each(|v| *v = jitter.sample(&mut rng));
        Self {
            n_a,
            n_b,
            u,
            gating,
            means: Tensor::zeros(n_a, u),
            log_vars,
            base_means: Tensor::zeros(1, n_a),
            base_log_vars: Tensor::zeros(1, n_a),
            logits: Tensor::zeros(n_a, u),
            zb_means: Tensor::zeros(1, n_b),
            zb_log_vars: Tensor::zeros(1, n_b),
        }
    }

    /// Standard normal over every coordinate.
    pub fn standard(n_a: usize, n_b: usize, u: usize) -> Self {
        let mut p = Self::new(n_a, n_b, u, false, 0);
        p.log_vars = Tensor::zeros(n_a, u);
        p
    }

    pub fn n(&self) -> usize {
        self.n_a + self.n_b
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.means.clone(),
            self.log_vars.clone(),
            self.base_means.clone(),
            self.base_log_vars.clone(),
            self.logits.clone(),
            self.zb_means.clone(),
            self.zb_log_vars.clone(),
        ]
    }

    pub fn set_params(&mut self, p: &[Tensor]) -> Result<(), EstimatorError> {
        if p.len() != 7 || p.iter().zip(self.params()).any(|(a, b)| a.shape() != b.shape()) {
            return Err(EstimatorError::Config("prior parameter shapes disagree".into()));
        }
        self.means = p[0].clone();
        self.log_vars = p[1].clone();
        self.base_means = p[2].clone();
        self.base_log_vars = p[3].clone();
        self.logits = p[4].clone();
        self.zb_means = p[5].clone();
        self.zb_log_vars = p[6].clone();
        Ok(())
    }

    /// Soft structure `M̂` (all ones without gating).
    pub fn structure_weights(&self) -> Tensor {
        if self.gating {
            self.logits.map(sigmoid)
        } else {
            Tensor::filled(self.n_a, self.u, 1.0)
        }
    }

    pub(crate) fn register(&self, tape: &mut Tape) -> PriorVars {
        PriorVars {
            means: tape.leaf(self.means.clone()),
            log_vars: tape.leaf(self.log_vars.clone()),
            base_means: tape.leaf(self.base_means.clone()),
            base_log_vars: tape.leaf(self.base_log_vars.clone()),
            logits: tape.leaf(self.logits.clone()),
            zb_means: tape.leaf(self.zb_means.clone()),
            zb_log_vars: tape.leaf(self.zb_log_vars.clone()),
        }
    }

    /// `M̂` as a tape node.
    pub(crate) fn weights_on(&self, tape: &mut Tape, v: &PriorVars) -> Var {
        if self.gating {
            tape.sigmoid(v.logits)
        } else {
            tape.constant(Tensor::filled(self.n_a, self.u, 1.0))
        }
    }

    /// Gate used inside the prior: `M̂`, or `sigmoid(L + noise)` when noise is given.
    fn gates_on(&self, tape: &mut Tape, v: &PriorVars, noise: Option<&Tensor>) -> Result<Var, EstimatorError> {
        match noise {
            Some(e) if self.gating => {
                let ev = tape.constant(e.clone());
                let l = tape.add(v.logits, ev)?;
                Ok(tape.sigmoid(l))
            }
            _ => Ok(self.weights_on(tape, v)),
        }
    }

    /// Logistic noise for one batch of gates.
    pub fn sample_gate_noise(&self, rng: &mut impl rand::Rng) -> Tensor {
        let data = (0..self.n_a * self.u)
            .map(|_| {
                let p: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
                (p / (1.0 - p)).ln()
            })
            .collect();
        Tensor::matrix(self.n_a, self.u, data).expect("shape")
    }

    /// Per-row `-log p(ẑ | c)` as a `b x 1` node.
    pub(crate) fn nll_on(
        &self,
        tape: &mut Tape,
        v: &PriorVars,
        z: Var,
        c: Var,
        gate_noise: Option<&Tensor>,
    ) -> Result<Var, EstimatorError> {
        let b = tape.value(z).rows();
        let mut total = tape.constant(Tensor::zeros(b, 1));
        if self.n_a > 0 {
            let za = tape.gather_cols(z, &(0..self.n_a).collect::<Vec<_>>())?;
            let m_hat = self.gates_on(tape, v, gate_noise)?;
            let mt = tape.transpose(m_hat);
            let s = tape.matmul(c, mt)?;
            let d = tape.clamp_min(s, 1.0);
            let w0 = tape.sub(d, s)?;

            let mm = tape.mul(m_hat, v.means)?;
            let mmt = tape.transpose(mm);
            let num = tape.matmul(c, mmt)?;
            let base = tape.mul_row(w0, v.base_means)?;
            let num = tape.add(num, base)?;
            let mean = tape.div(num, d)?;

            let var = tape.exp(v.log_vars);
            let mv = tape.mul(m_hat, var)?;
            let mvt = tape.transpose(mv);
            let num = tape.matmul(c, mvt)?;
            let base_var = tape.exp(v.base_log_vars);
            let base = tape.mul_row(w0, base_var)?;
            let num = tape.add(num, base)?;
            let var = tape.div(num, d)?;

            let diff = tape.sub(za, mean)?;
            let sq = tape.square(diff);
            let quad = tape.div(sq, var)?;
            let quad = tape.scale(quad, 0.5);
            let lv = tape.log(var);
            let lv = tape.scale(lv, 0.5);
            let per = tape.add(quad, lv)?;
            let per = tape.add_scalar(per, HALF_LN_2PI);
            let rows = tape.row_sums(per);
            total = tape.add(total, rows)?;
        }
        if self.n_b > 0 {
            let zb = tape.gather_cols(z, &(self.n_a..self.n()).collect::<Vec<_>>())?;
            let neg_mu = tape.neg(v.zb_means);
            let diff = tape.add_row(zb, neg_mu)?;
            let sq = tape.square(diff);
            let neg_lv = tape.neg(v.zb_log_vars);
            let inv = tape.exp(neg_lv);
            let quad = tape.mul_row(sq, inv)?;
            let quad = tape.scale(quad, 0.5);
            let rows = tape.row_sums(quad);
            let lv = tape.sum(v.zb_log_vars);
            let lv = tape.scale(lv, 0.5);
            let lv = tape.add_scalar(lv, HALF_LN_2PI * self.n_b as f64);
            let rows = tape.add_row(rows, lv)?;
            total = tape.add(total, rows)?;
        }
        Ok(total)
    }
}
