//! Regularized maximum-likelihood estimation of `(f̂, p(ẑ | c), M̂)`.

mod prior;
mod train;

pub use prior::ConditionalPrior;
pub use train::{train, train_from, EpochRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{read_bundle, write_bundle, BundleError, FlowConfig, FlowError, FlowModel, LayerVars};
use crate::genmodel::orthonormal_columns;
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::structure::{StructureError, StructureMatrix};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("training error: {0}")]
    Training(#[from] NumericsError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of class-dependent latent coordinates.
    pub n_a: usize,
    /// Number of class-independent latent coordinates.
    pub n_b: usize,
    pub lambda: f64,
    /// Learn `M̂`; without it `M̂` is fixed to ones and unpenalized.
    pub gating: bool,
    /// Add the decoder Jacobian `ℓ1` term (weighted by `lambda`) to the objective.
    pub penalize_decoder_jacobian: bool,
    /// Points per batch at which the decoder Jacobian is evaluated.
    pub jacobian_points: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub depth: usize,
    pub volume_preserving: bool,
}

impl TrainConfig {
    pub fn new(n_a: usize, n_b: usize, seed: u64) -> Self {
        Self {
            n_a,
            n_b,
            lambda: 0.1,
            gating: true,
            penalize_decoder_jacobian: false,
            jacobian_points: 8,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            seed,
            val_fraction: 0.1,
            patience: 0,
            depth: 6,
            volume_preserving: false,
        }
    }

    /// No structure: `lambda = 0`, no gating, no Jacobian penalty.
    pub fn baseline(n_a: usize, n_b: usize, seed: u64) -> Self {
        Self {
            lambda: 0.0,
            gating: false,
            ..Self::new(n_a, n_b, seed)
        }
    }

    pub fn n(&self) -> usize {
        self.n_a + self.n_b
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::Config(m.to_string()));
        if self.n() == 0 {
            return bad("latent dimension must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a nonnegative number");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.depth == 0 {
            return bad("epochs, batch size and depth must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if self.penalize_decoder_jacobian && self.jacobian_points == 0 {
            return bad("decoder Jacobian penalty needs at least one point");
        }
        Ok(())
    }

    pub(crate) fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            depth: self.depth,
            volume_preserving: self.volume_preserving,
            ..FlowConfig::estimator(self.n(), self.seed)
        }
    }
}

/// Fixed linear map `R^m -> R^n` with orthonormal rows, seeded; identity
/// when `m == n`.
pub fn reduce_dimension_matrix(m: usize, n: usize, seed: u64) -> Result<Tensor, EstimatorError> {
    if m < n {
        return Err(EstimatorError::Config(format!(
            "cannot reduce {m} observed dimensions to {n} latents"
        )));
    }
    if m == n {
        return Ok(Tensor::identity(n));
    }
    Ok(orthonormal_columns(m, n, seed ^ 0x5eed_0f_u64).transpose())
}

/// Projects `N x m` observations to `N x n`.
pub fn reduce_dimension(x: &Tensor, n: usize, seed: u64) -> Result<Tensor, EstimatorError> {
    let p = reduce_dimension_matrix(x.cols(), n, seed)?;
    Ok(x.matmul_t(&p)?)
}

/// Loss terms averaged over a batch. Both penalties are per-entry means, so
/// one `lambda` means the same thing for every `n_A`, `u` and `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    /// `‖M̂‖₁ / (n_A u)`.
    pub l1_m: f64,
    /// `‖D_ẑ f̂‖₁ / n²`, averaged over the Jacobian points.
    pub jacobian_l1: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub flow: FlowModel,
    pub prior: ConditionalPrior,
    /// `n x m` projection applied before the flow.
    pub projection: Tensor,
    pub config: TrainConfig,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub(crate) struct ModelVars {
    pub flow: Vec<LayerVars>,
    pub prior: prior::PriorVars,
}

impl ModelVars {
    pub(crate) fn params(&self) -> Vec<Var> {
        let mut v = FlowModel::param_vars(&self.flow);
        v.extend(self.prior.all());
        v
    }
}

impl FittedModel {
    /// Untrained model for `m`-dimensional observations and `u` classes.
    pub fn init(config: &TrainConfig, m: usize, u: usize) -> Result<Self, EstimatorError> {
        config.validate()?;
        Ok(Self {
            flow: FlowModel::new(config.flow_config())?,
            prior: ConditionalPrior::new(config.n_a, config.n_b, u, config.gating, config.seed ^ 0xa11c_e5),
            projection: reduce_dimension_matrix(m, config.n(), config.seed)?,
            config: config.clone(),
            curve: Vec::new(),
            best_epoch: 0,
        })
    }

    /// Assembles a model from given components (e.g. an exact inverse of a
    /// known generator).
    pub fn from_parts(flow: FlowModel, prior: ConditionalPrior, projection: Tensor, config: TrainConfig) -> Result<Self, EstimatorError> {
        if flow.dim() != prior.n() || projection.rows() != flow.dim() {
            return Err(EstimatorError::Config("flow, prior and projection dimensions disagree".into()));
        }
        Ok(Self {
            flow,
            prior,
            projection,
            config,
            curve: Vec::new(),
            best_epoch: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.flow.dim()
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.flow.params();
        p.extend(self.prior.params());
        p
    }

    pub fn set_params(&mut self, p: &[Tensor]) -> Result<(), EstimatorError> {
        let k = self.flow.params().len();
        if p.len() < k {
            return Err(EstimatorError::Config("too few parameters".into()));
        }
        self.flow.set_params(&p[..k])?;
        self.prior.set_params(&p[k..])
    }

    pub(crate) fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            flow: self.flow.register(tape),
            prior: self.prior.register(tape),
        }
    }

    /// Records `ẑ = f̂^{-1}(P x)` and the inverse log-determinant.
    pub(crate) fn encode_on(&self, tape: &mut Tape, vars: &[LayerVars], x: Var) -> Result<(Var, Var), EstimatorError> {
        let pt = tape.constant(self.projection.transpose());
        let y = tape.matmul(x, pt)?;
        Ok(self.flow.inverse_on(tape, vars, y)?)
    }

    /// Latent codes `ẑ` for rows of `x`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor, EstimatorError> {
        let mut tape = Tape::new();
        let vars = self.flow.register(&mut tape);
        let xv = tape.constant(x.clone());
        let (z, _) = self.encode_on(&mut tape, &vars, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Records the objective for a batch and returns `(total, breakdown)`.
    /// `gate_noise` perturbs the structure gates (training only).
    pub(crate) fn objective_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: &Tensor,
        c: &Tensor,
        gate_noise: Option<&Tensor>,
    ) -> Result<(Var, LossBreakdown), EstimatorError> {
        if x.cols() != self.projection.cols() || c.cols() != self.prior.u || x.rows() != c.rows() {
            return Err(EstimatorError::Config(format!(
                "batch is {}x{} / {}x{}, model expects m={} and u={}",
                x.rows(),
                x.cols(),
                c.rows(),
                c.cols(),
                self.projection.cols(),
                self.prior.u
            )));
        }
        let xv = tape.constant(x.clone());
        let cv = tape.constant(c.clone());
        let (z, log_det) = self.encode_on(tape, &vars.flow, xv)?;
        let prior_nll = self.prior.nll_on(tape, &vars.prior, z, cv, gate_noise)?;
        let per = tape.sub(prior_nll, log_det)?;
        let nll = tape.mean(per);
        let mut total = nll;
        let mut l1_m = 0.0;
        let lambda = self.config.lambda;
        if self.prior.gating && self.prior.n_a > 0 {
            let w = self.prior.weights_on(tape, &vars.prior);
            let s = tape.sum(w);
            let s = tape.scale(s, 1.0 / (self.prior.n_a * self.prior.u) as f64);
            l1_m = tape.scalar(s);
            if lambda > 0.0 {
                let pen = tape.scale(s, lambda);
                total = tape.add(total, pen)?;
            }
        }
        let mut jacobian_l1 = 0.0;
        if self.config.penalize_decoder_jacobian {
            let k = self.config.jacobian_points.min(x.rows());
            let n = self.n();
            let xk = tape.constant(x.select_rows(&(0..k).collect::<Vec<_>>()));
            let (zp, _) = self.encode_on(tape, &vars.flow, xk)?;
            let mut dirs = Tensor::zeros(k * n, n);
            for p in 0..k {
                for a in 0..n {
                    dirs.set(p * n + a, a, 1.0);
                }
            }
            let dv = tape.constant(dirs);
            let (_, dx) = self.flow.forward_tangent_on(tape, &vars.flow, zp, dv)?;
            let a = tape.abs(dx);
            let s = tape.sum(a);
            let s = tape.scale(s, 1.0 / (k * n * n) as f64);
            jacobian_l1 = tape.scalar(s);
            if lambda > 0.0 {
                let pen = tape.scale(s, lambda);
                total = tape.add(total, pen)?;
            }
        }
        let breakdown = LossBreakdown {
            nll: tape.scalar(nll),
            l1_m,
            jacobian_l1,
            total: tape.scalar(total),
        };
        if !breakdown.total.is_finite() {
            return Err(EstimatorError::Diverged {
                epoch: 0,
                batch: 0,
                loss: breakdown.total,
            });
        }
        Ok((total, breakdown))
    }

    /// Noise-free objective on one batch and its gradient, ordered as
    /// [`FittedModel::params`].
    pub fn objective_gradient(&self, x: &Tensor, c: &Tensor) -> Result<(f64, Vec<Tensor>), EstimatorError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let (total, parts) = self.objective_on(&mut tape, &vars, x, c, None)?;
        let mut grads = tape.backward(total)?;
        Ok((parts.total, vars.params().into_iter().map(|v| grads.take(v)).collect()))
    }

    /// Mean objective over `(x, c)`, evaluated in chunks.
    pub fn loss(&self, x: &Tensor, c: &Tensor) -> Result<LossBreakdown, EstimatorError> {
        let rows = x.rows();
        if rows == 0 {
            return Err(EstimatorError::Config("empty batch".into()));
        }
        let chunk = 2048;
        let mut acc = LossBreakdown {
            nll: 0.0,
            l1_m: 0.0,
            jacobian_l1: 0.0,
            total: 0.0,
        };
        let mut start = 0;
        while start < rows {
            let end = (start + chunk).min(rows);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let vars = self.register(&mut tape);
            let (_, part) = self.objective_on(&mut tape, &vars, &x.select_rows(&idx), &c.select_rows(&idx), None)?;
            let w = (end - start) as f64 / rows as f64;
            acc.nll += w * part.nll;
            acc.jacobian_l1 += w * part.jacobian_l1;
            acc.l1_m = part.l1_m;
            start = end;
        }
        let lambda = self.config.lambda;
        let reg = if self.prior.gating { acc.l1_m } else { 0.0 }
            + if self.config.penalize_decoder_jacobian { acc.jacobian_l1 } else { 0.0 };
        acc.total = acc.nll + lambda * reg;
        Ok(acc)
    }

    /// Checkpoint bundle: JSON header (configuration, prior shapes, loss
    /// curve without wall times) plus flow, prior and projection values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let curve: Vec<serde_json::Value> = self
            .curve
            .iter()
            .map(|r| serde_json::json!([r.epoch, r.train_nll, r.val_nll, r.l1_m]))
            .collect();
        let header = serde_json::json!({
            "kind": "fitted",
            "config": self.config,
            "flow": self.flow.config(),
            "prior": {"n_A": self.prior.n_a, "n_B": self.prior.n_b, "u": self.prior.u, "gating": self.prior.gating},
            "projection": [self.projection.rows(), self.projection.cols()],
            "best_epoch": self.best_epoch,
            "curve": curve,
        });
        let mut payload = self.flow.flat_params();
        for t in self.prior.params() {
            payload.extend_from_slice(t.data());
        }
        payload.extend_from_slice(self.projection.data());
        write_bundle(&header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EstimatorError> {
        let (header, payload) = read_bundle(bytes)?;
        let hdr = |e: serde_json::Error| EstimatorError::Bundle(BundleError::Header(e.to_string()));
        if header["kind"] != "fitted" {
            return Err(BundleError::Header("not a fitted-model bundle".into()).into());
        }
        let config: TrainConfig = serde_json::from_value(header["config"].clone()).map_err(hdr)?;
        let flow_cfg: FlowConfig = serde_json::from_value(header["flow"].clone()).map_err(hdr)?;
        let get = |k: &str| header["prior"][k].as_u64().map(|v| v as usize);
        let (n_a, n_b, u) = match (get("n_A"), get("n_B"), get("u")) {
            (Some(a), Some(b), Some(u)) => (a, b, u),
            _ => return Err(BundleError::Header("prior dimensions missing".into()).into()),
        };
        let gating = header["prior"]["gating"].as_bool().unwrap_or(true);
        let (pr, pc): (usize, usize) = serde_json::from_value(header["projection"].clone()).map_err(hdr)?;
        let mut flow = FlowModel::new(flow_cfg)?;
        let nf = flow.flat_params().len();
        let mut prior = ConditionalPrior::new(n_a, n_b, u, gating, 0);
        let shapes: Vec<usize> = prior.params().iter().map(Tensor::len).collect();
        let need = nf + shapes.iter().sum::<usize>() + pr * pc;
        if payload.len() != need {
            return Err(BundleError::Truncated.into());
        }
        flow.set_flat_params(&payload[..nf])?;
        let mut off = nf;
        let mut tensors = Vec::new();
        for (t, len) in prior.params().iter().zip(shapes) {
            tensors.push(Tensor::matrix(t.rows(), t.cols(), payload[off..off + len].to_vec())?);
            off += len;
        }
        prior.set_params(&tensors)?;
        let projection = Tensor::matrix(pr, pc, payload[off..].to_vec())?;
        let curve = header["curve"]
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|r| {
                        Some(EpochRecord {
                            epoch: r[0].as_u64()? as usize,
                            train_nll: r[1].as_f64()?,
                            val_nll: r[2].as_f64()?,
                            l1_m: r[3].as_f64()?,
                            wall_ms: 0,
                        })
                    })
                    .collect()
            })
            .unwrap_or_default();
        Ok(Self {
            flow,
            prior,
            projection,
            config,
            curve,
            best_epoch: header["best_epoch"].as_u64().unwrap_or(0) as usize,
        })
    }

    /// Training log as CSV `epoch,train_nll,val_nll,l1_M,wall_ms`.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_nll,val_nll,l1_M,wall_ms\n");
        for r in &self.curve {
            s.push_str(&format!(
                "{},{:.10e},{:.10e},{:.10e},{}\n",
                r.epoch, r.train_nll, r.val_nll, r.l1_m, r.wall_ms
            ));
        }
        s
    }
}

/// Binarized `M̂` plus any rows that came out empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedStructure {
    pub matrix: StructureMatrix,
    pub zero_rows: Vec<usize>,
    pub warnings: Vec<String>,
}

/// `M̂_ij > tau` (strict). Empty rows are reported, not repaired.
pub fn extract_structure(model: &FittedModel, tau: f64) -> Result<ExtractedStructure, EstimatorError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(EstimatorError::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let w = model.prior.structure_weights();
    let rows: Vec<Vec<u8>> = (0..w.rows())
        .map(|i| w.row(i).iter().map(|&v| u8::from(v > tau)).collect())
        .collect();
    let matrix = StructureMatrix::new(rows)?;
    let zero_rows = matrix.zero_rows();
    let warnings = if zero_rows.is_empty() {
        Vec::new()
    } else {
        vec![format!("degenerate structure: rows {zero_rows:?} have no class above tau={tau}")]
    };
    Ok(ExtractedStructure {
        matrix,
        zero_rows,
        warnings,
    })
}

#[cfg(test)]
mod tests;
