//! Affine coupling flows with exact log-determinants.
//!
//! A layer splits the coordinates into a conditioning half `cond` and a
//! transformed half `trans`:
//!
//! ```text
//! y_cond  = x_cond
//! y_trans = x_trans * exp(s(x_cond)) + t(x_cond)
//! ```
//!
//! `s` is squashed into `[-s_max, s_max]`, so every parameter setting is
//! invertible. Layers come in pairs sharing a seeded coordinate permutation
//! with the roles of the halves swapped.

mod checkpoint;

pub use checkpoint::{read_bundle, write_bundle, BundleError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("flow dimension error: {0}")]
    Dimension(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

/// Architecture and initialization of a [`FlowModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub depth: usize,
    pub hidden: usize,
    pub s_max: f64,
    pub volume_preserving: bool,
    pub seed: u64,
    /// Standard deviation of the output-layer weights at initialization.
    /// Zero gives the identity map.
    pub final_init_std: f64,
}

impl FlowConfig {
    /// Estimator default: 6 layers, width `max(16, 4n)`, identity start.
    pub fn estimator(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            depth: 6,
            hidden: default_hidden(dim),
            s_max: 3.0,
            volume_preserving: false,
            seed,
            final_init_std: 0.0,
        }
    }

    /// Ground-truth generator default: 4 randomly initialized layers.
    pub fn generator(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            depth: 4,
            hidden: default_hidden(dim),
            s_max: 3.0,
            volume_preserving: false,
            seed,
            final_init_std: 0.5,
        }
    }
}

pub fn default_hidden(dim: usize) -> usize {
    (4 * dim).max(16)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub cond: Vec<usize>,
    pub trans: Vec<usize>,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

impl CouplingLayer {
    const PARAMS: usize = 6;

    fn params(&self) -> [&Tensor; Self::PARAMS] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn params_mut(&mut self) -> [&mut Tensor; Self::PARAMS] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    w3: Var,
    b3: Var,
}

/// Invertible map `z -> x` built from [`CouplingLayer`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    config: FlowConfig,
    layers: Vec<CouplingLayer>,
}

fn seeded_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn random_tensor(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if std == 0.0 {
        return Tensor::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
        .expect("shape")
}

impl FlowModel {
    pub fn new(config: FlowConfig) -> Result<Self, FlowError> {
        if config.dim == 0 {
            return Err(FlowError::Dimension("flow dimension must be positive".into()));
        }
        let n = config.dim;
        let h = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.depth);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..config.depth {
            let (cond, trans) = if n == 1 {
                (Vec::new(), vec![0])
            } else {
                if k % 2 == 0 && k > 0 {
                    perm = seeded_permutation(n, &mut rng);
                }
                let half = n / 2;
                let (a, b) = (perm[..half].to_vec(), perm[half..].to_vec());
                if k % 2 == 0 {
                    (a, b)
                } else {
                    (b, a)
                }
            };
            let (ka, kb) = (cond.len(), trans.len());
            let std1 = 1.0 / (ka.max(1) as f64).sqrt();
            let std2 = 1.0 / (h as f64).sqrt();
            let std3 = config.final_init_std / (h as f64).sqrt();
            layers.push(CouplingLayer {
                w1: random_tensor(ka, h, std1, &mut rng),
                b1: random_tensor(1, h, if ka == 0 { 1.0 } else { 0.0 }, &mut rng),
                w2: random_tensor(h, h, std2, &mut rng),
                b2: Tensor::zeros(1, h),
                w3: random_tensor(h, 2 * kb, std3, &mut rng),
                b3: random_tensor(1, 2 * kb, config.final_init_std * 0.1, &mut rng),
                cond,
                trans,
            });
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// Single-layer model holding a copy of layer `k`.
    pub fn layer_model(&self, k: usize) -> Self {
        Self {
            config: FlowConfig {
                depth: 1,
                ..self.config.clone()
            },
            layers: vec![self.layers[k].clone()],
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.params().into_iter().cloned())
            .collect()
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<(), FlowError> {
        if params.len() != self.layers.len() * CouplingLayer::PARAMS {
            return Err(FlowError::Dimension("parameter count mismatch".into()));
        }
        for (layer, chunk) in self.layers.iter_mut().zip(params.chunks(CouplingLayer::PARAMS)) {
            for (dst, src) in layer.params_mut().into_iter().zip(chunk) {
                if dst.shape() != src.shape() {
                    return Err(FlowError::Dimension("parameter shape mismatch".into()));
                }
                *dst = src.clone();
            }
        }
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().into_iter().flat_map(Tensor::into_data).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), FlowError> {
        let mut offset = 0;
        let mut params = self.params();
        for p in &mut params {
            let n = p.len();
            if offset + n > flat.len() {
                return Err(FlowError::Dimension("flat parameter array too short".into()));
            }
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        if offset != flat.len() {
            return Err(FlowError::Dimension("flat parameter array too long".into()));
        }
        self.set_params(&params)
    }

    /// Places every parameter on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                w1: tape.leaf(l.w1.clone()),
                b1: tape.leaf(l.b1.clone()),
                w2: tape.leaf(l.w2.clone()),
                b2: tape.leaf(l.b2.clone()),
                w3: tape.leaf(l.w3.clone()),
                b3: tape.leaf(l.b3.clone()),
            })
            .collect()
    }

    /// Flattens registered handles in the order of [`FlowModel::params`].
    pub fn param_vars(vars: &[LayerVars]) -> Vec<Var> {
        vars.iter()
            .flat_map(|v| [v.w1, v.b1, v.w2, v.b2, v.w3, v.b3])
            .collect()
    }

    /// Subnet pre-activations and the squashed scales/translations.
    fn subnet(
        &self,
        tape: &mut Tape,
        layer: &CouplingLayer,
        v: &LayerVars,
        x: Var,
    ) -> Result<Subnet, FlowError> {
        let kb = layer.trans.len();
        let xa = tape.gather_cols(x, &layer.cond)?;
        let p1 = tape.matmul(xa, v.w1)?;
        let p1 = tape.add_row(p1, v.b1)?;
        let h1 = tape.tanh(p1);
        let p2 = tape.matmul(h1, v.w2)?;
        let p2 = tape.add_row(p2, v.b2)?;
        let h2 = tape.tanh(p2);
        let o = tape.matmul(h2, v.w3)?;
        let o = tape.add_row(o, v.b3)?;
        let raw_s = tape.gather_cols(o, &(0..kb).collect::<Vec<_>>())?;
        let t = tape.gather_cols(o, &(kb..2 * kb).collect::<Vec<_>>())?;
        let bound = self.scale_bound();
        let q = tape.scale(raw_s, 1.0 / bound);
        let sq = tape.tanh(q);
        let mut s = tape.scale(sq, bound);
        if self.config.volume_preserving {
            s = self.center_rows(tape, s, kb)?;
        }
        Ok(Subnet { h1, h2, sq, s, t })
    }

    /// Squashing bound; halved under volume preservation so the centred
    /// scales still lie within `s_max`.
    fn scale_bound(&self) -> f64 {
        if self.config.volume_preserving {
            self.config.s_max / 2.0
        } else {
            self.config.s_max
        }
    }

    fn center_rows(&self, tape: &mut Tape, s: Var, kb: usize) -> Result<Var, FlowError> {
        let sums = tape.row_sums(s);
        let ones = tape.constant(Tensor::filled(1, kb, 1.0 / kb as f64));
        let means = tape.matmul(sums, ones)?;
        Ok(tape.sub(s, means)?)
    }

    /// Records `x = f(z)` for a batch `z` (rows are points). Returns `x` and
    /// the per-row `log|det dx/dz|` as a `b x 1` node.
    pub fn forward_on(&self, tape: &mut Tape, vars: &[LayerVars], z: Var) -> Result<(Var, Var), FlowError> {
        self.check_input(tape, z)?;
        let rows = tape.value(z).rows();
        let mut x = z;
        let mut log_det = tape.constant(Tensor::zeros(rows, 1));
        for (layer, v) in self.layers.iter().zip(vars) {
            if layer.trans.is_empty() {
                continue;
            }
            let net = self.subnet(tape, layer, v, x)?;
            let xa = tape.gather_cols(x, &layer.cond)?;
            let xb = tape.gather_cols(x, &layer.trans)?;
            let e = tape.exp(net.s);
            let yb = tape.mul(xb, e)?;
            let yb = tape.add(yb, net.t)?;
            x = tape.scatter_cols(&[(xa, &layer.cond), (yb, &layer.trans)], self.dim())?;
            let ld = tape.row_sums(net.s);
            log_det = tape.add(log_det, ld)?;
        }
        Ok((x, log_det))
    }

    /// Records `z = f^{-1}(x)`; the log-determinant is that of the inverse.
    pub fn inverse_on(&self, tape: &mut Tape, vars: &[LayerVars], x: Var) -> Result<(Var, Var), FlowError> {
        self.check_input(tape, x)?;
        let rows = tape.value(x).rows();
        let mut z = x;
        let mut log_det = tape.constant(Tensor::zeros(rows, 1));
        for (layer, v) in self.layers.iter().zip(vars).rev() {
            if layer.trans.is_empty() {
                continue;
            }
            let net = self.subnet(tape, layer, v, z)?;
            let ya = tape.gather_cols(z, &layer.cond)?;
            let yb = tape.gather_cols(z, &layer.trans)?;
            let diff = tape.sub(yb, net.t)?;
            let neg_s = tape.neg(net.s);
            let e = tape.exp(neg_s);
            let xb = tape.mul(diff, e)?;
            z = tape.scatter_cols(&[(ya, &layer.cond), (xb, &layer.trans)], self.dim())?;
            let ld = tape.row_sums(net.s);
            log_det = tape.sub(log_det, ld)?;
        }
        Ok((z, log_det))
    }

    /// Forward pass that also pushes tangents through every layer using only
    /// first-order tape primitives. `tangents` has `b * k` rows: rows
    /// `p*k .. (p+1)*k` are directions at point `p`. Returns `(x, dx)`.
    pub fn forward_tangent_on(
        &self,
        tape: &mut Tape,
        vars: &[LayerVars],
        z: Var,
        tangents: Var,
    ) -> Result<(Var, Var), FlowError> {
        self.check_input(tape, z)?;
        let rows = tape.value(z).rows();
        let trows = tape.value(tangents).rows();
        if rows == 0 || trows % rows != 0 {
            return Err(FlowError::Dimension("tangent rows must be a multiple of points".into()));
        }
        let k = trows / rows;
        let mut x = z;
        let mut dx = tangents;
        for (layer, v) in self.layers.iter().zip(vars) {
            if layer.trans.is_empty() {
                continue;
            }
            let kb = layer.trans.len();
            let net = self.subnet(tape, layer, v, x)?;
            let xa = tape.gather_cols(x, &layer.cond)?;
            let xb = tape.gather_cols(x, &layer.trans)?;
            let dxa = tape.gather_cols(dx, &layer.cond)?;
            let dxb = tape.gather_cols(dx, &layer.trans)?;

            // tangent through the subnet
            let dp1 = tape.matmul(dxa, v.w1)?;
            let g1 = derivative_of_tanh(tape, net.h1);
            let g1 = tape.repeat_rows(g1, k);
            let dh1 = tape.mul(dp1, g1)?;
            let dp2 = tape.matmul(dh1, v.w2)?;
            let g2 = derivative_of_tanh(tape, net.h2);
            let g2 = tape.repeat_rows(g2, k);
            let dh2 = tape.mul(dp2, g2)?;
            let d_o = tape.matmul(dh2, v.w3)?;
            let draw_s = tape.gather_cols(d_o, &(0..kb).collect::<Vec<_>>())?;
            let dt = tape.gather_cols(d_o, &(kb..2 * kb).collect::<Vec<_>>())?;
            let gs = derivative_of_tanh(tape, net.sq);
            let gs = tape.repeat_rows(gs, k);
            let mut ds = tape.mul(draw_s, gs)?;
            if self.config.volume_preserving {
                ds = self.center_rows(tape, ds, kb)?;
            }

            let e = tape.exp(net.s);
            let yb = tape.mul(xb, e)?;
            let yb = tape.add(yb, net.t)?;
            let e_rep = tape.repeat_rows(e, k);
            let yb_minus_t = tape.sub(yb, net.t)?;
            let ybt_rep = tape.repeat_rows(yb_minus_t, k);
            let term1 = tape.mul(dxb, e_rep)?;
            let term2 = tape.mul(ybt_rep, ds)?;
            let dyb = tape.add(term1, term2)?;
            let dyb = tape.add(dyb, dt)?;

            x = tape.scatter_cols(&[(xa, &layer.cond), (yb, &layer.trans)], self.dim())?;
            dx = tape.scatter_cols(&[(dxa, &layer.cond), (dyb, &layer.trans)], self.dim())?;
        }
        Ok((x, dx))
    }

    fn check_input(&self, tape: &Tape, v: Var) -> Result<(), FlowError> {
        let c = tape.value(v).cols();
        if c != self.dim() {
            return Err(FlowError::Dimension(format!(
                "expected {} columns, got {c}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Batched forward pass: rows are points.
    pub fn forward_batch(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>), FlowError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let zv = tape.constant(z.clone());
        let (x, ld) = self.forward_on(&mut tape, &vars, zv)?;
        Ok((tape.value(x).clone(), tape.value(ld).data().to_vec()))
    }

    pub fn inverse_batch(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>), FlowError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.constant(x.clone());
        let (z, ld) = self.inverse_on(&mut tape, &vars, xv)?;
        Ok((tape.value(z).clone(), tape.value(ld).data().to_vec()))
    }

    /// `(x, log|det dx/dz|)` for a single point.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let (x, ld) = self.forward_batch(&Tensor::matrix(1, z.len(), z.to_vec())?)?;
        Ok((x.into_data(), ld[0]))
    }

    /// `(z, log|det dz/dx|)` for a single point.
    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let (z, ld) = self.inverse_batch(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        Ok((z.into_data(), ld[0]))
    }

    /// `dx/dz` at each row of `z`, one reverse sweep per output coordinate.
    pub fn jacobian_batch(&self, z: &Tensor) -> Result<Vec<Tensor>, FlowError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let zv = tape.leaf(z.clone());
        let (x, _) = self.forward_on(&mut tape, &vars, zv)?;
        reverse_jacobians(&mut tape, zv, x)
    }

    pub fn jacobian(&self, z: &[f64]) -> Result<Tensor, FlowError> {
        let mut j = self.jacobian_batch(&Tensor::matrix(1, z.len(), z.to_vec())?)?;
        Ok(j.remove(0))
    }

    /// Checkpoint: JSON header plus little-endian `f64` parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "kind": "flow",
            "config": self.config,
            "masks": self.layers.iter().map(|l| (&l.cond, &l.trans)).collect::<Vec<_>>(),
        });
        write_bundle(&header, &self.flat_params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FlowError> {
        let (header, payload) = read_bundle(bytes)?;
        Self::from_header_payload(&header, &payload)
    }

    pub(crate) fn from_header_payload(header: &serde_json::Value, payload: &[f64]) -> Result<Self, FlowError> {
        let config: FlowConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| BundleError::Header(e.to_string()))?;
        let mut model = Self::new(config)?;
        model.set_flat_params(payload)?;
        Ok(model)
    }
}

struct Subnet {
    h1: Var,
    h2: Var,
    sq: Var,
    s: Var,
    t: Var,
}

fn derivative_of_tanh(tape: &mut Tape, th: Var) -> Var {
    let sq = tape.square(th);
    let neg = tape.neg(sq);
    tape.add_scalar(neg, 1.0)
}

/// Jacobians `d out / d input` for every row of a batched map recorded on
/// `tape`, where rows are independent points.
pub fn reverse_jacobians(tape: &mut Tape, input: Var, output: Var) -> Result<Vec<Tensor>, FlowError> {
    let (rows, n_in) = (tape.value(input).rows(), tape.value(input).cols());
    let n_out = tape.value(output).cols();
    let mut jacs = vec![Tensor::zeros(n_out, n_in); rows];
    for k in 0..n_out {
        let col = tape.gather_cols(output, &[k])?;
        let obj = tape.sum(col);
        let g = tape.backward(obj)?.get(input);
        for (p, jac) in jacs.iter_mut().enumerate() {
            for j in 0..n_in {
                jac.set(k, j, g.get(p, j));
            }
        }
    }
    Ok(jacs)
}
