//! Ground-truth mixing maps `z -> x`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::GenError;
use crate::flow::{FlowConfig, FlowModel};
use crate::numerics::{Tape, Tensor, Var};
use crate::structure::{support_intersection_condition, SupportSet};

/// Elementwise map applied on both sides of the sparse linear core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    /// `t + 0.5 tanh(t)`: smooth, strictly increasing, derivative in `[1, 1.5]`.
    TanhShift,
}

impl Nonlinearity {
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Self::Identity => t,
            Self::TanhShift => t + 0.5 * t.tanh(),
        }
    }

    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::TanhShift => {
                let th = t.tanh();
                1.0 + 0.5 * (1.0 - th * th)
            }
        }
    }

    /// Newton iteration; converges globally since the map is monotone with
    /// derivative bounded in `[1, 1.5]`.
    pub fn invert(self, y: f64) -> f64 {
        match self {
            Self::Identity => y,
            Self::TanhShift => {
                let mut t = y / 1.25;
                for _ in 0..60 {
                    let step = (self.apply(t) - y) / self.derivative(t);
                    t -= step;
                    if step.abs() < 1e-16 * (1.0 + t.abs()) {
                        break;
                    }
                }
                t
            }
        }
    }

    /// `sigma^{-1}` on a tape: the inverse is computed numerically and one
    /// Newton step is recorded around it, which leaves the value unchanged
    /// and carries the exact derivative `1 / sigma'`.
    fn inverse_on_tape(self, tape: &mut Tape, v: Var) -> Result<Var, GenError> {
        if self == Self::Identity {
            return Ok(v);
        }
        let y0 = tape.value(v).map(|t| self.invert(t));
        let slope = y0.map(|t| 1.0 / self.derivative(t));
        let y0v = tape.constant(y0.clone());
        let fy = self.on_tape(tape, y0v)?;
        let resid = tape.sub(v, fy)?;
        let sv = tape.constant(slope);
        let step = tape.mul(resid, sv)?;
        Ok(tape.add(y0v, step)?)
    }

    fn on_tape(self, tape: &mut Tape, v: Var) -> Result<Var, GenError> {
        Ok(match self {
            Self::Identity => v,
            Self::TanhShift => {
                let th = tape.tanh(v);
                let half = tape.scale(th, 0.5);
                tape.add(v, half)?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingSpec {
    /// Randomly initialized coupling layers on `n` coordinates, each preceded
    /// by a fixed random rotation, followed by a fixed `m x n` embedding with
    /// orthonormal columns (a rotation when `m = n`).
    DenseFlow {
        depth: usize,
        hidden: usize,
        param_seed: u64,
        final_init_std: f64,
    },
    /// `x = sigma(L sigma(z))` with `L` an `m x n` matrix whose support is
    /// `F`. The first `n` rows of `L` form an invertible block.
    SparseSandwich {
        weights: Vec<Vec<f64>>,
        nonlinearity: Nonlinearity,
    },
}

impl MixingSpec {
    pub fn dense(n: usize, param_seed: u64) -> Self {
        let cfg = FlowConfig::generator(n, param_seed);
        Self::DenseFlow {
            depth: cfg.depth,
            hidden: cfg.hidden,
            param_seed,
            final_init_std: cfg.final_init_std,
        }
    }

    /// Support `F` of the sparse core; `None` for dense flows.
    pub fn support(&self) -> Option<SupportSet> {
        match self {
            Self::DenseFlow { .. } => None,
            Self::SparseSandwich { weights, .. } => {
                let bin: Vec<Vec<u8>> = weights
                    .iter()
                    .map(|r| r.iter().map(|&w| u8::from(w != 0.0)).collect())
                    .collect();
                Some(SupportSet::from_binary(&bin))
            }
        }
    }
}

/// Options for drawing a sparse core.
#[derive(Debug, Clone)]
pub struct SparseCoreOptions {
    pub n: usize,
    pub m: usize,
    /// Probability of each off-diagonal edge in the square block.
    pub density: f64,
    /// Columns that must satisfy the support-intersection condition.
    pub intersect_cols: Vec<usize>,
    /// Columns for which the condition is deliberately broken.
    pub violate_cols: Vec<usize>,
    pub nonlinearity: Nonlinearity,
}

/// Draws a row-permuted sparse core: a nonzero diagonal plus off-diagonal
/// edges anywhere (plus `m - n` extra rows), resampling until the requested
/// intersection pattern holds and the square block is well conditioned.
///
/// A triangular support would not do: requiring the intersection condition
/// on every column of a triangular support forces it to be diagonal.
pub fn sample_sparse_core(opts: &SparseCoreOptions, rng: &mut ChaCha8Rng) -> Result<MixingSpec, GenError> {
    let (n, m) = (opts.n, opts.m);
    if m < n || n == 0 {
        return Err(GenError::Config(format!("sparse core needs m >= n >= 1, got m={m}, n={n}")));
    }
    let normal = Normal::new(0.0, 1.0).expect("std");
    let mut density = opts.density;
    for attempt in 0..2000 {
        if attempt > 0 && attempt % 200 == 0 {
            density *= 0.7;
        }
        let mut w = vec![vec![0.0; n]; m];
        for (i, row) in w.iter_mut().enumerate().take(n) {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            row[i] = sign * rng.gen_range(0.8..1.5);
            for (j, cell) in row.iter_mut().enumerate().take(n) {
                if j != i && rng.gen_bool(density) {
                    *cell = normal.sample(rng);
                }
            }
        }
        for row in w.iter_mut().skip(n) {
            for cell in row.iter_mut() {
                if rng.gen_bool(density) {
                    *cell = normal.sample(rng);
                }
            }
            if row.iter().all(|&v| v == 0.0) {
                row[rng.gen_range(0..n)] = normal.sample(rng);
            }
        }
        for &i in &opts.violate_cols {
            break_intersection(&mut w, i, n, rng);
        }
        // permute the invertible block's rows
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(rng);
        let block: Vec<Vec<f64>> = perm.iter().map(|&p| w[p].clone()).collect();
        w[..n].clone_from_slice(&block);

        let bin: Vec<Vec<u8>> = w
            .iter()
            .map(|r| r.iter().map(|&v| u8::from(v != 0.0)).collect())
            .collect();
        let support = SupportSet::from_binary(&bin);
        let all_cols: Vec<usize> = (0..n).collect();
        let full = support_intersection_condition(&support, &all_cols);
        let ok_cols = opts.intersect_cols.iter().all(|&i| full[i]);
        let violated = opts.violate_cols.iter().all(|&i| !full[i]);
        let square: Vec<Vec<f64>> = w[..n].to_vec();
        if ok_cols && violated && well_conditioned(&square) {
            return Ok(MixingSpec::SparseSandwich {
                weights: w,
                nonlinearity: opts.nonlinearity,
            });
        }
    }
    Err(GenError::Config(
        "could not draw a sparse core with the requested support pattern".into(),
    ))
}

/// Makes every row touching column `i` also touch a partner column, so the
/// intersection over those rows contains both.
fn break_intersection(w: &mut [Vec<f64>], i: usize, n: usize, rng: &mut ChaCha8Rng) {
    if n < 2 {
        return;
    }
    let mut partner = rng.gen_range(0..n - 1);
    if partner >= i {
        partner += 1;
    }
    for row in w.iter_mut() {
        if row[i] != 0.0 && row[partner] == 0.0 {
            row[partner] = if rng.gen_bool(0.5) { 0.7 } else { -0.7 } * rng.gen_range(0.5..1.5);
        }
    }
}

fn well_conditioned(a: &[Vec<f64>]) -> bool {
    match lu_solve_matrix(a) {
        Some(lu) => lu.min_pivot > 0.05,
        None => false,
    }
}

struct Lu {
    a: Vec<Vec<f64>>,
    perm: Vec<usize>,
    min_pivot: f64,
}

fn lu_solve_matrix(a: &[Vec<f64>]) -> Option<Lu> {
    let n = a.len();
    let mut a = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut min_pivot = f64::INFINITY;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-12 {
            return None;
        }
        a.swap(p, c);
        perm.swap(p, c);
        min_pivot = min_pivot.min(a[c][c].abs());
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            a[r][c] = f;
            for k in c + 1..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    Some(Lu { a, perm, min_pivot })
}

impl Lu {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            for k in 0..r {
                y[r] -= self.a[r][k] * y[k];
            }
        }
        for r in (0..n).rev() {
            for k in r + 1..n {
                y[r] -= self.a[r][k] * y[k];
            }
            y[r] /= self.a[r][r];
        }
        y
    }
}

/// Instantiated mixing map.
#[derive(Debug, Clone)]
pub enum Mixer {
    Dense {
        /// Single coupling layers, applied in order.
        layers: Vec<FlowModel>,
        /// `n x n` rotation applied before each layer.
        rotations: Vec<Tensor>,
        /// `m x n` with orthonormal columns.
        embed: Tensor,
    },
    Sparse {
        core: Tensor,
        nonlinearity: Nonlinearity,
        lu: LuHandle,
    },
}

/// Factorization of the invertible block of a sparse core.
#[derive(Clone)]
pub struct LuHandle(std::sync::Arc<Lu>);

impl std::fmt::Debug for LuHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("LuHandle")
    }
}

impl Mixer {
    pub fn new(spec: &MixingSpec, n: usize, m: usize) -> Result<Self, GenError> {
        match spec {
            MixingSpec::DenseFlow {
                depth,
                hidden,
                param_seed,
                final_init_std,
            } => {
                let flow = FlowModel::new(FlowConfig {
                    dim: n,
                    depth: *depth,
                    hidden: *hidden,
                    s_max: 3.0,
                    volume_preserving: false,
                    seed: *param_seed,
                    final_init_std: *final_init_std,
                })?;
                let layers = (0..flow.depth()).map(|k| flow.layer_model(k)).collect();
                let rotations = (0..flow.depth())
                    .map(|k| orthonormal_columns(n, n, param_seed.wrapping_add(0x51ed_27 + k as u64)))
                    .collect();
                let embed = orthonormal_columns(m, n, param_seed.wrapping_add(0x9e37_79b9));
                Ok(Self::Dense { layers, rotations, embed })
            }
            MixingSpec::SparseSandwich { weights, nonlinearity } => {
                if weights.len() != m || weights.iter().any(|r| r.len() != n) {
                    return Err(GenError::Config("sparse core must be m x n".into()));
                }
                let lu = lu_solve_matrix(&weights[..n])
                    .ok_or_else(|| GenError::Config("sparse core block is singular".into()))?;
                Ok(Self::Sparse {
                    core: Tensor::from_rows(weights).map_err(|e| GenError::Config(e.to_string()))?,
                    nonlinearity: *nonlinearity,
                    lu: LuHandle(std::sync::Arc::new(lu)),
                })
            }
        }
    }

    /// Records `x = f(z)` on a tape for a batch of points.
    pub fn forward_on(&self, tape: &mut Tape, z: Var) -> Result<Var, GenError> {
        match self {
            Self::Dense {
                layers,
                rotations,
                embed,
            } => {
                let mut h = z;
                for (layer, r) in layers.iter().zip(rotations) {
                    let rt = tape.constant(r.transpose());
                    h = tape.matmul(h, rt)?;
                    let vars = layer.register(tape);
                    h = layer.forward_on(tape, &vars, h)?.0;
                }
                let et = tape.constant(embed.transpose());
                Ok(tape.matmul(h, et)?)
            }
            Self::Sparse {
                core, nonlinearity, ..
            } => {
                let inner = nonlinearity.on_tape(tape, z)?;
                let lt = tape.constant(core.transpose());
                let lin = tape.matmul(inner, lt)?;
                nonlinearity.on_tape(tape, lin)
            }
        }
    }

    pub fn forward_batch(&self, z: &Tensor) -> Result<Tensor, GenError> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let x = self.forward_on(&mut tape, zv)?;
        Ok(tape.value(x).clone())
    }

    pub fn inverse_batch(&self, x: &Tensor) -> Result<Tensor, GenError> {
        match self {
            Self::Dense {
                layers,
                rotations,
                embed,
            } => {
                let mut h = x.matmul(embed)?;
                for (layer, r) in layers.iter().zip(rotations).rev() {
                    h = layer.inverse_batch(&h)?.0.matmul(r)?;
                }
                Ok(h)
            }
            Self::Sparse {
                core,
                nonlinearity,
                lu,
            } => {
                let n = core.cols();
                let mut out = Vec::with_capacity(x.rows() * n);
                for r in 0..x.rows() {
                    let w: Vec<f64> = x.row(r)[..n].iter().map(|&v| nonlinearity.invert(v)).collect();
                    let y = lu.0.solve(&w);
                    out.extend(y.into_iter().map(|v| nonlinearity.invert(v)));
                }
                Ok(Tensor::matrix(x.rows(), n, out)?)
            }
        }
    }

    /// Records `z = f^{-1}(x)` on a tape. Values equal `inverse_batch`;
    /// derivatives are exact.
    pub fn inverse_on(&self, tape: &mut Tape, x: Var) -> Result<Var, GenError> {
        match self {
            Self::Dense {
                layers,
                rotations,
                embed,
            } => {
                let e = tape.constant(embed.clone());
                let mut h = tape.matmul(x, e)?;
                for (layer, r) in layers.iter().zip(rotations).rev() {
                    let vars = layer.register(tape);
                    h = layer.inverse_on(tape, &vars, h)?.0;
                    let rv = tape.constant(r.clone());
                    h = tape.matmul(h, rv)?;
                }
                Ok(h)
            }
            Self::Sparse {
                core,
                nonlinearity,
                lu,
            } => {
                let n = core.cols();
                let head = tape.gather_cols(x, &(0..n).collect::<Vec<_>>())?;
                let w = nonlinearity.inverse_on_tape(tape, head)?;
                // (L_n^{-1})^T, built column by column from the factorization
                let mut inv_t = Tensor::zeros(n, n);
                for j in 0..n {
                    let e: Vec<f64> = (0..n).map(|k| f64::from(u8::from(k == j))).collect();
                    for (i, v) in lu.0.solve(&e).into_iter().enumerate() {
                        inv_t.set(j, i, v);
                    }
                }
                let it = tape.constant(inv_t);
                let y = tape.matmul(w, it)?;
                nonlinearity.inverse_on_tape(tape, y)
            }
        }
    }

    /// Batched `D_z f` by reverse-mode autodiff.
    pub fn jacobian_batch(&self, z: &Tensor) -> Result<Vec<Tensor>, GenError> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let x = self.forward_on(&mut tape, zv)?;
        Ok(crate::flow::reverse_jacobians(&mut tape, zv, x)?)
    }
}

/// Deterministic `m x n` matrix with orthonormal columns (Gram-Schmidt on a
/// seeded Gaussian draw).
pub fn orthonormal_columns(m: usize, n: usize, seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("std");
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| normal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut t = Tensor::zeros(m, n);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            t.set(i, j, v);
        }
    }
    t
}
