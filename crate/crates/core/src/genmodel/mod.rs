//! Ground-truth latent concept process.
//!
//! Classes `c` select class-conditional Gaussians for the class-dependent
//! concepts `z_A` through the structure `M`; the class-independent concepts
//! `z_B` are drawn from a fixed diagonal Gaussian, and `x = f(z)` for an
//! invertible mixing `f`.

mod io;
mod mixing;
mod sample;

pub use io::{read_dataset, write_dataset, DatasetMeta};
pub use mixing::{
    orthonormal_columns, sample_sparse_core, Mixer, MixingSpec, Nonlinearity, SparseCoreOptions,
};
pub use sample::{sample_dataset, ClassMode, Dataset};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::flow::FlowError;
use crate::numerics::{NumericsError, Tensor};
use crate::structure::{
    check_structural_diversity, support_intersection_condition, StructureError, StructureMatrix, SupportSet,
};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dataset io error: {0}")]
    Io(String),
}

/// Range of every drawn variance.
pub const VARIANCE_RANGE: (f64, f64) = (0.5, 3.0);

/// Complete description of a ground-truth model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeSpec {
    pub n_a: usize,
    pub n_b: usize,
    pub m: usize,
    pub u: usize,
    pub structure: StructureMatrix,
    /// `n_a x u`; only entries with `M[i][j] = 1` are used.
    pub means: Vec<Vec<f64>>,
    /// `n_a x u`; only entries with `M[i][j] = 1` are used.
    pub variances: Vec<Vec<f64>>,
    pub base_variances: Vec<f64>,
    pub zb_variances: Vec<f64>,
    pub mixing: MixingSpec,
    pub seed: u64,
}

/// Mixing family requested from [`SpecOptions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingChoice {
    Dense,
    Sparse {
        nonlinearity: Nonlinearity,
        /// Columns on which the support-intersection condition is enforced.
        intersect: Intersect,
        /// Number of concepts whose intersection condition is broken.
        violate: usize,
        /// Probability of each off-diagonal edge in the core.
        density: f64,
    },
}

impl MixingChoice {
    /// Sparse sandwich with the default edge density.
    pub fn sparse(nonlinearity: Nonlinearity, intersect: Intersect, violate: usize) -> Self {
        Self::Sparse {
            nonlinearity,
            intersect,
            violate,
            density: DEFAULT_CORE_DENSITY,
        }
    }
}

/// Which latent columns must satisfy the support-intersection condition.
/// Columns listed for violation are always excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intersect {
    None,
    ClassIndependent,
    All,
}

/// Off-diagonal edge probability of sparse cores.
pub const DEFAULT_CORE_DENSITY: f64 = 0.6;

/// Recipe for drawing a [`GenerativeSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecOptions {
    pub n_a: usize,
    pub n_b: usize,
    pub m: usize,
    pub u: usize,
    pub require_diversity: bool,
    /// Use this structure instead of sampling one.
    #[serde(default)]
    pub structure: Option<StructureMatrix>,
    pub mixing: MixingChoice,
    /// Draw means from `N(0, 1)` instead of fixing them to zero.
    #[serde(default)]
    pub nonzero_means: bool,
    pub seed: u64,
}

impl SpecOptions {
    pub fn new(n_a: usize, n_b: usize, u: usize, seed: u64) -> Self {
        Self {
            n_a,
            n_b,
            m: n_a + n_b,
            u,
            require_diversity: true,
            structure: None,
            mixing: MixingChoice::Dense,
            nonzero_means: false,
            seed,
        }
    }
}

impl GenerativeSpec {
    pub fn sample(opts: &SpecOptions) -> Result<Self, GenError> {
        let n = opts.n_a + opts.n_b;
        if n == 0 || opts.m < n {
            return Err(GenError::Config(format!(
                "need m >= n_A + n_B >= 1, got m={}, n={n}",
                opts.m
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let structure = match &opts.structure {
            Some(s) => {
                if s.n_a() != opts.n_a || s.u() != opts.u {
                    return Err(GenError::Config("structure dimensions disagree with options".into()));
                }
                s.clone()
            }
            None => sample_structure(opts.n_a, opts.u, opts.require_diversity, &mut rng)?,
        };
        let (lo, hi) = VARIANCE_RANGE;
        let mut means = vec![vec![0.0; opts.u]; opts.n_a];
        let mut variances = vec![vec![0.0; opts.u]; opts.n_a];
        for i in 0..opts.n_a {
            for j in 0..opts.u {
                variances[i][j] = rng.gen_range(lo..hi);
                if opts.nonzero_means {
                    means[i][j] = rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
            }
        }
        let base_variances = (0..opts.n_a).map(|_| rng.gen_range(lo..hi)).collect();
        let zb_variances = (0..opts.n_b).map(|_| rng.gen_range(lo..hi)).collect();
        let mixing = match &opts.mixing {
            MixingChoice::Dense => MixingSpec::dense(n, rng.gen()),
            MixingChoice::Sparse {
                nonlinearity,
                intersect,
                violate,
                density,
            } => {
                let mut cols: Vec<usize> = (0..n).collect();
                cols.shuffle(&mut rng);
                let violate_cols: Vec<usize> = cols[..(*violate).min(n)].to_vec();
                let scope = match intersect {
                    Intersect::None => n..n,
                    Intersect::ClassIndependent => opts.n_a..n,
                    Intersect::All => 0..n,
                };
                let intersect_cols = scope.filter(|c| !violate_cols.contains(c)).collect();
                sample_sparse_core(
                    &SparseCoreOptions {
                        n,
                        m: opts.m,
                        density: *density,
                        intersect_cols,
                        violate_cols,
                        nonlinearity: *nonlinearity,
                    },
                    &mut rng,
                )?
            }
        };
        let spec = Self {
            n_a: opts.n_a,
            n_b: opts.n_b,
            m: opts.m,
            u: opts.u,
            structure,
            means,
            variances,
            base_variances,
            zb_variances,
            mixing,
            seed: opts.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n(&self) -> usize {
        self.n_a + self.n_b
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |msg: &str| Err(GenError::Config(msg.to_string()));
        if self.structure.n_a() != self.n_a || self.structure.u() != self.u {
            return bad("structure shape disagrees with n_A, u");
        }
        self.structure.validate_rows()?;
        if self.means.len() != self.n_a
            || self.variances.len() != self.n_a
            || self.means.iter().chain(&self.variances).any(|r| r.len() != self.u)
        {
            return bad("prior tables must be n_A x u");
        }
        if self.base_variances.len() != self.n_a || self.zb_variances.len() != self.n_b {
            return bad("variance vector lengths disagree with n_A, n_B");
        }
        let positive = self
            .variances
            .iter()
            .flatten()
            .chain(&self.base_variances)
            .chain(&self.zb_variances)
            .all(|&v| v > 0.0 && v.is_finite());
        if !positive {
            return bad("variances must be positive and finite");
        }
        if self.m < self.n() {
            return bad("m must be at least n_A + n_B");
        }
        Ok(())
    }

    /// Mean and variance of concept `i` given the active classes.
    pub fn concept_params(&self, i: usize, classes: &[u8]) -> (f64, f64) {
        let rows = self.structure.rows();
        match (0..self.u).find(|&j| classes[j] != 0 && rows[i][j] != 0) {
            Some(j) => (self.means[i][j], self.variances[i][j]),
            None => (0.0, self.base_variances[i]),
        }
    }

    pub fn mixer(&self) -> Result<Mixer, GenError> {
        Mixer::new(&self.mixing, self.n(), self.m)
    }

    /// Latent columns failing the support-intersection condition of a sparse
    /// mixing (empty for dense mixing, whose support is full).
    pub fn intersection_violations(&self) -> Vec<usize> {
        match &self.mixing {
            MixingSpec::DenseFlow { .. } => Vec::new(),
            MixingSpec::SparseSandwich { weights, .. } => {
                let bin: Vec<Vec<u8>> = weights
                    .iter()
                    .map(|r| r.iter().map(|&v| u8::from(v != 0.0)).collect())
                    .collect();
                let cols: Vec<usize> = (0..self.n()).collect();
                support_intersection_condition(&SupportSet::from_binary(&bin), &cols)
                    .into_iter()
                    .enumerate()
                    .filter(|(_, ok)| !ok)
                    .map(|(i, _)| i)
                    .collect()
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Draws a class-concept structure.
///
/// With `require_diversity`, every row gets a zero set `Z_i` such that no
/// other row is all-zero on `Z_i` (the zero sets form an antichain); extra
/// edges are then added only while the checker still passes.
pub fn sample_structure(
    n_a: usize,
    u: usize,
    require_diversity: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StructureMatrix, GenError> {
    if n_a == 0 || u == 0 {
        return Err(GenError::Config("n_A and u must be positive".into()));
    }
    if !require_diversity {
        for _ in 0..10_000 {
            let rows: Vec<Vec<u8>> = (0..n_a)
                .map(|_| (0..u).map(|_| u8::from(rng.gen_bool(0.5))).collect())
                .collect();
            let m = StructureMatrix::new(rows)?;
            if m.validate().is_ok() {
                return Ok(m);
            }
        }
        return Err(GenError::Config("could not draw a structure without empty rows/columns".into()));
    }
    if u < 2 {
        return Err(GenError::Config(format!(
            "infeasible structure: diversity needs at least 2 classes, got u={u}"
        )));
    }
    let mut rows = if u > n_a {
        // private class per concept: row i = e_i
        let mut rows = vec![vec![0u8; u]; n_a];
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] = 1;
        }
        rows
    } else {
        let k = u / 2;
        if binomial(u, k) < n_a as u128 {
            return Err(GenError::Config(format!(
                "infeasible structure: {n_a} concepts cannot be structurally diverse over {u} classes"
            )));
        }
        let mut zero_sets: Vec<Vec<usize>> = Vec::with_capacity(n_a);
        let cols: Vec<usize> = (0..u).collect();
        while zero_sets.len() < n_a {
            let mut s: Vec<usize> = cols.choose_multiple(rng, k).copied().collect();
            s.sort_unstable();
            if !zero_sets.contains(&s) {
                zero_sets.push(s);
            }
        }
        zero_sets
            .iter()
            .map(|z| (0..u).map(|j| u8::from(!z.contains(&j))).collect())
            .collect()
    };
    let holds = |rows: &[Vec<u8>]| {
        StructureMatrix::new(rows.to_vec())
            .and_then(|m| check_structural_diversity(&m))
            .map(|r| r.holds)
            .unwrap_or(false)
    };
    // give every empty column a concept where the witnesses survive
    for j in 0..u {
        if rows.iter().any(|r| r[j] != 0) {
            continue;
        }
        let mut order: Vec<usize> = (0..n_a).collect();
        order.shuffle(rng);
        for i in order {
            rows[i][j] = 1;
            if holds(&rows) {
                break;
            }
            rows[i][j] = 0;
        }
    }
    let mut zeros: Vec<(usize, usize)> = (0..n_a)
        .flat_map(|i| (0..u).map(move |j| (i, j)))
        .filter(|&(i, j)| rows[i][j] == 0)
        .collect();
    zeros.shuffle(rng);
    for (i, j) in zeros {
        if rng.gen_bool(0.5) {
            rows[i][j] = 1;
            if !holds(&rows) {
                rows[i][j] = 0;
            }
        }
    }
    let mut row_perm: Vec<usize> = (0..n_a).collect();
    row_perm.shuffle(rng);
    let mut col_perm: Vec<usize> = (0..u).collect();
    col_perm.shuffle(rng);
    let shuffled: Vec<Vec<u8>> = row_perm
        .iter()
        .map(|&r| col_perm.iter().map(|&c| rows[r][c]).collect())
        .collect();
    let m = StructureMatrix::new(shuffled)?;
    if !check_structural_diversity(&m)?.holds {
        return Err(GenError::Config("internal: sampled structure lost diversity".into()));
    }
    Ok(m)
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Per-concept verdict on whether two class patterns give different
/// conditionals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinctnessReport {
    pub holds: bool,
    pub concepts: Vec<bool>,
}

/// Checks that every concept has at least two classes inducing distinct
/// `(mean, variance)` pairs (tolerance `1e-9`).
pub fn conditional_density_distinctness(spec: &GenerativeSpec) -> DistinctnessReport {
    let concepts: Vec<bool> = (0..spec.n_a)
        .map(|i| {
            let params: Vec<(f64, f64)> = (0..spec.u)
                .map(|j| {
                    let mut c = vec![0u8; spec.u];
                    c[j] = 1;
                    spec.concept_params(i, &c)
                })
                .collect();
            params.iter().enumerate().any(|(a, p)| {
                params[a + 1..]
                    .iter()
                    .any(|q| (p.0 - q.0).abs() > 1e-9 || (p.1 - q.1).abs() > 1e-9)
            })
        })
        .collect();
    DistinctnessReport {
        holds: spec.u >= 2 && concepts.iter().all(|&b| b),
        concepts,
    }
}

/// `x = f(z)` for a single point.
pub fn mix_forward(mixer: &Mixer, z: &[f64]) -> Result<Vec<f64>, GenError> {
    let t = Tensor::matrix(1, z.len(), z.to_vec())?;
    Ok(mixer.forward_batch(&t)?.into_data())
}

/// `z = f^{-1}(x)` for a single point.
pub fn mix_inverse(mixer: &Mixer, x: &[f64]) -> Result<Vec<f64>, GenError> {
    let t = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(mixer.inverse_batch(&t)?.into_data())
}

/// `D_z f` at `z`.
pub fn ground_truth_jacobian(mixer: &Mixer, z: &[f64]) -> Result<Tensor, GenError> {
    let t = Tensor::matrix(1, z.len(), z.to_vec())?;
    Ok(mixer.jacobian_batch(&t)?.remove(0))
}

#[cfg(test)]
mod tests;
