use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GenError, GenerativeSpec};
use crate::numerics::Tensor;

/// How class vectors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassMode {
    /// Uniform over the `u` one-hot vectors.
    OneHot,
    /// Independent Bernoulli(p) per class, redrawn until one is active.
    MultiHot { p: f64 },
}

impl Default for ClassMode {
    fn default() -> Self {
        Self::OneHot
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x m` observations.
    pub x: Tensor,
    /// `N x u` class indicators (0.0 / 1.0).
    pub c: Tensor,
    /// `N x n` ground-truth concepts, when known.
    pub z: Option<Tensor>,
    pub spec_hash: String,
    pub seed: u64,
    pub mode: ClassMode,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            c: self.c.select_rows(idx),
            z: self.z.as_ref().map(|z| z.select_rows(idx)),
            spec_hash: self.spec_hash.clone(),
            seed: self.seed,
            mode: self.mode,
        }
    }
}

pub fn sample_dataset(
    spec: &GenerativeSpec,
    n_samples: usize,
    mode: ClassMode,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset, GenError> {
    if n_samples == 0 {
        return Err(GenError::Config("N must be at least 1".into()));
    }
    if let ClassMode::MultiHot { p } = mode {
        if !(p > 0.0 && p <= 1.0) {
            return Err(GenError::Config(format!("multi-hot p must lie in (0, 1], got {p}")));
        }
    }
    spec.validate()?;
    let (u, n) = (spec.u, spec.n());
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut c = Tensor::zeros(n_samples, u);
    let mut z = Tensor::zeros(n_samples, n);
    let mut classes = vec![0u8; u];
    for r in 0..n_samples {
        match mode {
            ClassMode::OneHot => {
                classes.iter_mut().for_each(|v| *v = 0);
                classes[rng.gen_range(0..u)] = 1;
            }
            ClassMode::MultiHot { p } => loop {
                classes.iter_mut().for_each(|v| *v = u8::from(rng.gen_bool(p)));
                if classes.iter().any(|&v| v != 0) {
                    break;
                }
            },
        }
        for (j, &v) in classes.iter().enumerate() {
            c.set(r, j, f64::from(v));
        }
        for i in 0..spec.n_a {
            let (mu, var) = spec.concept_params(i, &classes);
            z.set(r, i, mu + var.sqrt() * std.sample(rng));
        }
        for (k, &var) in spec.zb_variances.iter().enumerate() {
            z.set(r, spec.n_a + k, var.sqrt() * std.sample(rng));
        }
    }
    let x = spec.mixer()?.forward_batch(&z)?;
    if !x.all_finite() {
        return Err(GenError::Config("mixing produced non-finite observations".into()));
    }
    Ok(Dataset {
        x,
        c,
        z: Some(z),
        spec_hash: spec.hash(),
        seed: spec.seed,
        mode,
    })
}
