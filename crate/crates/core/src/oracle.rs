//! Brute-force reference computations.
//!
//! Nothing here calls into the flow, estimator, or assignment code it is
//! used to check: finite differences, permutation enumeration, and the
//! closed-form diagonal Gaussian likelihood each use their own arithmetic.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle scale error: {0}")]
    Scale(String),
    #[error("map returned a non-finite value at coordinate {0}")]
    NonFinite(usize),
    #[error("oracle contract error: {0}")]
    Contract(String),
}

/// Central-difference configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub step: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { step: 1e-5 }
    }
}

/// Central-difference Jacobian: entry `(i, j)` is `d out_i / d x_j`.
pub fn fd_jacobian<F>(map: F, x: &[f64], cfg: FdConfig) -> Result<Vec<Vec<f64>>, OracleError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(cfg.step > 0.0) {
        return Err(OracleError::Contract("finite-difference step must be positive".into()));
    }
    let base = map(x);
    let mut jac = vec![vec![0.0; x.len()]; base.len()];
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + cfg.step;
        let plus = map(&probe);
        probe[j] = x[j] - cfg.step;
        let minus = map(&probe);
        probe[j] = x[j];
        for i in 0..base.len() {
            let d = (plus[i] - minus[i]) / (2.0 * cfg.step);
            if !d.is_finite() {
                return Err(OracleError::NonFinite(i));
            }
            jac[i][j] = d;
        }
    }
    Ok(jac)
}

/// Largest score-sum permutation by exhaustive search over `n!` candidates
/// visited in lexicographic order. Ties resolve to the lexicographically
/// smallest maximizer. `perm[i]` is the column assigned to row `i`.
pub fn enumerate_permutation_assignment(score: &[Vec<f64>]) -> Result<Vec<usize>, OracleError> {
    let n = score.len();
    if n > 8 {
        return Err(OracleError::Scale(format!("{n}! permutations exceed the n <= 8 budget")));
    }
    if score.iter().any(|r| r.len() != n) {
        return Err(OracleError::Contract("score matrix must be square".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_val = f64::NEG_INFINITY;
    loop {
        let val: f64 = perm.iter().enumerate().map(|(i, &j)| score[i][j]).sum();
        if val > best_val {
            best_val = val;
            best = perm.clone();
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best)
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// `sum_i 0.5 ln(2 pi var_i) + (x_i - mean_i)^2 / (2 var_i)`.
pub fn gaussian_nll_closed_form(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((&xi, &mi), &vi)| 0.5 * (two_pi * vi).ln() + (xi - mi) * (xi - mi) / (2.0 * vi))
        .sum()
}
