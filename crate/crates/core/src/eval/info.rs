//! Mutual information gap and DCI disentanglement.

use super::corr::ranks;
use super::EvalError;
use crate::numerics::Tensor;

/// Equal-frequency bin labels in `0..bins`.
pub fn equal_frequency_bins(v: &[f64], bins: usize) -> Vec<usize> {
    let n = v.len();
    ranks(v)
        .into_iter()
        .map(|r| (((r - 1.0) * bins as f64 / n as f64) as usize).min(bins - 1))
        .collect()
}

fn entropy(labels: &[usize], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    labels.iter().for_each(|&l| counts[l] += 1);
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(a: &[usize], b: &[usize], bins: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; bins * bins];
    let mut pa = vec![0usize; bins];
    let mut pb = vec![0usize; bins];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * bins + y] += 1;
        pa[x] += 1;
        pb[y] += 1;
    }
    let mut mi = 0.0;
    for x in 0..bins {
        for y in 0..bins {
            let c = joint[x * bins + y];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * (pxy * n * n / (pa[x] as f64 * pb[y] as f64)).ln();
        }
    }
    mi.max(0.0)
}

/// Mean over true factors of `(MI_top1 - MI_top2) / H(factor)` with
/// histogram estimates on equal-frequency bins. Factors with zero entropy
/// are skipped and reported.
pub fn mig(z_true: &Tensor, z_est: &Tensor, bins: usize) -> Result<(f64, Vec<String>), EvalError> {
    if z_true.rows() != z_est.rows() {
        return Err(EvalError::Shape("row counts differ".into()));
    }
    if bins < 2 || z_true.rows() < 100 * bins {
        return Err(EvalError::Shape(format!(
            "MIG with {bins} bins needs at least {} rows, got {}",
            100 * bins,
            z_true.rows()
        )));
    }
    if z_est.cols() < 2 {
        return Err(EvalError::Shape("MIG needs at least two estimated codes".into()));
    }
    let codes: Vec<Vec<usize>> = (0..z_est.cols())
        .map(|j| equal_frequency_bins(&z_est.column(j), bins))
        .collect();
    let mut gaps = Vec::new();
    let mut warnings = Vec::new();
    for k in 0..z_true.cols() {
        let f = equal_frequency_bins(&z_true.column(k), bins);
        let h = entropy(&f, bins);
        if h <= 1e-12 {
            warnings.push(format!("factor {k} has zero entropy; skipped"));
            continue;
        }
        let mut mis: Vec<f64> = codes.iter().map(|c| mutual_information(&f, c, bins)).collect();
        mis.sort_by(|a, b| b.total_cmp(a));
        gaps.push((mis[0] - mis[1]) / h);
    }
    if gaps.is_empty() {
        return Err(EvalError::Degenerate("every factor has zero entropy".into()));
    }
    Ok((gaps.iter().sum::<f64>() / gaps.len() as f64, warnings))
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    if sd <= 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - m) / sd).collect()
}

/// Lasso by cyclic coordinate descent on standardized columns:
/// `min (1/2N)‖y - Xb‖² + alpha‖b‖₁`.
pub fn lasso(cols: &[Vec<f64>], y: &[f64], alpha: f64) -> Vec<f64> {
    let n = y.len() as f64;
    let p = cols.len();
    let mut beta = vec![0.0; p];
    let mut resid = y.to_vec();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / n).collect();
    for _ in 0..10_000 {
        let mut max_step: f64 = 0.0;
        for j in 0..p {
            if norms[j] == 0.0 {
                continue;
            }
            let rho: f64 = cols[j].iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() / n + norms[j] * beta[j];
            let new = soft_threshold(rho, alpha) / norms[j];
            let d = new - beta[j];
            if d != 0.0 {
                resid.iter_mut().zip(&cols[j]).for_each(|(r, x)| *r -= d * x);
                beta[j] = new;
                max_step = max_step.max(d.abs());
            }
        }
        if max_step < 1e-10 {
            break;
        }
    }
    beta
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Lasso penalty used for the importance matrix.
pub const DCI_ALPHA: f64 = 0.01;

/// Importance `R[j][k] = |coef|` of estimated code `j` for true factor `k`.
pub fn importance_matrix(z_true: &Tensor, z_est: &Tensor) -> Result<Vec<Vec<f64>>, EvalError> {
    if z_true.rows() != z_est.rows() {
        return Err(EvalError::Shape("row counts differ".into()));
    }
    let cols: Vec<Vec<f64>> = (0..z_est.cols()).map(|j| standardize(&z_est.column(j))).collect();
    let mut r = vec![vec![0.0; z_true.cols()]; z_est.cols()];
    for k in 0..z_true.cols() {
        let y = standardize(&z_true.column(k));
        for (j, b) in lasso(&cols, &y, DCI_ALPHA).into_iter().enumerate() {
            r[j][k] = b.abs();
        }
    }
    Ok(r)
}

/// `1 - mean_j H_K(p_j)` where `p_j` is row `j` of the importance matrix
/// normalized to sum to one and `H_K` is entropy in base `K` (number of true
/// factors). An all-zero row has maximal entropy.
pub fn dci_from_importance(r: &[Vec<f64>]) -> f64 {
    let k = r.first().map_or(0, Vec::len);
    if k < 2 {
        return 1.0;
    }
    let base = (k as f64).ln();
    let ents: Vec<f64> = r
        .iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                return 1.0;
            }
            row.iter()
                .map(|&v| v / s)
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln() / base)
                .sum()
        })
        .collect();
    1.0 - ents.iter().sum::<f64>() / ents.len() as f64
}

pub fn dci_disentanglement(z_true: &Tensor, z_est: &Tensor) -> Result<f64, EvalError> {
    Ok(dci_from_importance(&importance_matrix(z_true, z_est)?))
}
