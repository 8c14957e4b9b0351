//! Mean correlation coefficient after optimal matching.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::numerics::Tensor;
use crate::structure::optimal_assignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrMode {
    /// Rank correlation; exactly invariant to strictly monotone transforms.
    Spearman,
    /// Pearson correlation between each true coordinate and its best
    /// monotone (isotonic) fit on the estimated coordinate.
    PearsonAfterFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccResult {
    pub score: f64,
    /// `assignment[i]` is the estimated column matched to true column `i`.
    pub assignment: Vec<usize>,
    /// `|corr(true_i, est_j)|`.
    pub abs_corr: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl MccResult {
    /// Matched `|corr|` for each true coordinate.
    pub fn matched(&self) -> Vec<f64> {
        self.assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| self.abs_corr[i][j])
            .collect()
    }
}

pub fn mcc(z_true: &Tensor, z_est: &Tensor, mode: CorrMode) -> Result<MccResult, EvalError> {
    if z_true.rows() != z_est.rows() || z_true.cols() != z_est.cols() {
        return Err(EvalError::Shape(format!(
            "{}x{} vs {}x{}",
            z_true.rows(),
            z_true.cols(),
            z_est.rows(),
            z_est.cols()
        )));
    }
    if z_true.rows() < 3 {
        return Err(EvalError::Shape("MCC needs at least 3 rows".into()));
    }
    if !z_true.all_finite() || !z_est.all_finite() {
        return Err(EvalError::NonFinite("MCC input".into()));
    }
    let k = z_true.cols();
    let truth: Vec<Vec<f64>> = (0..k).map(|i| z_true.column(i)).collect();
    let est: Vec<Vec<f64>> = (0..k).map(|j| z_est.column(j)).collect();
    let mut warnings = Vec::new();
    let mut abs_corr = vec![vec![0.0; k]; k];
    match mode {
        CorrMode::Spearman => {
            let rt: Vec<Vec<f64>> = truth.iter().map(|c| ranks(c)).collect();
            let re: Vec<Vec<f64>> = est.iter().map(|c| ranks(c)).collect();
            for i in 0..k {
                for j in 0..k {
                    abs_corr[i][j] = pearson_or_zero(&rt[i], &re[j], i, j, &mut warnings).abs();
                }
            }
        }
        CorrMode::PearsonAfterFit => {
            for j in 0..k {
                let mut order: Vec<usize> = (0..est[j].len()).collect();
                order.sort_by(|&a, &b| est[j][a].total_cmp(&est[j][b]));
                for i in 0..k {
                    let y: Vec<f64> = order.iter().map(|&r| truth[i][r]).collect();
                    let up = isotonic(&y);
                    let neg: Vec<f64> = y.iter().map(|v| -v).collect();
                    let down: Vec<f64> = isotonic(&neg).into_iter().map(|v| -v).collect();
                    let a = pearson_or_zero(&y, &up, i, j, &mut warnings).abs();
                    let b = pearson_or_zero(&y, &down, i, j, &mut Vec::new()).abs();
                    abs_corr[i][j] = a.max(b);
                }
            }
        }
    }
    let assignment = optimal_assignment(&abs_corr)?;
    let score = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| abs_corr[i][j])
        .sum::<f64>()
        / k.max(1) as f64;
    warnings.dedup();
    Ok(MccResult {
        score,
        assignment,
        abs_corr,
        warnings,
    })
}

/// Ranks starting at 1; ties share their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
            e += 1;
        }
        let r = (s + e) as f64 / 2.0 + 1.0;
        for &k in &idx[s..=e] {
            out[k] = r;
        }
        s = e + 1;
    }
    out
}

/// Pearson correlation, `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn pearson_or_zero(a: &[f64], b: &[f64], i: usize, j: usize, warnings: &mut Vec<String>) -> f64 {
    pearson(a, b).unwrap_or_else(|| {
        warnings.push(format!("constant column in pair ({i}, {j}); correlation set to 0"));
        0.0
    })
}

/// Pool-adjacent-violators: least-squares nondecreasing fit of `y`.
pub fn isotonic(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().expect("two blocks");
            *last = ((m1 * n1 as f64 + m2 * n2 as f64) / (n1 + n2) as f64, n1 + n2);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, n)| std::iter::repeat(m).take(n))
        .collect()
}
