//! Nonlinear regression score for block-wise recovery.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::EvalError;
use crate::numerics::{Adam, Tape, Tensor};

const HIDDEN: usize = 32;
const STEPS: usize = 600;
const LR: f64 = 0.01;

fn standardize_cols(t: &Tensor, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    (0..t.cols())
        .map(|j| {
            let m = rows.iter().map(|&r| t.get(r, j)).sum::<f64>() / n;
            let v = rows.iter().map(|&r| (t.get(r, j) - m).powi(2)).sum::<f64>() / n;
            (m, v.sqrt().max(1e-12))
        })
        .unzip()
}

fn apply(t: &Tensor, rows: &[usize], mean: &[f64], sd: &[f64]) -> Tensor {
    let mut out = t.select_rows(rows);
    let c = out.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let j = i % c;
        *v = (*v - mean[j]) / sd[j];
    }
    out
}

/// Mean held-out `R²` (clipped to `[0, 1]`) of a one-hidden-layer tanh
/// network (width 32) predicting every true coordinate from the estimated
/// block, trained on a seeded 80% split. Returns 1 for an empty block.
pub fn block_identifiability_score(zb_true: &Tensor, zb_est: &Tensor, seed: u64) -> Result<f64, EvalError> {
    if zb_true.rows() != zb_est.rows() {
        return Err(EvalError::Shape("row counts differ".into()));
    }
    if zb_true.cols() == 0 || zb_est.cols() == 0 {
        return Ok(1.0);
    }
    let n = zb_true.rows();
    if n < 10 {
        return Err(EvalError::Shape("block score needs at least 10 rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let cut = n * 4 / 5;
    let (tr, te) = idx.split_at(cut);
    let (mx, sx) = standardize_cols(zb_est, tr);
    let (my, sy) = standardize_cols(zb_true, tr);
    let (xtr, ytr) = (apply(zb_est, tr, &mx, &sx), apply(zb_true, tr, &my, &sy));
    let (xte, yte) = (apply(zb_est, te, &mx, &sx), apply(zb_true, te, &my, &sy));
    let (din, dout) = (zb_est.cols(), zb_true.cols());
    let init = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        let d = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("std");
        Tensor::matrix(r, c, (0..r * c).map(|_| d.sample(rng)).collect()).expect("shape")
    };
    let mut params = vec![
        init(din, HIDDEN, &mut rng),
        Tensor::zeros(1, HIDDEN),
        init(HIDDEN, dout, &mut rng),
        Tensor::zeros(1, dout),
    ];
    let mut adam = Adam::new(LR);
    let forward = |tape: &mut Tape, p: &[crate::numerics::Var], x: &Tensor| -> Result<crate::numerics::Var, EvalError> {
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, p[0])?;
        let h = tape.add_row(h, p[1])?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, p[2])?;
        Ok(tape.add_row(o, p[3])?)
    };
    for _ in 0..STEPS {
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let pred = forward(&mut tape, &vars, &xtr)?;
        let yv = tape.constant(ytr.clone());
        let d = tape.sub(pred, yv)?;
        let sq = tape.square(d);
        let loss = tape.mean(sq);
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| g.take(v)).collect();
        adam.step(&mut params, &grads)?;
    }
    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|t| tape.constant(t.clone())).collect();
    let pred = forward(&mut tape, &vars, &xte)?;
    let pred = tape.value(pred);
    let mut total = 0.0;
    for j in 0..dout {
        let y = yte.column(j);
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let ss_tot: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
        let ss_res: f64 = y.iter().enumerate().map(|(r, v)| (v - pred.get(r, j)).powi(2)).sum();
        let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
        total += r2.clamp(0.0, 1.0);
    }
    Ok(total / dout as f64)
}
