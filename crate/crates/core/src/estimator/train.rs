use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EstimatorError, FittedModel, TrainConfig};
use crate::genmodel::Dataset;
use crate::numerics::{Adam, NumericsError, Tape, Tensor};

/// Losses above this are treated as divergence.
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub l1_m: f64,
    pub wall_ms: u64,
}

/// Fits a fresh model.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<FittedModel, EstimatorError> {
    let model = FittedModel::init(config, data.x.cols(), data.c.cols())?;
    train_from(data, model, config.epochs)
}

/// Train/validation split, fixed by the seed so a resumed run sees the same
/// partition.
fn split(n: usize, config: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5b11_7000));
    let n_val = ((n as f64) * config.val_fraction).floor() as usize;
    let n_val = if n - n_val == 0 { 0 } else { n_val };
    let val = idx[..n_val].to_vec();
    let tr = idx[n_val..].to_vec();
    (tr, val)
}

/// Continues training `model` for up to `epochs` more epochs. Returns the
/// snapshot with the lowest validation objective (training objective when no
/// validation split is configured).
pub fn train_from(data: &Dataset, mut model: FittedModel, epochs: usize) -> Result<FittedModel, EstimatorError> {
    let config = model.config.clone();
    config.validate()?;
    if data.is_empty() {
        return Err(EstimatorError::Config("dataset is empty".into()));
    }
    let (tr, val) = split(data.len(), &config);
    let val_data = (!val.is_empty()).then(|| (data.x.select_rows(&val), data.c.select_rows(&val)));

    let mut adam = Adam::new(config.lr);
    let mut params = model.params();
    let first_epoch = model.curve.last().map_or(0, |r| r.epoch + 1);
    let mut best: Option<(f64, Vec<Tensor>, usize)> = None;
    let mut stale = 0usize;
    let mut order = tr.clone();

    for epoch in first_epoch..first_epoch + epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64));
        order.copy_from_slice(&tr);
        order.shuffle(&mut rng);
        let mut nll_sum = 0.0;
        let mut obj_sum = 0.0;
        let mut count = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = data.x.select_rows(chunk);
            let c = data.c.select_rows(chunk);
            let noise = model.prior.gating.then(|| model.prior.sample_gate_noise(&mut rng));
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let (total, parts) = match model.objective_on(&mut tape, &vars, &x, &c, noise.as_ref()) {
                Ok(r) => r,
                Err(EstimatorError::Diverged { loss, .. }) => {
                    return Err(EstimatorError::Diverged { epoch, batch: b, loss })
                }
                Err(e) => return Err(e),
            };
            if !(parts.total.abs() < DIVERGENCE_LOSS) {
                return Err(EstimatorError::Diverged {
                    epoch,
                    batch: b,
                    loss: parts.total,
                });
            }
            let mut grads = tape.backward(total)?;
            let g: Vec<Tensor> = vars.params().into_iter().map(|v| grads.take(v)).collect();
            adam.step(&mut params, &g).map_err(|e| match e {
                NumericsError::NonFinite { step } => EstimatorError::Training(NumericsError::Contract(format!(
                    "non-finite gradient at epoch {epoch}, batch {b} (optimizer step {step})"
                ))),
                other => EstimatorError::Training(other),
            })?;
            model.set_params(&params)?;
            nll_sum += parts.nll * chunk.len() as f64;
            obj_sum += parts.total * chunk.len() as f64;
            count += chunk.len();
        }
        let train_nll = nll_sum / count as f64;
        let (val_nll, score) = match &val_data {
            Some((x, c)) => {
                let l = model.loss(x, c)?;
                (l.nll, l.total)
            }
            None => (train_nll, obj_sum / count as f64),
        };
        if !score.is_finite() || score.abs() > DIVERGENCE_LOSS {
            return Err(EstimatorError::Diverged {
                epoch,
                batch: usize::MAX,
                loss: score,
            });
        }
        let l1_m = if model.prior.gating {
            model.prior.structure_weights().sum()
        } else {
            0.0
        };
        model.curve.push(EpochRecord {
            epoch,
            train_nll,
            val_nll,
            l1_m,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
            best = Some((score, params.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    if let Some((_, p, epoch)) = best {
        model.set_params(&p)?;
        model.best_epoch = epoch;
    }
    Ok(model)
}
