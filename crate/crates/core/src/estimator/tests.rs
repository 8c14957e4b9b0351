use super::*;
use crate::genmodel::{sample_dataset, ClassMode, Dataset, GenerativeSpec, SpecOptions};
use crate::oracle::gaussian_nll_closed_form;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

fn one_hot(rows: usize, u: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Tensor::zeros(rows, u);
    for i in 0..rows {
        c.set(i, r.gen_range(0..u), 1.0);
    }
    c
}

#[test]
fn identity_model_matches_gaussian_entropy() {
    let n = 3;
    let mut cfg = TrainConfig::baseline(2, 1, 0);
    cfg.lambda = 0.0;
    let mut model = FittedModel::init(&cfg, n, 2).unwrap();
    model.prior = ConditionalPrior::standard(2, 1, 2);
    let x = gaussian(10_000, n, 1);
    let c = one_hot(10_000, 2, 2);
    let loss = model.loss(&x, &c).unwrap().total;
    let want = 0.5 * n as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!((loss - want).abs() / want < 0.02, "{loss} vs {want}");
}

#[test]
fn denser_structure_costs_more() {
    let cfg = TrainConfig::new(2, 0, 0);
    let mut model = FittedModel::init(&cfg, 2, 3).unwrap();
    let x = gaussian(64, 2, 1);
    let c = one_hot(64, 3, 2);
    model.prior.log_vars = Tensor::zeros(2, 3);
    model.prior.logits = Tensor::filled(2, 3, 0.0);
    let dense = model.loss(&x, &c).unwrap();
    model.prior.logits = Tensor::from_rows(&[vec![0.0, -8.0, -8.0], vec![-8.0, 0.0, -8.0]]).unwrap();
    // same fit: the prior tables are identical across classes
    let sparse = model.loss(&x, &c).unwrap();
    assert!((dense.nll - sparse.nll).abs() < 1e-9);
    assert!(dense.total > sparse.total);
}

/// Model with random flow and prior parameters.
fn random_model(n_a: usize, n_b: usize, u: usize, jac: bool) -> FittedModel {
    let mut cfg = TrainConfig::new(n_a, n_b, 5);
    cfg.depth = 2;
    cfg.penalize_decoder_jacobian = jac;
    cfg.jacobian_points = 4;
    let mut model = FittedModel::init(&cfg, n_a + n_b, u).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let mut p = model.params();
    for t in &mut p {
        t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.4..0.4));
    }
    model.set_params(&p).unwrap();
    model
}

fn check_gradients(model: &FittedModel, x: &Tensor, c: &Tensor) {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let (total, _) = model.objective_on(&mut tape, &vars, x, c, None).unwrap();
    let mut grads = tape.backward(total).unwrap();
    let g: Vec<Tensor> = vars.params().into_iter().map(|v| grads.take(v)).collect();
    let base = model.params();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, t) in base.iter().enumerate() {
        for idx in 0..t.len() {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[k].data_mut()[idx] += delta;
                let mut m = model.clone();
                m.set_params(&p).unwrap();
                let mut tape = Tape::new();
                let vars = m.register(&mut tape);
                m.objective_on(&mut tape, &vars, x, c, None).unwrap().1.total
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let ad = g[k].data()[idx];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-2);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-3, "worst relative gradient error {worst}");
}

#[test]
fn objective_gradients_match_finite_differences() {
    let model = random_model(2, 1, 3, false);
    check_gradients(&model, &gaussian(16, 3, 9), &one_hot(16, 3, 4));
}

#[test]
fn jacobian_penalty_gradients_match_finite_differences() {
    let model = random_model(2, 2, 2, true);
    check_gradients(&model, &gaussian(16, 4, 10), &one_hot(16, 2, 5));
}

#[test]
fn binary_gating_matches_closed_form_prior() {
    let (n_a, n_b, u) = (3, 1, 3);
    let mut prior = ConditionalPrior::new(n_a, n_b, u, true, 3);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mask = [[1u8, 0, 1], [0, 1, 0], [1, 1, 0]];
    for i in 0..n_a {
        for j in 0..u {
            prior.means.set(i, j, r.gen_range(-1.0..1.0));
            prior.log_vars.set(i, j, r.gen_range(-0.5..0.5));
            prior.logits.set(i, j, if mask[i][j] == 1 { 40.0 } else { -40.0 });
        }
        prior.base_means.set(0, i, r.gen_range(-1.0..1.0));
        prior.base_log_vars.set(0, i, r.gen_range(-0.5..0.5));
    }
    prior.zb_means.set(0, 0, 0.3);
    prior.zb_log_vars.set(0, 0, 0.2);
    let z = gaussian(12, 4, 3);
    let c = one_hot(12, u, 8);
    let mut tape = Tape::new();
    let vars = prior.register(&mut tape);
    let zv = tape.constant(z.clone());
    let cv = tape.constant(c.clone());
    let out = prior.nll_on(&mut tape, &vars, zv, cv, None).unwrap();
    for row in 0..12 {
        let j = (0..u).find(|&j| c.get(row, j) == 1.0).unwrap();
        let mut mean = Vec::new();
        let mut var = Vec::new();
        for (i, m) in mask.iter().enumerate() {
            if m[j] == 1 {
                mean.push(prior.means.get(i, j));
                var.push(prior.log_vars.get(i, j).exp());
            } else {
                mean.push(prior.base_means.get(0, i));
                var.push(prior.base_log_vars.get(0, i).exp());
            }
        }
        mean.push(0.3);
        var.push(0.2f64.exp());
        let want = gaussian_nll_closed_form(z.row(row), &mean, &var);
        assert!((tape.value(out).get(row, 0) - want).abs() < 1e-10);
    }
}

#[test]
fn saturated_logits_binarize_stably() {
    let cfg = TrainConfig::new(2, 0, 0);
    let mut model = FittedModel::init(&cfg, 2, 3).unwrap();
    model.prior.logits = Tensor::from_rows(&[vec![6.0, -6.0, 6.0], vec![-6.0, 6.0, -6.0]]).unwrap();
    let want = StructureMatrix::new(vec![vec![1, 0, 1], vec![0, 1, 0]]).unwrap();
    for tau in [0.1, 0.3, 0.5, 0.7, 0.9] {
        assert_eq!(extract_structure(&model, tau).unwrap().matrix, want);
    }
}

#[test]
fn untrained_logits_sit_on_the_boundary() {
    let model = FittedModel::init(&TrainConfig::new(2, 0, 0), 2, 2).unwrap();
    assert!(model.prior.structure_weights().data().iter().all(|&w| w == 0.5));
    let e = extract_structure(&model, 0.5).unwrap();
    assert_eq!(e.zero_rows, vec![0, 1]);
    assert_eq!(e.warnings.len(), 1);
    assert!(extract_structure(&model, 1.0).is_err());
}

#[test]
fn projections() {
    assert_eq!(reduce_dimension_matrix(4, 4, 1).unwrap(), Tensor::identity(4));
    let p = reduce_dimension_matrix(9, 4, 1).unwrap();
    let gram = p.matmul_t(&p).unwrap();
    assert!(gram.sub(&Tensor::identity(4)).unwrap().max_abs() < 1e-10);
    assert!(reduce_dimension_matrix(3, 4, 1).is_err());
    let x = gaussian(5, 9, 2);
    assert_eq!(reduce_dimension(&x, 4, 1).unwrap().cols(), 4);
}

fn small_dataset(seed: u64, n: usize) -> (GenerativeSpec, Dataset) {
    let spec = GenerativeSpec::sample(&SpecOptions::new(2, 1, 3, seed)).unwrap();
    let data = sample_dataset(&spec, n, ClassMode::OneHot, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
    (spec, data)
}

fn quick_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(2, 1, seed);
    cfg.epochs = 3;
    cfg.batch_size = 64;
    cfg.depth = 2;
    cfg
}

#[test]
fn training_is_deterministic() {
    let (_, data) = small_dataset(0, 400);
    let a = train(&data, &quick_config(4)).unwrap();
    let b = train(&data, &quick_config(4)).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(
        a.curve.last().unwrap().train_nll.to_bits(),
        b.curve.last().unwrap().train_nll.to_bits()
    );
}

#[test]
fn checkpoint_round_trip() {
    let (_, data) = small_dataset(1, 300);
    let model = train(&data, &quick_config(2)).unwrap();
    let bytes = model.to_bytes();
    let back = FittedModel::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.encode(&data.x).unwrap(), model.encode(&data.x).unwrap());
    assert!(FittedModel::from_bytes(&bytes[..bytes.len() - 8]).is_err());
}

#[test]
fn loss_decreases_over_first_epochs() {
    let (_, data) = small_dataset(0, 4000);
    let mut cfg = TrainConfig::new(2, 1, 0);
    cfg.epochs = 10;
    cfg.patience = 0;
    let model = train(&data, &cfg).unwrap();
    let curve: Vec<f64> = model.curve.iter().map(|r| r.train_nll).collect();
    assert_eq!(curve.len(), 10);
    for w in curve.windows(2) {
        assert!(w[1] < w[0], "{curve:?}");
    }
}

#[test]
fn divergence_is_reported() {
    let (_, mut data) = small_dataset(0, 100);
    data.x.data_mut()[0] = 1e200;
    match train(&data, &quick_config(0)) {
        Err(EstimatorError::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn mismatched_batch_is_rejected() {
    let model = FittedModel::init(&TrainConfig::new(2, 1, 0), 3, 2).unwrap();
    assert!(model.loss(&gaussian(4, 3, 0), &one_hot(4, 3, 0)).is_err());
}
