//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL`
//! line with the measured quantities to stderr before asserting.
//!
//! The study-backed criteria (1, 2, 3, 7) run the full `reproduce` protocols
//! at N = 10,000 over ten seeds and take a long time on a single core; study
//! runs are shared between tests and kept under the cargo target tmp dir for
//! inspection.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use concept_ident::cli::config::ExperimentConfig;
use concept_ident::cli::report::write_outputs;
use concept_ident::cli::study::{run_study, Arm, RunRecord, StudyKind};
use concept_ident::estimator::{FittedModel, TrainConfig};
use concept_ident::eval::{
    block_identifiability_score, jacobian_summary, local_disentanglement_check, mcc, mig,
    pairwise_disentanglement_check, CorrMode, GeneratorInverse,
};
use concept_ident::flow::{FlowConfig, FlowModel};
use concept_ident::genmodel::{sample_dataset, ClassMode, GenerativeSpec, SpecOptions};
use concept_ident::numerics::Tensor;
use concept_ident::oracle::{enumerate_permutation_assignment, fd_jacobian, FdConfig};
use concept_ident::structure::{brute_force_diversity, check_structural_diversity, optimal_assignment, StructureMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const COUNTS: [usize; 3] = [2, 3, 5];
const SEEDS: u64 = 10;
const PRIMARY: f64 = 0.1;

// Pinned tolerances.
const C1_MARGIN: f64 = 0.1;
const C2_MIN_MATCHES: usize = 7;
const C3_MIN_EXACT: usize = 8;
const C3_OUTLIER_SD: f64 = 2.0;
const C4_TAU: f64 = 0.05;
const C4_RANDOM_MODELS: u64 = 20;
const C4_MIN_RANDOM_FAILS: usize = 18;
const C4_BUDGET_SECS: f64 = 120.0;
const C5_LOGDET_TOL: f64 = 1e-4;
const C5_GRAD_RTOL: f64 = 1e-3;
const C6_INVARIANCE_TOL: f64 = 1e-9;
const C6_MIG_MAX: f64 = 0.05;
const C6_R2_ROTATION_MIN: f64 = 0.95;
const C6_R2_NOISE_MAX: f64 = 0.05;

/// Written straight to stderr so the line survives libtest's output capture.
fn emit(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn report(criterion: u32, pass: bool, detail: &str) {
    emit(&format!("criterion {criterion}: {} — {detail}", if pass { "PASS" } else { "FAIL" }));
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn run_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn study_config(lambda_grid: Vec<f64>, grid_counts: Option<Vec<usize>>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.generation.n_samples = 10_000;
    cfg.training.lambda_grid = lambda_grid;
    cfg.study.concept_counts = COUNTS.to_vec();
    cfg.study.primary_lambda = PRIMARY;
    cfg.study.grid_concept_counts = grid_counts;
    cfg.trials = (0..SEEDS).collect();
    cfg.validate().unwrap();
    cfg
}

fn run(study: StudyKind, cfg: ExperimentConfig) -> RunRecord {
    let dir = run_dir(study.name());
    let t = Instant::now();
    let rec = run_study(study, &cfg, &dir, jobs()).unwrap();
    write_outputs(&dir, &rec).unwrap();
    emit(&format!(
        "{}: {}/{} trials ok in {:.0}s ({})",
        study.name(),
        rec.coverage.succeeded,
        rec.coverage.planned,
        t.elapsed().as_secs_f64(),
        dir.display()
    ));
    rec
}

/// Theorem-2 study with the λ grid at n_A = 3.
fn thm2() -> &'static RunRecord {
    static R: OnceLock<RunRecord> = OnceLock::new();
    R.get_or_init(|| run(StudyKind::Thm2Changing, study_config(vec![0.01, 0.1, 1.0], Some(vec![3]))))
}

fn prop2() -> &'static RunRecord {
    static R: OnceLock<RunRecord> = OnceLock::new();
    R.get_or_init(|| run(StudyKind::Prop2AllConcepts, study_config(vec![PRIMARY], None)))
}

fn ablations() -> &'static RunRecord {
    static R: OnceLock<RunRecord> = OnceLock::new();
    R.get_or_init(|| run(StudyKind::AblationsC2, study_config(vec![PRIMARY], None)))
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn arm_mcc(rec: &RunRecord, arm: Arm, n_a: usize) -> Vec<f64> {
    rec.values(arm, n_a, rec.headline_lambda(arm), "mcc")
}

// ---------------------------------------------------------------------------
// 1. Ours vs Base ordering, margin and spread.

#[test]
fn criterion_1_ours_beats_base_with_margin_and_lower_spread() {
    let mut pass = true;
    let mut lines = Vec::new();
    for rec in [thm2(), prop2()] {
        for n_a in COUNTS {
            let ours = arm_mcc(rec, Arm::Ours, n_a);
            let base = arm_mcc(rec, Arm::Base, n_a);
            let (mo, so) = mean_sd(&ours);
            let (mb, sb) = mean_sd(&base);
            let ok = ours.len() == SEEDS as usize
                && base.len() == SEEDS as usize
                && mo - mb >= C1_MARGIN
                && so < sb;
            pass &= ok;
            lines.push(format!(
                "{} n_A={n_a}: Ours {mo:.3}±{so:.3} (n={}) Base {mb:.3}±{sb:.3} (n={}) diff {:+.3} {}",
                rec.study.name(),
                ours.len(),
                base.len(),
                mo - mb,
                if ok { "ok" } else { "FAIL" }
            ));
        }
    }
    report(1, pass, &lines.join("; "));
    assert!(pass, "{lines:#?}");
}

// ---------------------------------------------------------------------------
// 2. λ = 0.1 selected by MCC in most replications of the grid.

#[test]
fn criterion_2_lambda_grid_selects_point_one() {
    let rec = thm2();
    let per_seed: Vec<_> = rec
        .lambda_selection
        .iter()
        .filter(|s| s.n_a == 3 && s.seed.is_some())
        .collect();
    let hits = per_seed.iter().filter(|s| s.selected == PRIMARY).count();
    let by_mean = rec
        .lambda_selection
        .iter()
        .find(|s| s.n_a == 3 && s.seed.is_none())
        .map(|s| s.selected);
    let selected: Vec<f64> = per_seed.iter().map(|s| s.selected).collect();
    let pass = per_seed.len() == SEEDS as usize && hits >= C2_MIN_MATCHES;
    report(
        2,
        pass,
        &format!(
            "λ=0.1 selected in {hits}/{} replications (need ≥ {C2_MIN_MATCHES}); per-seed {selected:?}; by mean over seeds {by_mean:?}",
            per_seed.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. Structure recovery; failures must be training-NLL outliers.

#[test]
fn criterion_3_structure_recovered_up_to_permutation() {
    let rec = thm2();
    let mut pass = true;
    let mut lines = Vec::new();
    for n_a in COUNTS {
        let trials: Vec<_> = rec
            .ok_trials()
            .filter(|t| t.result.plan.arm == Arm::Ours && t.result.plan.n_a == n_a && t.result.plan.lambda == PRIMARY)
            .collect();
        assert!(trials.iter().all(|t| t.result.u <= 5), "u must stay ≤ 5");
        let nll: Vec<f64> = trials.iter().map(|t| t.metrics["final_train_nll"]).collect();
        let (m, sd) = mean_sd(&nll);
        let mut exact = 0;
        let mut unexplained = Vec::new();
        for (t, &v) in trials.iter().zip(&nll) {
            if t.metrics["structure_exact"] == 1.0 {
                exact += 1;
            } else if !((v - m).abs() > C3_OUTLIER_SD * sd) {
                unexplained.push(t.result.plan.seed);
            }
        }
        let ok = trials.len() == SEEDS as usize && exact >= C3_MIN_EXACT && unexplained.is_empty();
        pass &= ok;
        lines.push(format!(
            "n_A={n_a}: exact {exact}/{}, failures not NLL outliers: seeds {unexplained:?}",
            trials.len()
        ));
    }
    report(3, pass, &lines.join("; "));
    assert!(pass, "{lines:#?}");
}

// ---------------------------------------------------------------------------
// 4. Disentanglement checks: exact inverse passes, random models fail.

fn all_checks_pass(spec: &GenerativeSpec, model: &dyn concept_ident::eval::LatentEncoder, seed: u64) -> (bool, usize, f64) {
    let m = &spec.structure;
    let summary = jacobian_summary(spec, model, 64, seed).unwrap();
    let mut pass = true;
    let mut asserted = 0;
    let mut worst = 0.0_f64;
    for i in 0..m.u() {
        for j in i + 1..m.u() {
            let v = pairwise_disentanglement_check(&summary, m, (i, j), C4_TAU).unwrap();
            pass &= v.pass;
            asserted += v.blocks.len();
            worst = worst.max(v.max_magnitude);
        }
    }
    for mask in 0u32..(1 << m.u()) {
        if mask.count_ones() < 2 {
            continue;
        }
        let set: Vec<usize> = (0..m.u()).filter(|&k| mask & (1 << k) != 0).collect();
        let v = local_disentanglement_check(&summary, m, &set, C4_TAU).unwrap();
        pass &= v.pass;
        asserted += v.blocks.len();
        worst = worst.max(v.max_magnitude);
    }
    (pass, asserted, worst)
}

#[test]
fn criterion_4_support_checks_exact_inverse_and_random_models() {
    let t = Instant::now();
    let (n_a, n_b, u) = (3, 1, 4);
    let spec = GenerativeSpec::sample(&SpecOptions::new(n_a, n_b, u, 11)).unwrap();
    assert!(check_structural_diversity(&spec.structure).unwrap().holds);
    let inverse = GeneratorInverse::new(&spec).unwrap();
    let (inv_pass, asserted, inv_worst) = all_checks_pass(&spec, &inverse, 1);

    let mut random_fails = 0;
    for k in 0..C4_RANDOM_MODELS {
        let model = FittedModel::init(&TrainConfig::new(n_a, n_b, 1000 + k), spec.m, u).unwrap();
        if !all_checks_pass(&spec, &model, 2).0 {
            random_fails += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = inv_pass && asserted > 0 && random_fails >= C4_MIN_RANDOM_FAILS && secs < C4_BUDGET_SECS;
    report(
        4,
        pass,
        &format!(
            "exact inverse: {asserted} blocks, max off-block {inv_worst:.2e}, pass={inv_pass}; random models failing {random_fails}/{C4_RANDOM_MODELS} (need ≥ {C4_MIN_RANDOM_FAILS}); {secs:.1}s"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. Oracle equivalence.

fn binary_matrix(bits: u64, n_a: usize, u: usize) -> Vec<Vec<u8>> {
    (0..n_a)
        .map(|i| (0..u).map(|j| ((bits >> (i * u + j)) & 1) as u8).collect())
        .collect()
}

fn diversity_agrees(rows: Vec<Vec<u8>>) -> bool {
    let Ok(m) = StructureMatrix::new(rows) else {
        return true;
    };
    match (check_structural_diversity(&m), brute_force_diversity(&m)) {
        (Ok(a), Ok(b)) => a.holds == b.holds && a.failing_rows() == b.failing_rows(),
        (Err(_), Err(_)) => true,
        _ => false,
    }
}

fn lu_log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        let piv = a[k][k];
        acc += piv.abs().ln();
        for i in k + 1..n {
            let f = a[i][k] / piv;
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    acc
}

fn perturb_flow(flow: &mut FlowModel, rng: &mut ChaCha8Rng) {
    let p: Vec<f64> = flow
        .flat_params()
        .iter()
        .map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    flow.set_flat_params(&p).unwrap();
}

#[test]
fn criterion_5_oracle_equivalence_suite() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // Diversity: exhaustive small cases, then random 8x8.
    let mut exhaustive = 0;
    for n_a in 1..=3 {
        for u in 1..=4 {
            for bits in 0..(1u64 << (n_a * u)) {
                exhaustive += 1;
                if !diversity_agrees(binary_matrix(bits, n_a, u)) {
                    failures.push(format!("diversity {n_a}x{u} bits {bits:b}"));
                }
            }
        }
    }
    for k in 0..1000 {
        let density = rng.gen_range(0.2..0.9);
        let rows: Vec<Vec<u8>> = (0..8)
            .map(|_| (0..8).map(|_| u8::from(rng.gen_bool(density))).collect())
            .collect();
        if !diversity_agrees(rows) {
            failures.push(format!("diversity random 8x8 case {k}"));
        }
    }

    // Assignment vs enumeration, compared by objective value.
    for k in 0..1000 {
        let s: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let obj = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| s[i][j]).sum::<f64>();
        let a = optimal_assignment(&s).unwrap();
        let b = enumerate_permutation_assignment(&s).unwrap();
        if (obj(&a) - obj(&b)).abs() > 1e-12 {
            failures.push(format!("assignment case {k}: {} vs {}", obj(&a), obj(&b)));
        }
    }

    // Flow log-determinant vs determinant of the finite-difference Jacobian.
    let mut worst_logdet = 0.0_f64;
    for n in 2..=6 {
        for (k, cfg) in [FlowConfig::estimator(n, 40 + n as u64), FlowConfig::generator(n, 70 + n as u64)]
            .into_iter()
            .enumerate()
        {
            let mut flow = FlowModel::new(cfg).unwrap();
            perturb_flow(&mut flow, &mut rng);
            for _ in 0..5 {
                let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let (_, ld) = flow.forward(&z).unwrap();
                let jac = fd_jacobian(|v| flow.forward(v).unwrap().0, &z, FdConfig::default()).unwrap();
                let err = (ld - lu_log_abs_det(jac)).abs();
                worst_logdet = worst_logdet.max(err);
                if err > C5_LOGDET_TOL {
                    failures.push(format!("log_det n={n} flow {k}: error {err:.2e}"));
                }
            }
        }
    }

    // Reverse-mode gradient of the full penalized objective vs central differences.
    let mut worst_grad = 0.0_f64;
    let spec = GenerativeSpec::sample(&SpecOptions::new(2, 1, 3, 9)).unwrap();
    let data = sample_dataset(&spec, 48, ClassMode::OneHot, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for (gating, jac_penalty) in [(true, false), (true, true), (false, false)] {
        let mut cfg = TrainConfig::new(2, 1, 21);
        cfg.depth = 2;
        cfg.gating = gating;
        cfg.penalize_decoder_jacobian = jac_penalty;
        cfg.jacobian_points = 4;
        let mut model = FittedModel::init(&cfg, spec.m, spec.structure.u()).unwrap();
        perturb_flow(&mut model.flow, &mut rng);
        let (value, grads) = model.objective_gradient(&data.x, &data.c).unwrap();
        let direct = model.loss(&data.x, &data.c).unwrap().total;
        if (value - direct).abs() > 1e-10 * direct.abs().max(1.0) {
            failures.push(format!("objective value mismatch {value} vs {direct}"));
        }
        let base = model.params();
        let h = 1e-5;
        for (pi, g) in grads.iter().enumerate() {
            for e in 0..g.len() {
                let mut at = |d: f64| {
                    let mut p = base.clone();
                    p[pi].data_mut()[e] += d;
                    model.set_params(&p).unwrap();
                    model.loss(&data.x, &data.c).unwrap().total
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let ad = g.data()[e];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3);
                worst_grad = worst_grad.max(rel);
                if rel > C5_GRAD_RTOL {
                    failures.push(format!("gradient gating={gating} jac={jac_penalty} param {pi}[{e}]: {ad} vs {fd}"));
                }
            }
        }
        model.set_params(&base).unwrap();
    }

    let pass = failures.is_empty();
    report(
        5,
        pass,
        &format!(
            "{exhaustive} exhaustive + 1000 random diversity cases, 1000 assignments, max log_det error {worst_logdet:.2e}, max gradient rel. error {worst_grad:.2e}; {} failures",
            failures.len()
        ),
    );
    assert!(pass, "{:#?}", &failures[..failures.len().min(20)]);
}

// ---------------------------------------------------------------------------
// 6. Metric invariances.

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn random_rotation(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    // Gram-Schmidt on a Gaussian matrix.
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for b in &q {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_rows(&q).unwrap()
}

#[test]
fn criterion_6_metric_invariance_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (rows, n) = (3000, 4);
    let z = gaussian(rows, n, &mut rng);
    let est = z.add(&gaussian(rows, n, &mut rng).scale(0.7)).unwrap();
    let mut deltas = Vec::new();
    for mode in [CorrMode::Spearman, CorrMode::PearsonAfterFit] {
        let reference = mcc(&z, &est, mode).unwrap().score;
        let permuted = est.select_cols(&[2, 0, 3, 1]);
        let mut flipped = est.clone();
        for r in 0..rows {
            for c in [0, 3] {
                flipped.set(r, c, -est.get(r, c));
            }
        }
        deltas.push(("permutation", (mcc(&z, &permuted, mode).unwrap().score - reference).abs()));
        deltas.push(("sign flip", (mcc(&z, &flipped, mode).unwrap().score - reference).abs()));
    }
    let reference = mcc(&z, &est, CorrMode::Spearman).unwrap().score;
    let monotone = est.map(|v| v.powi(3) + 2.0 * v.exp());
    deltas.push(("monotone", (mcc(&z, &monotone, CorrMode::Spearman).unwrap().score - reference).abs()));
    let worst_delta = deltas.iter().fold(0.0_f64, |m, (_, d)| m.max(*d));
    let invariance_ok = worst_delta <= C6_INVARIANCE_TOL;

    // Each factor encoded twice: both codes share the same information.
    let factors = gaussian(rows, 2, &mut rng);
    let duplicated = factors.select_cols(&[0, 0, 1, 1]);
    let (mig_dup, _) = mig(&factors, &duplicated, 20).unwrap();
    let mig_ok = mig_dup < C6_MIG_MAX;

    let zb = gaussian(rows, 3, &mut rng);
    let rotated = zb.matmul(&random_rotation(3, &mut rng)).unwrap();
    let r2_rot = block_identifiability_score(&zb, &rotated, 1).unwrap();
    let r2_noise = block_identifiability_score(&zb, &gaussian(rows, 3, &mut rng), 1).unwrap();
    let r2_ok = r2_rot > C6_R2_ROTATION_MIN && r2_noise < C6_R2_NOISE_MAX;

    let pass = invariance_ok && mig_ok && r2_ok;
    report(
        6,
        pass,
        &format!(
            "max MCC change under permutation/sign/monotone {worst_delta:.1e}; MIG duplicated {mig_dup:.4}; block_r2 rotation {r2_rot:.4}, noise {r2_noise:.4}"
        ),
    );
    assert!(pass, "{deltas:?}");
}

// ---------------------------------------------------------------------------
// 7. Ablations: both violated settings fall below Ours.

#[test]
fn criterion_7_ablations_fall_below_ours() {
    let rec = ablations();
    let mut pass = true;
    let mut lines = Vec::new();
    for n_a in COUNTS {
        let (ours, _) = mean_sd(&arm_mcc(rec, Arm::Ours, n_a));
        let (a, _) = mean_sd(&arm_mcc(rec, Arm::BaseA, n_a));
        let (b, _) = mean_sd(&arm_mcc(rec, Arm::BaseB, n_a));
        let complete = [Arm::Ours, Arm::BaseA, Arm::BaseB]
            .iter()
            .all(|&arm| arm_mcc(rec, arm, n_a).len() == SEEDS as usize);
        let ok = complete && ours > a && ours > b;
        pass &= ok;
        lines.push(format!("n_A={n_a}: Ours {ours:.3} Base(a) {a:.3} Base(b) {b:.3} {}", if ok { "ok" } else { "FAIL" }));
    }
    report(7, pass, &lines.join("; "));
    assert!(pass, "{lines:#?}");
}

// ---------------------------------------------------------------------------
// 8. Byte-identical derived artifacts across repeated runs.

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "svg")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn criterion_8_repeated_reproduce_is_byte_identical() {
    let mut cfg = ExperimentConfig::default();
    cfg.generation.n_samples = 800;
    cfg.training.epochs = 3;
    cfg.training.lambda_grid = vec![0.01, 0.1];
    cfg.study.concept_counts = vec![2];
    cfg.trials = vec![0, 1];
    let mut compared = BTreeSet::new();
    let mut mismatched = Vec::new();
    for study in [StudyKind::Thm2Changing, StudyKind::AblationsC2] {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let dir = run_dir(&format!("determinism_{}_{rep}", study.name()));
            let rec = run_study(study, &cfg, &dir, jobs()).unwrap();
            write_outputs(&dir, &rec).unwrap();
            runs.push(artifacts(&dir));
        }
        let names = |r: &[(String, Vec<u8>)]| r.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
        if names(&runs[0]) != names(&runs[1]) {
            mismatched.push(format!("{}: file sets differ", study.name()));
        }
        for ((name, a), (_, b)) in runs[0].iter().zip(&runs[1]) {
            compared.insert(format!("{}/{name}", study.name()));
            if a != b {
                mismatched.push(format!("{}/{name}", study.name()));
            }
        }
    }
    let has_svg = compared.iter().any(|n| n.ends_with(".svg"));
    let pass = mismatched.is_empty() && has_svg && compared.iter().any(|n| n.ends_with("aggregate.csv"));
    report(8, pass, &format!("{} CSV/SVG files compared, mismatches {mismatched:?}", compared.len()));
    assert!(pass);
}
