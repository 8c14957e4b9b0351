use super::*;
use crate::oracle::{fd_jacobian, FdConfig};
use crate::structure::{brute_force_diversity, support_intersection_condition, threshold_support};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn diverse_structure_three_by_three() {
    let m = sample_structure(3, 3, true, &mut rng(0)).unwrap();
    assert!(check_structural_diversity(&m).unwrap().holds);
    assert!(brute_force_diversity(&m).unwrap().holds);
}

#[test]
fn single_concept_two_classes() {
    let m = sample_structure(1, 2, true, &mut rng(4)).unwrap();
    assert!(m.rows()[0] == vec![1, 0] || m.rows()[0] == vec![0, 1]);
    assert!(check_structural_diversity(&m).unwrap().holds);
}

#[test]
fn diverse_structures_across_shapes() {
    let mut r = rng(11);
    for n_a in 1..=6 {
        for u in 2..=7 {
            match sample_structure(n_a, u, true, &mut r) {
                Ok(m) => {
                    assert!(check_structural_diversity(&m).unwrap().holds, "{n_a}x{u}");
                    assert_eq!(m.zero_rows(), Vec::<usize>::new());
                }
                // only when no antichain of n_A zero sets fits in u columns
                Err(GenError::Config(_)) => assert!(binomial(u, u / 2) < n_a as u128),
                Err(e) => panic!("{e}"),
            }
        }
    }
}

#[test]
fn single_class_is_infeasible() {
    assert!(matches!(sample_structure(2, 1, true, &mut rng(0)), Err(GenError::Config(_))));
}

#[test]
fn unconstrained_structure_is_deterministic() {
    let a = sample_structure(4, 5, false, &mut rng(9)).unwrap();
    let b = sample_structure(4, 5, false, &mut rng(9)).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert!(a.validate().is_ok());
}

fn dense_spec(n_a: usize, n_b: usize, u: usize, seed: u64) -> GenerativeSpec {
    GenerativeSpec::sample(&SpecOptions::new(n_a, n_b, u, seed)).unwrap()
}

#[test]
fn empirical_variances_match_table() {
    let spec = dense_spec(3, 1, 3, 21);
    let data = sample_dataset(&spec, 10_000, ClassMode::OneHot, &mut rng(1)).unwrap();
    let z = data.z.as_ref().unwrap();
    for i in 0..spec.n_a {
        for j in 0..spec.u {
            if !spec.structure.get(i, j) {
                continue;
            }
            let vals: Vec<f64> = (0..data.len()).filter(|&r| data.c.get(r, j) == 1.0).map(|r| z.get(r, i)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            let want = spec.variances[i][j];
            assert!((var - want).abs() / want < 0.10, "concept {i} class {j}: {var} vs {want}");
        }
    }
}

#[test]
fn variance_table_lies_in_range() {
    let spec = dense_spec(4, 2, 5, 3);
    let (lo, hi) = VARIANCE_RANGE;
    for v in spec.variances.iter().flatten().chain(&spec.base_variances).chain(&spec.zb_variances) {
        assert!((lo..hi).contains(v));
    }
}

#[test]
fn identical_seeds_identical_datasets() {
    let spec = dense_spec(2, 1, 3, 5);
    let a = sample_dataset(&spec, 500, ClassMode::OneHot, &mut rng(8)).unwrap();
    let b = sample_dataset(&spec, 500, ClassMode::OneHot, &mut rng(8)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_row_dataset() {
    let spec = dense_spec(2, 1, 2, 5);
    let d = sample_dataset(&spec, 1, ClassMode::OneHot, &mut rng(2)).unwrap();
    let mixer = spec.mixer().unwrap();
    let x = mix_forward(&mixer, d.z.as_ref().unwrap().row(0)).unwrap();
    assert_eq!(x, d.x.row(0));
}

#[test]
fn multi_hot_rows_have_an_active_class() {
    let spec = dense_spec(2, 0, 4, 5);
    let d = sample_dataset(&spec, 2000, ClassMode::MultiHot { p: 0.2 }, &mut rng(2)).unwrap();
    for r in 0..d.len() {
        assert!(d.c.row(r).iter().any(|&v| v == 1.0));
    }
}

#[test]
fn lowest_connected_active_class_wins() {
    let mut spec = dense_spec(1, 0, 3, 5);
    spec.structure = StructureMatrix::new(vec![vec![0, 1, 1]]).unwrap();
    assert_eq!(spec.concept_params(0, &[1, 1, 1]).1, spec.variances[0][1]);
    assert_eq!(spec.concept_params(0, &[0, 0, 1]).1, spec.variances[0][2]);
    assert_eq!(spec.concept_params(0, &[1, 0, 0]).1, spec.base_variances[0]);
}

#[test]
fn concepts_independent_of_class_free_block() {
    let spec = dense_spec(2, 2, 2, 13);
    let d = sample_dataset(&spec, 10_000, ClassMode::OneHot, &mut rng(3)).unwrap();
    let z = d.z.as_ref().unwrap();
    for j in 0..spec.u {
        let rows: Vec<usize> = (0..d.len()).filter(|&r| d.c.get(r, j) == 1.0).collect();
        for a in 0..spec.n_a {
            for b in spec.n_a..spec.n() {
                let xa: Vec<f64> = rows.iter().map(|&r| z.get(r, a)).collect();
                let xb: Vec<f64> = rows.iter().map(|&r| z.get(r, b)).collect();
                let corr = pearson(&xa, &xb);
                assert!(corr.abs() < 0.05, "class {j}: corr(z{a}, z{b}) = {corr}");
            }
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn sparse_spec(n_a: usize, n_b: usize, m: usize, violate: usize, seed: u64) -> GenerativeSpec {
    let mut opts = SpecOptions::new(n_a, n_b, n_a + 1, seed);
    opts.m = m;
    opts.mixing = MixingChoice::sparse(Nonlinearity::TanhShift, crate::genmodel::Intersect::ClassIndependent, violate);
    GenerativeSpec::sample(&opts).unwrap()
}

fn random_points(k: usize, n: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::matrix(k, n, (0..k * n).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap()
}

#[test]
fn mixing_round_trips() {
    for spec in [dense_spec(3, 2, 4, 1), sparse_spec(3, 2, 5, 0, 2), sparse_spec(2, 2, 6, 0, 3)] {
        let mixer = spec.mixer().unwrap();
        let z = random_points(1000, spec.n(), 17);
        let x = mixer.forward_batch(&z).unwrap();
        assert_eq!(x.cols(), spec.m);
        let back = mixer.inverse_batch(&x).unwrap();
        assert!(back.sub(&z).unwrap().max_abs() < 1e-9, "{:?}", spec.mixing);
    }
}

#[test]
fn embedded_dense_mixing_round_trips() {
    let mut opts = SpecOptions::new(2, 1, 3, 7);
    opts.m = 6;
    let spec = GenerativeSpec::sample(&opts).unwrap();
    let mixer = spec.mixer().unwrap();
    let z = random_points(200, 3, 4);
    let back = mixer.inverse_batch(&mixer.forward_batch(&z).unwrap()).unwrap();
    assert!(back.sub(&z).unwrap().max_abs() < 1e-9);
}

#[test]
fn diagonal_core_gives_diagonal_jacobian() {
    let spec = MixingSpec::SparseSandwich {
        weights: vec![vec![1.2, 0.0, 0.0], vec![0.0, -0.9, 0.0], vec![0.0, 0.0, 1.1]],
        nonlinearity: Nonlinearity::TanhShift,
    };
    let mixer = Mixer::new(&spec, 3, 3).unwrap();
    let j = ground_truth_jacobian(&mixer, &[0.3, -1.0, 2.0]).unwrap();
    for a in 0..3 {
        for b in 0..3 {
            assert_eq!(j.get(a, b) == 0.0, a != b);
        }
    }
}

#[test]
fn sparse_jacobian_support_is_sound() {
    for seed in 0..5 {
        let spec = sparse_spec(3, 2, 6, 0, 100 + seed);
        let declared = spec.mixing.support().unwrap();
        let mixer = spec.mixer().unwrap();
        let pts = random_points(20, spec.n(), seed);
        for r in 0..20 {
            let fd = fd_jacobian(|z| mix_forward(&mixer, z).unwrap(), pts.row(r), FdConfig::default()).unwrap();
            let got = threshold_support(&fd, 1e-6);
            assert!(got.is_subset(&declared));
            let ad = ground_truth_jacobian(&mixer, pts.row(r)).unwrap();
            for (a, row) in fd.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    assert!((ad.get(a, b) - v).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn support_intersection_flags() {
    for seed in 0..10 {
        let spec = sparse_spec(2, 3, 5, 0, seed);
        let f = spec.mixing.support().unwrap();
        let zb: Vec<usize> = (2..5).collect();
        assert!(support_intersection_condition(&f, &zb).iter().all(|&b| b));

        let broken = sparse_spec(2, 3, 5, 2, seed);
        let f = broken.mixing.support().unwrap();
        let fails = support_intersection_condition(&f, &(0..5).collect::<Vec<_>>())
            .iter()
            .filter(|&&b| !b)
            .count();
        assert!(fails >= 2, "seed {seed}");
    }
}

#[test]
fn distinctness_proxy() {
    let spec = dense_spec(3, 1, 4, 2);
    assert!(conditional_density_distinctness(&spec).holds);

    let mut flat = spec.clone();
    flat.variances.iter_mut().flatten().for_each(|v| *v = 1.0);
    flat.base_variances.iter_mut().for_each(|v| *v = 1.0);
    assert!(!conditional_density_distinctness(&flat).holds);

    let mut one = dense_spec(1, 0, 2, 2);
    one.u = 1;
    one.structure = StructureMatrix::new(vec![vec![1]]).unwrap();
    one.means = vec![vec![0.0]];
    one.variances = vec![vec![2.0]];
    assert!(!conditional_density_distinctness(&one).holds);
}

#[test]
fn spec_json_round_trip() {
    let spec = sparse_spec(2, 1, 4, 0, 6);
    let back: GenerativeSpec = serde_json::from_str(&spec.to_json()).unwrap();
    assert_eq!(back, spec);
    assert_eq!(back.hash(), spec.hash());
}

#[test]
fn dataset_files_round_trip() {
    let spec = dense_spec(2, 1, 3, 6);
    let d = sample_dataset(&spec, 50, ClassMode::OneHot, &mut rng(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &d, &spec, 3, serde_json::json!({})).unwrap();
    let header = fs_first_line(&dir.path().join("data.csv"));
    assert_eq!(header, "x1,x2,x3,c1,c2,c3,z1,z2,z3");
    let (back, meta) = read_dataset(dir.path()).unwrap();
    assert_eq!(back.x, d.x);
    assert_eq!(back.c, d.c);
    assert_eq!(back.z, d.z);
    assert_eq!(meta.n_samples, 50);
    assert_eq!(meta.spec, spec);
}

fn fs_first_line(p: &std::path::Path) -> String {
    std::fs::read_to_string(p).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn all_column_intersection_and_reported_violations() {
    for n in 2..=6 {
        for seed in 0..5 {
            let mut opts = SpecOptions::new(n - 1, 1, 2 * n - 1, seed);
            opts.mixing = MixingChoice::sparse(Nonlinearity::TanhShift, Intersect::All, 0);
            let spec = GenerativeSpec::sample(&opts).unwrap();
            assert!(spec.intersection_violations().is_empty(), "n={n} seed={seed}");

            opts.mixing = MixingChoice::sparse(Nonlinearity::TanhShift, Intersect::All, 1);
            let spec = GenerativeSpec::sample(&opts).unwrap();
            assert_eq!(spec.intersection_violations().len(), 1, "n={n} seed={seed}");
        }
    }
    assert!(dense_spec(2, 1, 3, 0).intersection_violations().is_empty());
}
