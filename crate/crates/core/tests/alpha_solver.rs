mod support;

use nalgebra::{DMatrix, DVector};
use nmix::admm::{alpha_objective, p_update, p_update_scalar, solve_alpha_admm, AlphaSolver};
use nmix::{CountDataset, FeatureSet, FitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{barrier_newton, golden_section, poisson_counts, prox_objective, subproblem_objective, uniform};

struct Instance {
    data: CountDataset,
    features: FeatureSet,
    rates: DMatrix<f64>,
}

fn random_instance(seed: u64, n: usize, r: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = uniform(&mut rng, n, 3, 0.0, 2.0);
    let v = uniform(&mut rng, n, 3, 0.0, 2.0);
    let rates = &u * v.transpose();
    let z = uniform(&mut rng, n * n, r, 0.0, 1.0);
    let mut alpha = DVector::from_fn(r, |_, _| rng.random_range(0.0..1.0));
    alpha *= 0.9 / (&z * &alpha).max();
    let p = &z * &alpha;
    let thinned = DMatrix::from_fn(n, n, |i, j| rates[(i, j)] * p[j * n + i]);
    let counts = poisson_counts(&mut rng, &thinned);
    Instance { data: CountDataset::fully_observed(counts).unwrap(), features: FeatureSet::new(z, n, n).unwrap(), rates }
}

fn observed_vectors(inst: &Instance) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let pos = inst.data.observed_positions();
    let z = inst.features.restricted(&pos);
    let y = pos.iter().map(|&(i, j)| inst.data.count(i, j) as f64).collect();
    let l = pos.iter().map(|&(i, j)| inst.rates[(i, j)]).collect();
    (z, y, l)
}

#[test]
fn closed_form_step_matches_golden_section() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let y = rng.random_range(0..=20u32) as f64;
        let lambda = 10.0 - rng.random_range(0.0..10.0);
        let p_bar = rng.random_range(-1.0..2.0);
        let rho = 5.0 - rng.random_range(0.0..5.0);
        let closed = p_update_scalar(y, lambda, p_bar, rho);
        let oracle = golden_section(|p| prox_objective(y, lambda, p_bar, rho, p), 1e-12, 1.0, 1e-10);
        assert!((closed - oracle).abs() <= 1e-6, "y={y} l={lambda} pb={p_bar} rho={rho}: {closed} vs {oracle}");
    }
}

#[test]
fn p_step_stays_in_unit_interval_and_positive_for_positive_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let y: Vec<f64> = (0..500).map(|_| rng.random_range(0..5u32) as f64).collect();
    let l: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1e4)).collect();
    let pb: Vec<f64> = (0..500).map(|_| rng.random_range(-50.0..50.0)).collect();
    let p = p_update(&y, &l, &pb, 0.7).unwrap();
    for (k, &pk) in p.iter().enumerate() {
        assert!((0.0..=1.0).contains(&pk));
        if y[k] > 0.0 {
            assert!(pk > 0.0);
        }
    }
    assert!(p_update(&y, &l, &pb, 0.0).is_err());
}

#[test]
fn admm_reaches_reference_optimum() {
    for seed in 0..4 {
        let inst = random_instance(seed, 20, 4);
        let config = FitConfig { admm_tol: 1e-9, admm_max_iter: 100_000, ..FitConfig::default() };
        let warm = DVector::from_element(4, 0.2);
        let sol = solve_alpha_admm(&inst.data, &inst.rates, &inst.features, &config, &warm).unwrap();
        assert!(sol.diagnostics.converged);
        assert!(sol.diagnostics.primal_residual <= 1e-6);

        let (z, y, l) = observed_vectors(&inst);
        let ones = DVector::from_element(4, 1.0);
        let start = &ones * (0.5 / (&z * &ones).max());
        let reference = barrier_newton(&z, &y, &l, &start, 1e-10);
        let f_ref = subproblem_objective(&z, &y, &l, &reference);
        let f_admm = subproblem_objective(&z, &y, &l, &sol.alpha);
        assert!((f_admm - f_ref).abs() <= 1e-4 * f_ref.abs(), "seed {seed}: admm {f_admm} reference {f_ref}");
    }
}

#[test]
fn best_so_far_objective_is_non_increasing_and_p_is_feasible() {
    let inst = random_instance(7, 15, 3);
    let (_, y, l) = observed_vectors(&inst);
    let mut solver = AlphaSolver::new(&inst.data, &inst.features, 1.0, DVector::from_element(3, 0.1)).unwrap();
    let diag = solver.solve(&y, &l, 300, 1e-10).unwrap();
    let mut best = f64::INFINITY;
    for &f in &diag.objective_trace {
        let next = best.min(f);
        assert!(next <= best + 1e-6);
        best = next;
    }
    for (k, &p) in solver.state().p.iter().enumerate() {
        assert!((0.0..=1.0).contains(&p));
        if y[k] > 0.0 {
            assert!(p > 0.0);
        }
    }
}

#[test]
fn shared_scalar_detection_matches_one_dimensional_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n_i, n_j) = (6, 5);
    let rates = uniform(&mut rng, n_i, n_j, 0.5, 6.0);
    let counts = poisson_counts(&mut rng, &rates.map(|l| 0.4 * l));
    let data = CountDataset::fully_observed(counts).unwrap();
    let features = FeatureSet::constant(n_i, n_j);
    let config = FitConfig { admm_tol: 1e-10, admm_max_iter: 50_000, ..FitConfig::default() };
    let sol = solve_alpha_admm(&data, &rates, &features, &config, &DVector::from_element(1, 0.5)).unwrap();
    let (sy, sl) = (data.counts_f64().sum(), rates.sum());
    let oracle = golden_section(|p| p * sl - sy * p.ln(), 1e-12, 1.0, 1e-12);
    assert!((sol.alpha[0] - oracle).abs() <= 1e-3, "{} vs {oracle}", sol.alpha[0]);
}

#[test]
fn warm_start_at_kkt_point_is_a_fixed_point() {
    let inst = random_instance(9, 12, 3);
    let (_, y, l) = observed_vectors(&inst);
    let mut solver = AlphaSolver::new(&inst.data, &inst.features, 1.0, DVector::from_element(3, 0.2)).unwrap();
    let first = solver.solve(&y, &l, 100_000, 1e-10).unwrap();
    assert!(first.converged);
    let alpha = solver.alpha().clone();
    let again = solver.solve(&y, &l, 100_000, 1e-10).unwrap();
    assert!(again.converged);
    assert_eq!(again.iterations, 1);
    assert!((solver.alpha() - alpha).amax() <= 1e-8);
}

#[test]
fn rank_deficient_design_is_flagged_not_rejected() {
    let inst = random_instance(3, 8, 2);
    let z = inst.features.z();
    let dup = DMatrix::from_fn(z.nrows(), 3, |k, c| z[(k, c.min(1))]);
    let features = FeatureSet::new(dup, 8, 8).unwrap();
    let config = FitConfig::default();
    let sol = solve_alpha_admm(&inst.data, &inst.rates, &features, &config, &DVector::from_element(3, 0.1)).unwrap();
    assert!(sol.diagnostics.rank_deficient);
    assert_eq!(sol.alpha.len(), 3);
    // minimum-norm solution splits weight evenly across the duplicated columns
    assert!((sol.alpha[1] - sol.alpha[2]).abs() <= 1e-8);
}

#[test]
fn only_observed_entries_enter_the_subproblem() {
    let inst = random_instance(4, 10, 2);
    let mut mask = DMatrix::from_element(10, 10, true);
    mask[(2, 3)] = false;
    mask[(7, 1)] = false;
    let masked = CountDataset::new(inst.data.counts().clone(), mask.clone()).unwrap();
    let mut altered = inst.data.counts().clone();
    altered[(2, 3)] += 50;
    let altered = CountDataset::new(altered, mask).unwrap();
    let config = FitConfig::default();
    let warm = DVector::from_element(2, 0.3);
    let a = solve_alpha_admm(&masked, &inst.rates, &inst.features, &config, &warm).unwrap();
    let b = solve_alpha_admm(&altered, &inst.rates, &inst.features, &config, &warm).unwrap();
    assert_eq!(a.alpha, b.alpha);
    let y: Vec<f64> = masked.observed_positions().iter().map(|&(i, j)| masked.count(i, j) as f64).collect();
    let l: Vec<f64> = masked.observed_positions().iter().map(|&(i, j)| inst.rates[(i, j)]).collect();
    let p: Vec<f64> = masked.observed_positions().iter().map(|&(i, j)| a.p[(i, j)]).collect();
    assert!(alpha_objective(&y, &l, &p).is_finite());
}
