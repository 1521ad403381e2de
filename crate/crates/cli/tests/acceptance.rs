//! Acceptance checks, one PASS/FAIL line each. Exits non-zero on any failure.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use nmix::admm::{p_update_scalar, solve_alpha_admm};
use nmix::baselines::{poisson_nmf, PoissonNmf};
use nmix::fit::{gradient_check, random_interior_point};
use nmix::metrics::{alpha_mse, auroc, factor_mse, factor_mse_with, Alignment};
use nmix::model::{collapsed_loglik, truncated_mixture_sum};
use nmix::synth::{simulate, SynthConfig};
use nmix::{CountDataset, FeatureSet, FitConfig, Fitter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{
    barrier_newton, brute_auroc, brute_factor_mse, golden_section, poisson_counts, prox_objective,
    subproblem_objective, uniform,
};

const MIXTURE_TOL: f64 = 1e-10;
const MIXTURE_N_MAX: u64 = 500;
const P_STEP_TOL: f64 = 1e-6;
const ADMM_REL_TOL: f64 = 1e-4;
const ADMM_PRIMAL_TOL: f64 = 1e-6;
const REFERENCE_TOL: f64 = 1e-10;
const DESCENT_SLACK: f64 = 1e-8;
const FACTOR_RATIO: f64 = 0.5;
const ALPHA_RATIO: f64 = 0.1;
const GRADIENT_TOL: f64 = 1e-4;
const GRADIENT_STEP: f64 = 1e-5;
const COLLAPSE_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(elapsed < limit, format!("{detail}; {:.2} s of {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mixture_identity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for y in 0..=10u64 {
        for lambda in [0.1, 1.0, 5.0, 20.0] {
            for p in [0.05, 0.5, 0.95] {
                let direct = truncated_mixture_sum(y, lambda, p, MIXTURE_N_MAX).map_err(|e| e.to_string())?;
                let collapsed = collapsed_loglik(y, lambda, p).map_err(|e| e.to_string())?.exp();
                worst = worst.max((direct - collapsed).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    if worst > MIXTURE_TOL {
        return Err(format!("max difference {worst:e}"));
    }
    within(elapsed, Duration::from_secs(1), format!("max difference {worst:e}"))
}

fn closed_form_p_step() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let y = rng.random_range(0..=20u32) as f64;
        let lambda = 10.0 - rng.random_range(0.0..10.0);
        let p_bar = rng.random_range(-1.0..=2.0);
        let rho = 5.0 - rng.random_range(0.0..5.0);
        let closed = p_update_scalar(y, lambda, p_bar, rho);
        let oracle = golden_section(|p| prox_objective(y, lambda, p_bar, rho, p), 1e-12, 1.0, 1e-10);
        worst = worst.max((closed - oracle).abs());
    }
    let elapsed = start.elapsed();
    if worst > P_STEP_TOL {
        return Err(format!("max deviation {worst:e}"));
    }
    within(elapsed, Duration::from_secs(1), format!("max deviation {worst:e} over 1000 draws"))
}

struct AlphaInstance {
    data: CountDataset,
    features: FeatureSet,
    rates: DMatrix<f64>,
}

fn alpha_instance(seed: u64, n: usize, r: usize) -> AlphaInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rates = uniform(&mut rng, n, 3, 0.0, 2.0) * uniform(&mut rng, n, 3, 0.0, 2.0).transpose();
    let z = uniform(&mut rng, n * n, r, 0.0, 1.0);
    let mut alpha = DVector::from_fn(r, |_, _| rng.random_range(0.0..1.0));
    alpha *= 0.9 / (&z * &alpha).max();
    let p = &z * &alpha;
    let counts = poisson_counts(&mut rng, &DMatrix::from_fn(n, n, |i, j| rates[(i, j)] * p[j * n + i]));
    AlphaInstance {
        data: CountDataset::fully_observed(counts).unwrap(),
        features: FeatureSet::new(z, n, n).unwrap(),
        rates,
    }
}

fn admm_optimality() -> Outcome {
    let start = Instant::now();
    let config = FitConfig { admm_tol: 1e-9, admm_max_iter: 100_000, ..FitConfig::default() };
    let (mut worst_rel, mut worst_primal): (f64, f64) = (0.0, 0.0);
    for seed in 0..10 {
        let inst = alpha_instance(100 + seed, 20, 4);
        let sol = solve_alpha_admm(&inst.data, &inst.rates, &inst.features, &config, &DVector::from_element(4, 0.2))
            .map_err(|e| e.to_string())?;
        let pos = inst.data.observed_positions();
        let z = inst.features.restricted(&pos);
        let y: Vec<f64> = pos.iter().map(|&(i, j)| inst.data.count(i, j) as f64).collect();
        let l: Vec<f64> = pos.iter().map(|&(i, j)| inst.rates[(i, j)]).collect();
        let ones = DVector::from_element(4, 1.0);
        let reference = barrier_newton(&z, &y, &l, &(&ones * (0.5 / (&z * &ones).max())), REFERENCE_TOL);
        let f_ref = subproblem_objective(&z, &y, &l, &reference);
        let f = subproblem_objective(&z, &y, &l, &sol.alpha);
        worst_rel = worst_rel.max((f - f_ref).abs() / f_ref.abs());
        worst_primal = worst_primal.max(sol.diagnostics.primal_residual);
    }
    let elapsed = start.elapsed();
    let detail = format!("max relative gap {worst_rel:e}, max primal residual {worst_primal:e}");
    if worst_rel > ADMM_REL_TOL || worst_primal > ADMM_PRIMAL_TOL {
        return Err(detail);
    }
    within(elapsed, Duration::from_secs(10), detail)
}

fn bcd_descent() -> Outcome {
    let start = Instant::now();
    let mut worst_rise = f64::NEG_INFINITY;
    for seed in 0..20 {
        let synth = SynthConfig { n_rows: 30, n_cols: 30, rank: 5, n_features: 3, seed, ..SynthConfig::default() };
        let (inst, _, data) = simulate(&synth).map_err(|e| e.to_string())?;
        let config = FitConfig { rank: 5, seed, ..FitConfig::default() };
        let mut fitter = Fitter::new(&data, &inst.features, config).map_err(|e| e.to_string())?;
        let mut prev = fitter.result().initial_objective;
        for _ in 0..200 {
            let f = fitter.step().map_err(|e| e.to_string())?;
            worst_rise = worst_rise.max(f - prev);
            prev = f;
        }
    }
    let elapsed = start.elapsed();
    let detail = format!("largest step change {worst_rise:e} over 20 x 200 iterations");
    if worst_rise > DESCENT_SLACK {
        return Err(detail);
    }
    within(elapsed, Duration::from_secs(120), detail)
}

fn recovery_versus_nmf() -> Outcome {
    let start = Instant::now();
    let (mut ratios, mut alpha_ratios) = (Vec::new(), Vec::new());
    let (mut ours_all, mut theirs_all) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let synth = SynthConfig { seed, ..SynthConfig::default() };
        let (inst, _, data) = simulate(&synth).map_err(|e| e.to_string())?;
        let truth = &inst.factors;
        let config = FitConfig { rank: synth.rank, seed, ..FitConfig::default() };
        let mut fitter = Fitter::new(&data, &inst.features, config.clone()).map_err(|e| e.to_string())?;
        let alpha_init = alpha_mse(&inst.alpha, fitter.alpha()).map_err(|e| e.to_string())?;
        for _ in 0..100 {
            fitter.step().map_err(|e| e.to_string())?;
        }
        let nmf = poisson_nmf(&data, synth.rank, 100, config.epsilon, seed).map_err(|e| e.to_string())?;
        let mse = |u: &DMatrix<f64>, v: &DMatrix<f64>| -> Result<f64, String> {
            let mu = factor_mse(&truth.u, u).map_err(|e| e.to_string())?;
            let mv = factor_mse(&truth.v, v).map_err(|e| e.to_string())?;
            Ok(0.5 * (mu + mv))
        };
        let ours = mse(&fitter.factors().u, &fitter.factors().v)?;
        let theirs = mse(&nmf.factors.u, &nmf.factors.v)?;
        ratios.push(ours / theirs);
        ours_all.push(ours);
        theirs_all.push(theirs);
        alpha_ratios.push(alpha_mse(&inst.alpha, fitter.alpha()).map_err(|e| e.to_string())? / alpha_init);
    }
    let elapsed = start.elapsed();
    let (r, a) = (median(ratios), median(alpha_ratios));
    let detail = format!(
        "median factor MSE ratio {r:.3} (medians {:.4} vs {:.4}), median alpha MSE ratio {a:.4}",
        median(ours_all),
        median(theirs_all)
    );
    if r > FACTOR_RATIO || a > ALPHA_RATIO {
        return Err(detail);
    }
    within(elapsed, Duration::from_secs(600), detail)
}

fn gradient_correctness() -> Outcome {
    let synth =
        SynthConfig { n_rows: 10, n_cols: 9, rank: 3, n_features: 3, gamma: 3.0, seed: 6, ..SynthConfig::default() };
    let (inst, _, data) = simulate(&synth).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (factors, detection) = random_interior_point(&mut rng, &inst.features, 3, 0.8);
        let err =
            gradient_check(&data, &inst.features, &factors, &detection, GRADIENT_STEP).map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    check(worst <= GRADIENT_TOL, format!("max relative error {worst:e} at 5 points"))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut auroc_mismatch = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 8.0).collect();
        if auroc(&labels, &scores).map_err(|e| e.to_string())? != brute_auroc(&labels, &scores) {
            auroc_mismatch += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let f = rng.random_range(1..=6);
        let truth = uniform(&mut rng, 10, f, 0.01, 1.0);
        let est = uniform(&mut rng, 10, f, 0.01, 1.0);
        let h = factor_mse_with(&truth, &est, Alignment::Hungarian).map_err(|e| e.to_string())?;
        worst = worst.max((h - brute_factor_mse(&truth, &est)).abs());
    }
    check(
        auroc_mismatch == 0 && worst <= 1e-14,
        format!("{auroc_mismatch} AUROC mismatches in 100 cases, max alignment gap {worst:e} in 50 cases"),
    )
}

fn unit_detection_collapse() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(80 + seed);
        let rates = uniform(&mut rng, 15, 4, 0.0, 2.0) * uniform(&mut rng, 12, 4, 0.0, 2.0).transpose();
        let data = CountDataset::fully_observed(poisson_counts(&mut rng, &rates)).unwrap();
        let features = FeatureSet::constant(15, 12);
        let config = FitConfig { rank: 4, seed, ..FitConfig::default() };
        let mut fitter = Fitter::with_fixed_alpha(&data, &features, DVector::from_element(1, 1.0), config.clone())
            .map_err(|e| e.to_string())?;
        let mut nmf = PoissonNmf::new(&data, 4, config.epsilon, seed).map_err(|e| e.to_string())?;
        for _ in 0..100 {
            let a = fitter.step().map_err(|e| e.to_string())?;
            let b = nmf.step().map_err(|e| e.to_string())?;
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= COLLAPSE_TOL, format!("max trace difference {worst:e} over 5 x 100 iterations"))
}

fn alpha_solve_speed() -> Outcome {
    let inst = alpha_instance(9, 50, 8);
    let config = FitConfig::default();
    let start = Instant::now();
    let sol = solve_alpha_admm(&inst.data, &inst.rates, &inst.features, &config, &DVector::from_element(8, 0.1))
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1), format!("{} iterations", sol.diagnostics.iterations))
}

fn cv_end_to_end() -> Outcome {
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_nmix");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
        }
    };
    let d = dir.path().to_str().unwrap();
    run(&[
        "simulate",
        "--rows",
        "20",
        "--cols",
        "18",
        "--rank",
        "3",
        "--features",
        "3",
        "--gamma",
        "3",
        "--seed",
        "10",
        "--out",
        d,
    ])?;
    let (counts, features) = (format!("{d}/counts.csv"), format!("{d}/features.csv"));
    let cv = |name: &str| -> Result<String, String> {
        let out = format!("{d}/{name}");
        run(&[
            "cv",
            "--counts",
            &counts,
            "--features",
            &features,
            "--ranks",
            "2,3",
            "--folds",
            "5",
            "--max-outer",
            "50",
            "--seed",
            "3",
            "--out",
            &out,
        ])?;
        std::fs::read_to_string(&out).map_err(|e| e.to_string())
    };
    let (a, b) = (cv("a.csv")?, cv("b.csv")?);
    if a != b {
        return Err("two runs produced different tables".into());
    }
    let mut lines = a.lines();
    if lines.next() != Some("method,rank,fold,rrmse,auroc,auprc") {
        return Err("unexpected header".into());
    }
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for method in ["nmix", "poisson-nmf", "mc-cf", "trunc-svd"] {
        for rank in ["2", "3"] {
            let group: Vec<_> = rows.iter().filter(|r| r[0] == method && r[1] == rank).collect();
            let mean = group.iter().find(|r| r[2] == "mean").ok_or(format!("{method} rank {rank}: no mean row"))?;
            if group.len() != 6 {
                return Err(format!("{method} rank {rank}: {} rows", group.len()));
            }
            for v in &mean[3..] {
                let v: f64 = v.parse().map_err(|_| format!("{method}: unparsable metric {v}"))?;
                if !v.is_finite() {
                    return Err(format!("{method} rank {rank}: non-finite mean metric"));
                }
            }
        }
    }
    Ok(format!("{} rows, byte-identical across runs, all four methods", rows.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("mixture marginal equals collapsed Poisson", mixture_identity),
        ("closed-form detection step", closed_form_p_step),
        ("ADMM reaches the reference optimum", admm_optimality),
        ("outer loop is monotone", bcd_descent),
        ("factor and detection recovery beat Poisson NMF", recovery_versus_nmf),
        ("analytic gradient", gradient_correctness),
        ("AUROC and alignment oracles", metric_oracles),
        ("unit detection collapses to Poisson NMF", unit_detection_collapse),
        ("detection solve at 50 x 50 under 1 s", alpha_solve_speed),
        ("cross-validation end to end", cv_end_to_end),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.2} s]", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.2} s]", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
