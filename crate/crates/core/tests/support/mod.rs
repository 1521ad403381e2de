//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Golden-section minimizer of a unimodal function on `[lo, hi]`.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    let mid = 0.5 * (lo + hi);
    [lo, mid, hi].into_iter().min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap()
}

/// `-y ln p + p lambda + (rho/2)(p - p_bar)^2`.
pub fn prox_objective(y: f64, lambda: f64, p_bar: f64, rho: f64, p: f64) -> f64 {
    let log_term = if y > 0.0 { -y * p.ln() } else { 0.0 };
    log_term + p * lambda + 0.5 * rho * (p - p_bar).powi(2)
}

pub fn subproblem_objective(z: &DMatrix<f64>, y: &[f64], lambda: &[f64], alpha: &DVector<f64>) -> f64 {
    let p = z * alpha;
    p.iter().zip(y).zip(lambda).map(|((&p, &y), &l)| p * l - if y > 0.0 { y * p.ln() } else { 0.0 }).sum()
}

/// Log-barrier Newton method for
/// `min sum lambda_k (Z a)_k - y_k ln (Z a)_k  s.t.  0 <= Z a <= 1`.
/// Requires a strictly feasible start. Runs until the duality-gap bound
/// `m / t` falls below `gap_tol * max(1, |f|)`.
pub fn barrier_newton(z: &DMatrix<f64>, y: &[f64], lambda: &[f64], start: &DVector<f64>, gap_tol: f64) -> DVector<f64> {
    let n = z.nrows();
    let r = z.ncols();
    let m = n + y.iter().filter(|&&y| y == 0.0).count();
    let feasible = |a: &DVector<f64>| (z * a).iter().all(|&p| p > 0.0 && p < 1.0);
    let phi = |a: &DVector<f64>, t: f64| -> f64 {
        let p = z * a;
        let mut v = 0.0;
        for k in 0..n {
            v += t * p[k] * lambda[k];
            if y[k] > 0.0 {
                v -= t * y[k] * p[k].ln();
            } else {
                v -= p[k].ln();
            }
            v -= (1.0 - p[k]).ln();
        }
        v
    };
    assert!(feasible(start), "barrier start must be strictly feasible");
    let mut a = start.clone();
    let mut t = 1.0;
    loop {
        for _ in 0..200 {
            let p = z * &a;
            let mut grad = DVector::zeros(r);
            let mut hess = DMatrix::zeros(r, r);
            for k in 0..n {
                let zk = z.row(k).transpose();
                let (g, h) = if y[k] > 0.0 {
                    (t * (lambda[k] - y[k] / p[k]), t * y[k] / (p[k] * p[k]))
                } else {
                    (t * lambda[k] - 1.0 / p[k], 1.0 / (p[k] * p[k]))
                };
                let q = 1.0 - p[k];
                let g = g + 1.0 / q;
                let h = h + 1.0 / (q * q);
                grad += &zk * g;
                hess += &zk * zk.transpose() * h;
            }
            let step = hess.clone().cholesky().expect("barrier Hessian is positive definite").solve(&(-&grad));
            let decrement = -grad.dot(&step);
            if decrement / 2.0 <= 1e-14 {
                break;
            }
            let f0 = phi(&a, t);
            let mut s = 1.0;
            loop {
                let cand = &a + &step * s;
                if feasible(&cand) && phi(&cand, t) <= f0 - 0.25 * s * decrement {
                    a = cand;
                    break;
                }
                s *= 0.5;
                if s < 1e-20 {
                    break;
                }
            }
            if s < 1e-20 {
                break;
            }
        }
        let f = subproblem_objective(z, y, lambda, &a);
        if (m as f64) / t <= gap_tol * f.abs().max(1.0) {
            return a;
        }
        t *= 10.0;
    }
}

/// Probability of a positive outscoring a negative, ties counted half.
pub fn brute_auroc(labels: &[bool], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn unit_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut c in out.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Permutation-aligned MSE by enumerating every column permutation.
pub fn brute_factor_mse(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> f64 {
    let t = unit_columns(truth);
    let e = unit_columns(estimate);
    let f = t.ncols();
    permutations(f)
        .into_iter()
        .map(|perm| (0..f).map(|c| (t.column(perm[c]) - e.column(c)).norm_squared()).sum::<f64>() / f as f64)
        .fold(f64::INFINITY, f64::min)
}

/// Textbook KL-NMF multiplicative update of `U`:
/// `U <- U .* ((Y ./ (U V^T)) V) ./ (1 V)`.
pub fn kl_nmf_update_u(u: &DMatrix<f64>, v: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let (i_n, j_n, f_n) = (u.nrows(), v.nrows(), u.ncols());
    let mut out = u.clone();
    for i in 0..i_n {
        for f in 0..f_n {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..j_n {
                let l: f64 = (0..f_n).map(|g| u[(i, g)] * v[(j, g)]).sum();
                num += y[(i, j)] / l * v[(j, f)];
                den += v[(j, f)];
            }
            out[(i, f)] = u[(i, f)] * num / den;
        }
    }
    out
}

pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn poisson_counts<R: Rng>(rng: &mut R, rates: &DMatrix<f64>) -> DMatrix<u64> {
    use rand_distr::{Distribution, Poisson};
    rates.map(|l| if l > 0.0 { Poisson::new(l).unwrap().sample(rng) as u64 } else { 0 })
}
