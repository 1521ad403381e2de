//! Reference factorization methods: Poisson (KL) NMF, ridge-regularized
//! matrix completion by alternating least squares, and truncated SVD.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NmixError, Result};
use crate::fit::init_factors;
use crate::linalg::{pseudo_inverse, uniform_matrix, PINV_RTOL};
use crate::model::{objective_with_rates, CountDataset, FactorModel};
use crate::mu::{mu_update_u, mu_update_v};

/// Stepwise KL-divergence NMF on the observed entries. Truly missing
/// entries are filled with the current rates before each sweep.
#[derive(Debug, Clone)]
pub struct PoissonNmf<'a> {
    data: &'a CountDataset,
    factors: FactorModel,
    epsilon: f64,
    ones: DMatrix<f64>,
    initial_objective: f64,
    trace: Vec<f64>,
}

impl<'a> PoissonNmf<'a> {
    /// Factors are initialized exactly as the N-mixture fitter does for the
    /// same seed.
    pub fn new(data: &'a CountDataset, rank: usize, epsilon: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(NmixError::invalid("rank must be at least 1"));
        }
        if !(epsilon > 0.0) {
            return Err(NmixError::invalid("epsilon must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = init_factors(&mut rng, data.n_rows(), data.n_cols(), rank);
        let ones = DMatrix::from_element(data.n_rows(), data.n_cols(), 1.0);
        let initial_objective = objective_with_rates(data, &factors.rates(), &ones);
        Ok(Self { data, factors, epsilon, ones, initial_objective, trace: Vec::new() })
    }

    pub fn step(&mut self) -> Result<f64> {
        let rates = self.factors.rates();
        let y = DMatrix::from_fn(self.data.n_rows(), self.data.n_cols(), |i, j| {
            if self.data.is_observed(i, j) {
                self.data.count(i, j) as f64
            } else {
                rates[(i, j)]
            }
        });
        self.factors.u = mu_update_u(&self.factors, &self.ones, &y, self.epsilon)?;
        self.factors.v = mu_update_v(&self.factors, &self.ones, &y, self.epsilon)?;
        let f = objective_with_rates(self.data, &self.factors.rates(), &self.ones);
        self.trace.push(f);
        Ok(f)
    }

    pub fn factors(&self) -> &FactorModel {
        &self.factors
    }

    pub fn initial_objective(&self) -> f64 {
        self.initial_objective
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn into_fit(self) -> NmfFit {
        NmfFit { factors: self.factors, initial_objective: self.initial_objective, objective_trace: self.trace }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfFit {
    pub factors: FactorModel,
    pub initial_objective: f64,
    /// `sum_observed lambda - y ln(lambda)` after each iteration.
    pub objective_trace: Vec<f64>,
}

pub fn poisson_nmf(data: &CountDataset, rank: usize, max_iter: usize, epsilon: f64, seed: u64) -> Result<NmfFit> {
    let mut nmf = PoissonNmf::new(data, rank, epsilon, seed)?;
    for _ in 0..max_iter {
        nmf.step()?;
    }
    Ok(nmf.into_fit())
}

/// Unconstrained factors from matrix completion.
#[derive(Debug, Clone, PartialEq)]
pub struct McCfFit {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Regularized squared loss after each alternating sweep.
    pub loss_trace: Vec<f64>,
}

impl McCfFit {
    pub fn predict(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }
}

pub fn mc_cf_loss(data: &CountDataset, u: &DMatrix<f64>, v: &DMatrix<f64>, reg: f64) -> f64 {
    let mut loss = 0.0;
    for (i, j) in data.observed_positions() {
        let r = data.count(i, j) as f64 - u.row(i).dot(&v.row(j));
        loss += r * r;
    }
    loss + reg * (u.norm_squared() + v.norm_squared())
}

/// Ridge solve `(G + reg I) x = b`, falling back to the pseudo-inverse
/// when the system is singular.
fn ridge_solve(mut gram: DMatrix<f64>, rhs: DVector<f64>, reg: f64) -> DVector<f64> {
    for k in 0..gram.nrows() {
        gram[(k, k)] += reg;
    }
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => pseudo_inverse(&gram, PINV_RTOL).pinv * rhs,
    }
}

/// Update every row of `a` given `b`, where `a` indexes axis `axis` of the data.
fn als_sweep(data: &CountDataset, a: &mut DMatrix<f64>, b: &DMatrix<f64>, reg: f64, rows: bool) {
    let f = a.ncols();
    for r in 0..a.nrows() {
        let mut gram = DMatrix::zeros(f, f);
        let mut rhs = DVector::zeros(f);
        for c in 0..b.nrows() {
            let (i, j) = if rows { (r, c) } else { (c, r) };
            if !data.is_observed(i, j) {
                continue;
            }
            let bc = b.row(c).transpose();
            gram.ger(1.0, &bc, &bc, 1.0);
            rhs.axpy(data.count(i, j) as f64, &bc, 1.0);
        }
        let x = ridge_solve(gram, rhs, reg);
        a.set_row(r, &x.transpose());
    }
}

/// `minimize sum_observed (y_ij - u_i . v_j)^2 + reg (||U||^2 + ||V||^2)` by
/// alternating exact ridge solves.
pub fn mc_cf(data: &CountDataset, rank: usize, reg: f64, max_iter: usize, seed: u64) -> Result<McCfFit> {
    if rank == 0 {
        return Err(NmixError::invalid("rank must be at least 1"));
    }
    if !(reg >= 0.0) || !reg.is_finite() {
        return Err(NmixError::invalid("regularization must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = uniform_matrix(&mut rng, data.n_rows(), rank, 0.0, 1.0);
    let mut v = uniform_matrix(&mut rng, data.n_cols(), rank, 0.0, 1.0);
    let mut loss_trace = Vec::with_capacity(max_iter);
    for _ in 0..max_iter {
        als_sweep(data, &mut u, &v, reg, true);
        als_sweep(data, &mut v, &u, reg, false);
        loss_trace.push(mc_cf_loss(data, &u, &v, reg));
    }
    Ok(McCfFit { u, v, loss_trace })
}

/// Best rank-`rank` Frobenius approximation of the zero-filled count matrix.
pub fn truncated_svd(data: &CountDataset, rank: usize) -> Result<DMatrix<f64>> {
    let (ni, nj) = (data.n_rows(), data.n_cols());
    if rank == 0 || rank > ni.min(nj) {
        return Err(NmixError::invalid(format!("rank {rank} must lie in 1..={}", ni.min(nj))));
    }
    let y = data.counts_f64();
    let svd = y.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut approx = DMatrix::zeros(ni, nj);
    for &k in order.iter().take(rank) {
        approx.ger(svd.singular_values[k], &u.column(k), &v_t.row(k).transpose(), 1.0);
    }
    Ok(approx)
}
