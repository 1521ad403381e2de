//! Multiplicative updates for the weighted KL factorization
//!
//! ```text
//! minimize_{U, V >= 0}  sum_ij  p_ij (U V^T)_ij - y_ij ln (U V^T)_ij
//! ```
//!
//! Each update minimizes a Jensen majorizer of the objective in one block,
//! so the objective never increases. A small `epsilon` is added to the
//! weighted denominators and entries are floored at [`FACTOR_FLOOR`] so the
//! factors stay strictly positive.

use nalgebra::{DMatrix, DVector};

use crate::error::{NmixError, Result};
use crate::model::FactorModel;

/// Lower bound applied to every factor entry after an update.
pub const FACTOR_FLOOR: f64 = 1e-16;

/// Default denominator offset.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Intermediate quantities of one sweep: weighted sums `U~ = P V`,
/// `V~ = P^T U` and the ratio numerators `Phi = (Y / UV^T) V`,
/// `Psi = (Y^T / VU^T) U`.
#[derive(Debug, Clone)]
pub struct MuWorkspace {
    pub u_tilde: DMatrix<f64>,
    pub v_tilde: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub epsilon: f64,
}

impl MuWorkspace {
    pub fn compute(factors: &FactorModel, p: &DMatrix<f64>, y: &DMatrix<f64>, epsilon: f64) -> Result<Self> {
        check_inputs(&factors.u, &factors.v, p, y, epsilon)?;
        let ratio = count_ratio(y, &factors.rates(), epsilon);
        Ok(Self {
            u_tilde: p * &factors.v,
            v_tilde: p.transpose() * &factors.u,
            phi: &ratio * &factors.v,
            psi: ratio.transpose() * &factors.u,
            epsilon,
        })
    }
}

fn check_inputs(a: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>, y: &DMatrix<f64>, epsilon: f64) -> Result<()> {
    let shape = (a.nrows(), b.nrows());
    if p.shape() != shape || y.shape() != shape {
        return Err(NmixError::dims(
            "weight/count shape",
            format!("{shape:?}"),
            format!("{:?}/{:?}", p.shape(), y.shape()),
        ));
    }
    if a.ncols() != b.ncols() {
        return Err(NmixError::dims("factor rank", a.ncols(), b.ncols()));
    }
    if !(epsilon >= 0.0) {
        return Err(NmixError::invalid("epsilon must be nonnegative"));
    }
    if a.iter().chain(b.iter()).any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(NmixError::invalid("factor entries must be strictly positive and finite"));
    }
    if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(NmixError::invalid("weights must lie in [0, 1]"));
    }
    if y.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(NmixError::invalid("counts must be finite and nonnegative"));
    }
    Ok(())
}

/// `y / max(lambda, eps)` where `y > 0`, zero elsewhere.
fn count_ratio(y: &DMatrix<f64>, rates: &DMatrix<f64>, epsilon: f64) -> DMatrix<f64> {
    y.zip_map(rates, |y, l| if y > 0.0 { y / l.max(epsilon) } else { 0.0 })
}

/// Update `a` in `lambda = a b^T` with weights `p` (shape of `lambda`).
fn mu_step(a: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>, y: &DMatrix<f64>, epsilon: f64) -> DMatrix<f64> {
    let rates = a * b.transpose();
    let numer = count_ratio(y, &rates, epsilon) * b;
    let denom = p * b;
    let mut out = a.clone();
    for ((x, &n), &d) in out.iter_mut().zip(numer.iter()).zip(denom.iter()) {
        *x = (*x * n / (d + epsilon)).max(FACTOR_FLOOR);
    }
    out
}

/// One multiplicative step on `U` with `V` held fixed.
pub fn mu_update_u(factors: &FactorModel, p: &DMatrix<f64>, y: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    check_inputs(&factors.u, &factors.v, p, y, epsilon)?;
    Ok(mu_step(&factors.u, &factors.v, p, y, epsilon))
}

/// One multiplicative step on `V` with `U` held fixed.
pub fn mu_update_v(factors: &FactorModel, p: &DMatrix<f64>, y: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    check_inputs(&factors.u, &factors.v, p, y, epsilon)?;
    Ok(mu_step(&factors.v, &factors.u, &p.transpose(), &y.transpose(), epsilon))
}

/// `sum_ij p_ij lambda_ij - y_ij ln(lambda_ij)` over all entries.
pub fn weighted_kl_objective(factors: &FactorModel, p: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let rates = factors.rates();
    let mut total = 0.0;
    for ((&l, &w), &y) in rates.iter().zip(p.iter()).zip(y.iter()) {
        total += w * l;
        if y > 0.0 {
            if l <= 0.0 {
                return f64::INFINITY;
            }
            total -= y * l.ln();
        }
    }
    total
}

fn row_objective(u: &DVector<f64>, v: &DMatrix<f64>, p_row: &[f64], y_row: &[f64]) -> f64 {
    let mut total = 0.0;
    for j in 0..v.nrows() {
        let l = v.row(j).transpose().dot(u);
        total += p_row[j] * l;
        if y_row[j] > 0.0 {
            total -= y_row[j] * l.ln();
        }
    }
    total
}

/// Gap `g(u, u_bar) - f(u)` between the Jensen majorizer expanded at
/// `u_bar` and the row objective. Nonnegative, zero at `u == u_bar`.
pub fn surrogate_gap(
    u_candidate: &DVector<f64>,
    u_bar: &DVector<f64>,
    v: &DMatrix<f64>,
    p_row: &[f64],
    y_row: &[f64],
) -> Result<f64> {
    let f = v.ncols();
    if u_candidate.len() != f || u_bar.len() != f {
        return Err(NmixError::dims("row length", f, u_candidate.len()));
    }
    if p_row.len() != v.nrows() || y_row.len() != v.nrows() {
        return Err(NmixError::dims("row weights", v.nrows(), p_row.len()));
    }
    if u_candidate.iter().chain(u_bar.iter()).any(|x| !(*x > 0.0)) {
        return Err(NmixError::invalid("surrogate points must be strictly positive"));
    }
    let u_tilde: f64 = (0..v.nrows()).map(|j| p_row[j] * v.row(j).transpose().dot(u_candidate)).sum();
    let mut g = u_tilde;
    for j in 0..v.nrows() {
        if y_row[j] == 0.0 {
            continue;
        }
        let denom = v.row(j).transpose().dot(u_bar);
        for r in 0..f {
            let vr = v[(j, r)];
            if vr == 0.0 {
                continue;
            }
            let beta = u_bar[r] * vr / denom;
            g -= y_row[j] * beta * (u_candidate[r] * vr / beta).ln();
        }
    }
    Ok(g - row_objective(u_candidate, v, p_row, y_row))
}
