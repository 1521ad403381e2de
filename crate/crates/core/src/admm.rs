//! ADMM solver for the detection-weight subproblem
//!
//! ```text
//! minimize_alpha  sum_{(i,j) observed}  p_ij * lambda_ij - y_ij * ln(p_ij)
//! subject to      p = Z alpha,  0 <= p <= 1
//! ```
//!
//! The splitting keeps `p` as its own variable so that the box constraint
//! is handled by a closed-form proximal step while `alpha` is a plain
//! least-squares fit against a pseudo-inverse computed once per solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{NmixError, Result};
use crate::fit::FitConfig;
use crate::linalg::{pseudo_inverse, PseudoInverse, PINV_RTOL};
use crate::model::{CountDataset, FeatureSet};

/// Residual ratio that triggers a penalty change under adaptive rho.
pub const RHO_BALANCE_RATIO: f64 = 10.0;
/// Multiplicative penalty change under adaptive rho.
pub const RHO_STEP: f64 = 2.0;

/// Minimizer over `[0, 1]` of `-y ln(p) + p lambda + (rho/2)(p - p_bar)^2`.
#[inline]
pub fn p_update_scalar(y: f64, lambda: f64, p_bar: f64, rho: f64) -> f64 {
    let b = rho * p_bar - lambda;
    let disc = (b * b + 4.0 * rho * y).sqrt();
    // Positive root of rho p^2 - b p - y = 0. For b < 0 the textbook form
    // cancels catastrophically, so use the conjugate expression.
    let root = if b >= 0.0 {
        (b + disc) / (2.0 * rho)
    } else if y > 0.0 {
        2.0 * y / (disc - b)
    } else {
        0.0
    };
    root.clamp(0.0, 1.0)
}

/// Elementwise closed-form `p` step.
pub fn p_update(y: &[f64], lambda: &[f64], p_bar: &[f64], rho: f64) -> Result<Vec<f64>> {
    if !(rho > 0.0) {
        return Err(NmixError::invalid(format!("rho must be positive, got {rho}")));
    }
    if y.len() != lambda.len() || y.len() != p_bar.len() {
        return Err(NmixError::dims("p-update inputs", y.len(), format!("{}/{}", lambda.len(), p_bar.len())));
    }
    Ok(y.iter().zip(lambda).zip(p_bar).map(|((&y, &l), &pb)| p_update_scalar(y, l, pb, rho)).collect())
}

/// `sum -y ln(p) + p lambda`, `+inf` if some `y > 0` has `p == 0`.
pub fn alpha_objective(y: &[f64], lambda: &[f64], p: &[f64]) -> f64 {
    let mut total = 0.0;
    for ((&y, &l), &p) in y.iter().zip(lambda).zip(p) {
        if y > 0.0 {
            if p <= 0.0 {
                return f64::INFINITY;
            }
            total -= y * p.ln();
        }
        total += p * l;
    }
    total
}

/// Iterates of the ADMM over the observed entries.
#[derive(Debug, Clone)]
pub struct AdmmState {
    /// Auxiliary probabilities, one per observed entry.
    pub p: DVector<f64>,
    /// Scaled dual variable.
    pub omega: DVector<f64>,
    /// `Z alpha - omega` from the most recent `p` step.
    pub p_bar: DVector<f64>,
    pub rho: f64,
    /// Design matrix restricted to the observed entries.
    pub z: DMatrix<f64>,
    pub z_pinv: DMatrix<f64>,
}

impl AdmmState {
    pub fn new(z: DMatrix<f64>, z_pinv: DMatrix<f64>, rho: f64, p: DVector<f64>) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(NmixError::invalid(format!("rho must be positive, got {rho}")));
        }
        if z_pinv.shape() != (z.ncols(), z.nrows()) {
            return Err(NmixError::dims(
                "pseudo-inverse shape",
                format!("({}, {})", z.ncols(), z.nrows()),
                format!("{:?}", z_pinv.shape()),
            ));
        }
        if p.len() != z.nrows() {
            return Err(NmixError::dims("p length", z.nrows(), p.len()));
        }
        let n = z.nrows();
        Ok(Self { p, omega: DVector::zeros(n), p_bar: DVector::zeros(n), rho, z, z_pinv })
    }

    pub fn p_update(&mut self, y: &[f64], lambda: &[f64], alpha: &DVector<f64>) -> Result<()> {
        self.p_bar = &self.z * alpha - &self.omega;
        let p = p_update(y, lambda, self.p_bar.as_slice(), self.rho)?;
        self.p = DVector::from_vec(p);
        Ok(())
    }

    /// Least-squares `alpha = Z^+ (p + omega)`.
    pub fn alpha_ls(&self) -> DVector<f64> {
        &self.z_pinv * (&self.p + &self.omega)
    }

    /// `omega <- omega + p - Z alpha`.
    pub fn dual_update(&mut self, alpha: &DVector<f64>) -> Result<()> {
        if alpha.len() != self.z.ncols() {
            return Err(NmixError::dims("alpha length", self.z.ncols(), alpha.len()));
        }
        self.omega += &self.p - &self.z * alpha;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// `||p - Z alpha||` at exit.
    pub primal_residual: f64,
    /// `rho ||Z^T (p_k+1 - p_k)||` at exit.
    pub dual_residual: f64,
    /// `rho ||Z (alpha_k+1 - alpha_k)||` at exit.
    pub alpha_dual_residual: f64,
    /// Stopping threshold actually applied, `tol * sqrt(|observed|)`.
    pub threshold: f64,
    /// Penalty in effect at exit.
    pub rho: f64,
    /// Subproblem objective at the `p` iterate after each iteration.
    pub objective_trace: Vec<f64>,
    pub rank_deficient: bool,
    pub condition_number: f64,
}

/// ADMM solver bound to one observation mask and feature set. The
/// pseudo-inverse is computed once; iterates persist between calls so that
/// successive outer iterations warm start.
#[derive(Debug, Clone)]
pub struct AlphaSolver {
    positions: Vec<(usize, usize)>,
    pinv: PseudoInverse,
    state: AdmmState,
    alpha: DVector<f64>,
}

impl AlphaSolver {
    pub fn new(data: &CountDataset, features: &FeatureSet, rho: f64, warm_alpha: DVector<f64>) -> Result<Self> {
        if features.n_rows() != data.n_rows() || features.n_cols() != data.n_cols() {
            return Err(NmixError::dims(
                "feature grid",
                format!("({}, {})", data.n_rows(), data.n_cols()),
                format!("({}, {})", features.n_rows(), features.n_cols()),
            ));
        }
        if warm_alpha.len() != features.n_features() {
            return Err(NmixError::dims("alpha length", features.n_features(), warm_alpha.len()));
        }
        let positions = data.observed_positions();
        let z = features.restricted(&positions);
        let pinv = pseudo_inverse(&z, PINV_RTOL);
        let p0 = (&z * &warm_alpha).map(|x| x.clamp(0.0, 1.0));
        let state = AdmmState::new(z, pinv.pinv.clone(), rho, p0)?;
        Ok(Self { positions, pinv, state, alpha: warm_alpha })
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn state(&self) -> &AdmmState {
        &self.state
    }

    pub fn n_observed(&self) -> usize {
        self.positions.len()
    }

    /// Run ADMM for observed counts `y` and rates `lambda` (both indexed like
    /// [`Self::positions`]).
    pub fn solve(&mut self, y: &[f64], lambda: &[f64], max_iter: usize, tol: f64) -> Result<AdmmDiagnostics> {
        self.solve_with(y, lambda, max_iter, tol, false)
    }

    /// As [`Self::solve`]; with `adaptive_rho` the penalty is rebalanced
    /// whenever one residual exceeds the other by [`RHO_BALANCE_RATIO`].
    pub fn solve_with(
        &mut self,
        y: &[f64],
        lambda: &[f64],
        max_iter: usize,
        tol: f64,
        adaptive_rho: bool,
    ) -> Result<AdmmDiagnostics> {
        let n = self.positions.len();
        if y.len() != n || lambda.len() != n {
            return Err(NmixError::dims("observed vector length", n, format!("{}/{}", y.len(), lambda.len())));
        }
        if lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(NmixError::invalid("rates must be finite and nonnegative"));
        }
        let threshold = tol * (n as f64).sqrt();
        let mut diag = AdmmDiagnostics {
            iterations: 0,
            converged: false,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            alpha_dual_residual: f64::INFINITY,
            threshold,
            rho: self.state.rho,
            objective_trace: Vec::new(),
            rank_deficient: self.pinv.is_rank_deficient(self.state.z.ncols()),
            condition_number: self.pinv.condition_number,
        };
        for it in 1..=max_iter.max(1) {
            let p_prev = self.state.p.clone();
            let z_alpha_prev = &self.state.z * &self.alpha;
            self.state.p_update(y, lambda, &self.alpha)?;
            let alpha = self.state.alpha_ls();
            self.state.dual_update(&alpha)?;
            let z_alpha = &self.state.z * &alpha;
            self.alpha = alpha;

            let rho = self.state.rho;
            diag.iterations = it;
            diag.primal_residual = (&self.state.p - &z_alpha).norm();
            diag.dual_residual = rho * (self.state.z.transpose() * (&self.state.p - &p_prev)).norm();
            diag.alpha_dual_residual = rho * (&z_alpha - &z_alpha_prev).norm();
            diag.objective_trace.push(alpha_objective(y, lambda, self.state.p.as_slice()));
            if diag.primal_residual <= threshold
                && diag.dual_residual <= threshold
                && diag.alpha_dual_residual <= threshold
            {
                diag.converged = true;
                break;
            }
            if adaptive_rho {
                let dual = diag.dual_residual.max(diag.alpha_dual_residual);
                let scale = if diag.primal_residual > RHO_BALANCE_RATIO * dual {
                    RHO_STEP
                } else if dual > RHO_BALANCE_RATIO * diag.primal_residual {
                    1.0 / RHO_STEP
                } else {
                    1.0
                };
                if scale != 1.0 {
                    // omega is scaled by 1/rho
                    self.state.rho *= scale;
                    self.state.omega /= scale;
                }
            }
        }
        diag.rho = self.state.rho;
        Ok(diag)
    }

    /// Auxiliary `p` on the observed entries, scattered into `out`.
    pub fn scatter_p(&self, out: &mut DMatrix<f64>) {
        for (k, &(i, j)) in self.positions.iter().enumerate() {
            out[(i, j)] = self.state.p[k];
        }
    }
}

/// Result of a standalone detection-weight solve.
#[derive(Debug, Clone)]
pub struct AlphaSolution {
    pub alpha: DVector<f64>,
    /// Auxiliary probabilities on observed entries; `clip(Z alpha)` elsewhere.
    pub p: DMatrix<f64>,
    pub diagnostics: AdmmDiagnostics,
}

/// Solve the detection-weight subproblem from a cold dual start, with `p`
/// initialized to `clip(Z warm_alpha)`.
pub fn solve_alpha_admm(
    data: &CountDataset,
    lambda: &DMatrix<f64>,
    features: &FeatureSet,
    config: &FitConfig,
    warm_alpha: &DVector<f64>,
) -> Result<AlphaSolution> {
    if lambda.shape() != (data.n_rows(), data.n_cols()) {
        return Err(NmixError::dims(
            "rate matrix shape",
            format!("({}, {})", data.n_rows(), data.n_cols()),
            format!("{:?}", lambda.shape()),
        ));
    }
    let mut solver = AlphaSolver::new(data, features, config.rho, warm_alpha.clone())?;
    let (y, lam) = gather_observed(data, lambda, solver.positions());
    let diagnostics = solver.solve_with(&y, &lam, config.admm_max_iter, config.admm_tol, config.adaptive_rho)?;
    let alpha = solver.alpha().clone();
    let mut p = features.linear_predictor(&alpha).map(|x| x.clamp(0.0, 1.0));
    solver.scatter_p(&mut p);
    Ok(AlphaSolution { alpha, p, diagnostics })
}

pub(crate) fn gather_observed(
    data: &CountDataset,
    lambda: &DMatrix<f64>,
    positions: &[(usize, usize)],
) -> (Vec<f64>, Vec<f64>) {
    positions.iter().map(|&(i, j)| (data.count(i, j) as f64, lambda[(i, j)])).unzip()
}
