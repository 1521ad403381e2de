//! Block coordinate descent over `(alpha, U, V)`.
//!
//! Each outer iteration solves the detection-weight block with ADMM, then
//! takes one multiplicative step on `U` and one on `V`. Truly missing
//! entries can optionally be filled with the current rate estimate before
//! the factor steps (EM-style imputation).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{alpha_objective, gather_observed, AlphaSolver};
use crate::error::{NmixError, Result};
use crate::linalg::{pseudo_inverse, uniform_matrix, uniform_vector, PINV_RTOL};
use crate::model::{objective_with_rates, CountDataset, DetectionModel, FactorModel, FeatureSet};
use crate::mu::{mu_update_u, mu_update_v, DEFAULT_EPSILON, FACTOR_FLOOR};

/// Lower clip for detection probabilities at entries with positive counts.
pub const P_FLOOR: f64 = 1e-9;

/// Largest initial detection probability over observed entries.
pub const INIT_MAX_P: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub rank: usize,
    /// ADMM penalty (initial value when `adaptive_rho` is set).
    pub rho: f64,
    /// Rebalance the ADMM penalty from the primal/dual residual ratio.
    #[serde(default)]
    pub adaptive_rho: bool,
    pub max_outer: usize,
    /// Stop once `|f_k - f_k+1| / max(1, |f_k|)` falls below this.
    pub outer_tol: f64,
    pub admm_max_iter: usize,
    pub admm_tol: f64,
    /// Offset added to the multiplicative-update denominators.
    pub epsilon: f64,
    pub seed: u64,
    /// Fill truly missing entries with the current rates before the factor steps.
    pub impute_missing: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rank: 10,
            rho: 1.0,
            adaptive_rho: false,
            max_outer: 500,
            outer_tol: 1e-6,
            admm_max_iter: 200,
            admm_tol: 1e-6,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
            impute_missing: false,
        }
    }
}

impl FitConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self { rank, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(NmixError::invalid("rank must be at least 1"));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(NmixError::invalid("rho must be positive"));
        }
        if !(self.outer_tol > 0.0) || !(self.admm_tol > 0.0) || !(self.epsilon > 0.0) {
            return Err(NmixError::invalid("tolerances and epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// ADMM iterations used in each outer iteration (empty when alpha is fixed).
    pub admm_iterations: Vec<usize>,
    /// Outer iterations whose ADMM result was discarded because it did not
    /// improve the detection subproblem.
    pub rejected_alpha_steps: usize,
    pub design_condition_number: f64,
    pub design_rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub factors: FactorModel,
    pub detection: DetectionModel,
    /// Objective at the random initialization.
    pub initial_objective: f64,
    /// Objective after each outer iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub n_outer: usize,
    pub config_echo: FitConfig,
    pub lambda_hat: DMatrix<f64>,
    /// Latent-count estimate; the posterior-mean surrogate equals `lambda_hat`.
    pub n_hat: DMatrix<f64>,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    /// Expected observed counts `p_ij * lambda_ij`.
    pub fn predict(&self) -> DMatrix<f64> {
        self.detection.p.component_mul(&self.lambda_hat)
    }
}

/// Random positive starting factors, `U` drawn before `V`.
pub(crate) fn init_factors(rng: &mut ChaCha8Rng, n_rows: usize, n_cols: usize, rank: usize) -> FactorModel {
    let u = uniform_matrix(rng, n_rows, rank, 0.0, 1.0).map(|x| x.max(FACTOR_FLOOR));
    let v = uniform_matrix(rng, n_cols, rank, 0.0, 1.0).map(|x| x.max(FACTOR_FLOOR));
    FactorModel { u, v }
}

/// Observed counts, with unobserved entries replaced by the current rate
/// estimate `u_i . v_j`.
pub fn impute_missing(data: &CountDataset, factors: &FactorModel) -> DMatrix<f64> {
    let rates = factors.rates();
    DMatrix::from_fn(data.n_rows(), data.n_cols(), |i, j| {
        if data.is_observed(i, j) {
            data.count(i, j) as f64
        } else {
            rates[(i, j)]
        }
    })
}

fn validate_inputs(data: &CountDataset, features: &FeatureSet, config: &FitConfig) -> Result<()> {
    config.validate()?;
    if features.n_rows() != data.n_rows() || features.n_cols() != data.n_cols() {
        return Err(NmixError::dims(
            "feature grid",
            format!("({}, {})", data.n_rows(), data.n_cols()),
            format!("({}, {})", features.n_rows(), features.n_cols()),
        ));
    }
    if data.n_observed() == 0 {
        return Err(NmixError::invalid("no observed entries"));
    }
    Ok(())
}

enum AlphaBlock {
    Admm(Box<AlphaSolver>),
    Fixed,
}

/// Stepwise BCD state machine; [`fit`] drives it to completion, the
/// cross-validation harness drives it with its own stopping rule.
pub struct Fitter<'a> {
    data: &'a CountDataset,
    features: &'a FeatureSet,
    config: FitConfig,
    factors: FactorModel,
    alpha: DVector<f64>,
    p: DMatrix<f64>,
    block: AlphaBlock,
    positions: Vec<(usize, usize)>,
    y_obs: Vec<f64>,
    initial_objective: f64,
    trace: Vec<f64>,
    converged: bool,
    diagnostics: FitDiagnostics,
}

impl<'a> Fitter<'a> {
    pub fn new(data: &'a CountDataset, features: &'a FeatureSet, config: FitConfig) -> Result<Self> {
        validate_inputs(data, features, &config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut factors = init_factors(&mut rng, data.n_rows(), data.n_cols(), config.rank);
        let mut alpha = uniform_vector(&mut rng, features.n_features(), 0.0, 1.0);

        let positions = data.observed_positions();
        let zalpha = features.restricted(&positions) * &alpha;
        let max_p = zalpha.max();
        if max_p > 0.0 {
            alpha *= INIT_MAX_P / max_p;
        }
        match_count_mass(data, &positions, &(zalpha * (INIT_MAX_P / max_p.max(f64::MIN_POSITIVE))), &mut factors);
        let solver = AlphaSolver::new(data, features, config.rho, alpha.clone())?;
        let diagnostics = FitDiagnostics {
            admm_iterations: Vec::new(),
            rejected_alpha_steps: 0,
            design_condition_number: 0.0,
            design_rank_deficient: false,
        };
        let mut fitter =
            Self::assemble(data, features, config, factors, alpha, AlphaBlock::Admm(Box::new(solver)), diagnostics)?;
        let pinv = pseudo_inverse(&features.restricted(&fitter.positions), PINV_RTOL);
        fitter.diagnostics.design_condition_number = pinv.condition_number;
        fitter.diagnostics.design_rank_deficient = pinv.is_rank_deficient(features.n_features());
        Ok(fitter)
    }

    /// Fit only the factors, with detection weights frozen at `alpha`.
    /// Factor initialization matches [`Fitter::new`] for the same seed.
    pub fn with_fixed_alpha(
        data: &'a CountDataset,
        features: &'a FeatureSet,
        alpha: DVector<f64>,
        config: FitConfig,
    ) -> Result<Self> {
        validate_inputs(data, features, &config)?;
        if alpha.len() != features.n_features() {
            return Err(NmixError::dims("alpha length", features.n_features(), alpha.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let factors = init_factors(&mut rng, data.n_rows(), data.n_cols(), config.rank);
        let diagnostics = FitDiagnostics {
            admm_iterations: Vec::new(),
            rejected_alpha_steps: 0,
            design_condition_number: f64::NAN,
            design_rank_deficient: false,
        };
        Self::assemble(data, features, config, factors, alpha, AlphaBlock::Fixed, diagnostics)
    }

    fn assemble(
        data: &'a CountDataset,
        features: &'a FeatureSet,
        config: FitConfig,
        factors: FactorModel,
        alpha: DVector<f64>,
        block: AlphaBlock,
        diagnostics: FitDiagnostics,
    ) -> Result<Self> {
        let positions = data.observed_positions();
        let y_obs: Vec<f64> = positions.iter().map(|&(i, j)| data.count(i, j) as f64).collect();
        let mut p = features.linear_predictor(&alpha).map(|x| x.clamp(0.0, 1.0));
        for &(i, j) in &positions {
            if data.count(i, j) > 0 {
                p[(i, j)] = p[(i, j)].max(P_FLOOR);
            }
        }
        let initial_objective = objective_with_rates(data, &factors.rates(), &p);
        Ok(Self {
            data,
            features,
            config,
            factors,
            alpha,
            p,
            block,
            positions,
            y_obs,
            initial_objective,
            trace: Vec::new(),
            converged: false,
            diagnostics,
        })
    }

    pub fn factors(&self) -> &FactorModel {
        &self.factors
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn detection_p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    fn alpha_step(&mut self, rates: &DMatrix<f64>) -> Result<()> {
        let AlphaBlock::Admm(solver) = &mut self.block else {
            return Ok(());
        };
        let (_, lambda_obs) = gather_observed(self.data, rates, &self.positions);
        let diag = solver.solve_with(
            &self.y_obs,
            &lambda_obs,
            self.config.admm_max_iter,
            self.config.admm_tol,
            self.config.adaptive_rho,
        )?;
        self.diagnostics.admm_iterations.push(diag.iterations);

        let alpha = solver.alpha().clone();
        let full = self.features.linear_predictor(&alpha).map(|x| x.clamp(0.0, 1.0));
        let candidate: Vec<f64> = self
            .positions
            .iter()
            .zip(&self.y_obs)
            .map(|(&(i, j), &y)| if y > 0.0 { full[(i, j)].max(P_FLOOR) } else { full[(i, j)] })
            .collect();
        let current: Vec<f64> = self.positions.iter().map(|&(i, j)| self.p[(i, j)]).collect();
        let f_new = alpha_objective(&self.y_obs, &lambda_obs, &candidate);
        let f_old = alpha_objective(&self.y_obs, &lambda_obs, &current);
        if f_new <= f_old {
            self.alpha = alpha;
            self.p = full;
            for (k, &(i, j)) in self.positions.iter().enumerate() {
                self.p[(i, j)] = candidate[k];
            }
        } else {
            self.diagnostics.rejected_alpha_steps += 1;
        }
        Ok(())
    }

    /// One outer iteration; returns the objective after it.
    pub fn step(&mut self) -> Result<f64> {
        let rates = self.factors.rates();
        self.alpha_step(&rates)?;

        let impute = self.config.impute_missing;
        let (ni, nj) = (self.data.n_rows(), self.data.n_cols());
        let mut weights = DMatrix::zeros(ni, nj);
        let mut y = DMatrix::zeros(ni, nj);
        for j in 0..nj {
            for i in 0..ni {
                if self.data.is_observed(i, j) {
                    weights[(i, j)] = self.p[(i, j)];
                    y[(i, j)] = self.data.count(i, j) as f64;
                } else if impute {
                    weights[(i, j)] = 1.0;
                    y[(i, j)] = rates[(i, j)];
                }
            }
        }

        let eps = self.config.epsilon;
        self.factors.u = mu_update_u(&self.factors, &weights, &y, eps)?;
        self.factors.v = mu_update_v(&self.factors, &weights, &y, eps)?;

        let f = objective_with_rates(self.data, &self.factors.rates(), &self.p);
        if !f.is_finite() {
            return Err(NmixError::Numerical(format!(
                "objective became non-finite at outer iteration {}",
                self.trace.len() + 1
            )));
        }
        let prev = self.trace.last().copied().unwrap_or(self.initial_objective);
        if prev.is_finite() && (prev - f).abs() / prev.abs().max(1.0) < self.config.outer_tol {
            self.converged = true;
        }
        self.trace.push(f);
        Ok(f)
    }

    /// Iterate until converged or `max_outer` is reached.
    pub fn run(mut self) -> Result<FitResult> {
        while !self.converged && self.trace.len() < self.config.max_outer {
            self.step()?;
        }
        Ok(self.result())
    }

    pub fn result(&self) -> FitResult {
        let lambda_hat = self.factors.rates();
        FitResult {
            factors: self.factors.clone(),
            detection: DetectionModel { alpha: self.alpha.clone(), p: self.p.clone() },
            initial_objective: self.initial_objective,
            objective_trace: self.trace.clone(),
            converged: self.converged,
            n_outer: self.trace.len(),
            config_echo: self.config.clone(),
            n_hat: lambda_hat.clone(),
            lambda_hat,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// Scale both factors by a common scalar so that the expected observed
/// count `sum p * lambda` equals the observed total.
fn match_count_mass(
    data: &CountDataset,
    positions: &[(usize, usize)],
    p_obs: &DVector<f64>,
    factors: &mut FactorModel,
) {
    let rates = factors.rates();
    let expected: f64 = positions.iter().zip(p_obs.iter()).map(|(&(i, j), &p)| p.clamp(0.0, 1.0) * rates[(i, j)]).sum();
    let total: f64 = positions.iter().map(|&(i, j)| data.count(i, j) as f64).sum();
    if expected > 0.0 && total > 0.0 {
        let c = (total / expected).sqrt();
        factors.u.apply(|x| *x = (*x * c).max(FACTOR_FLOOR));
        factors.v.apply(|x| *x = (*x * c).max(FACTOR_FLOOR));
    }
}

/// Fit the Poisson N-mixture factorization.
pub fn fit(data: &CountDataset, features: &FeatureSet, config: &FitConfig) -> Result<FitResult> {
    Fitter::new(data, features, config.clone())?.run()
}

/// Smooth objective in `(U, V, alpha)` with `p = Z alpha` unclipped.
fn smooth_objective(
    data: &CountDataset,
    features: &FeatureSet,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    alpha: &DVector<f64>,
) -> f64 {
    let rates = u * v.transpose();
    let p = features.linear_predictor(alpha);
    objective_with_rates(data, &rates, &p)
}

/// Analytic gradients of the objective with respect to `U`, `V` and `alpha`.
pub fn objective_gradients(
    data: &CountDataset,
    features: &FeatureSet,
    factors: &FactorModel,
    alpha: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let rates = factors.rates();
    let p = features.linear_predictor(alpha);
    // d f / d lambda_ij and d f / d p_ij on observed entries
    let mut d_lambda = DMatrix::zeros(data.n_rows(), data.n_cols());
    let mut d_alpha = DVector::zeros(features.n_features());
    for (i, j) in data.observed_positions() {
        let y = data.count(i, j) as f64;
        let (l, pij) = (rates[(i, j)], p[(i, j)]);
        d_lambda[(i, j)] = pij - y / l;
        let dp = l - y / pij;
        d_alpha += features.z().row(features.row_index(i, j)).transpose() * dp;
    }
    let d_u = &d_lambda * &factors.v;
    let d_v = d_lambda.transpose() * &factors.u;
    (d_u, d_v, d_alpha)
}

/// Largest scaled discrepancy `|g - g_fd| / max(1, |g|, |g_fd|)` between
/// analytic gradients and central differences with step `h`.
pub fn gradient_check(
    data: &CountDataset,
    features: &FeatureSet,
    factors: &FactorModel,
    detection: &DetectionModel,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(NmixError::invalid("step must be positive"));
    }
    if factors.u.iter().chain(factors.v.iter()).any(|&x| x <= 10.0 * h) {
        return Err(NmixError::invalid("factor entries must exceed 10 h"));
    }
    let alpha = &detection.alpha;
    let p = features.linear_predictor(alpha);
    for (i, j) in data.observed_positions() {
        let pij = p[(i, j)];
        if pij <= 10.0 * h || pij >= 1.0 - 10.0 * h {
            return Err(NmixError::invalid(format!(
                "detection probability {pij} at ({i}, {j}) is too close to the boundary"
            )));
        }
    }
    let (g_u, g_v, g_alpha) = objective_gradients(data, features, factors, alpha);
    let scaled = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);

    let mut worst: f64 = 0.0;
    let mut u = factors.u.clone();
    for idx in 0..u.len() {
        let x0 = u[idx];
        u[idx] = x0 + h;
        let fp = smooth_objective(data, features, &u, &factors.v, alpha);
        u[idx] = x0 - h;
        let fm = smooth_objective(data, features, &u, &factors.v, alpha);
        u[idx] = x0;
        worst = worst.max(scaled(g_u[idx], (fp - fm) / (2.0 * h)));
    }
    let mut v = factors.v.clone();
    for idx in 0..v.len() {
        let x0 = v[idx];
        v[idx] = x0 + h;
        let fp = smooth_objective(data, features, &factors.u, &v, alpha);
        v[idx] = x0 - h;
        let fm = smooth_objective(data, features, &factors.u, &v, alpha);
        v[idx] = x0;
        worst = worst.max(scaled(g_v[idx], (fp - fm) / (2.0 * h)));
    }
    let mut a = alpha.clone();
    for idx in 0..a.len() {
        let x0 = a[idx];
        a[idx] = x0 + h;
        let fp = smooth_objective(data, features, &factors.u, &factors.v, &a);
        a[idx] = x0 - h;
        let fm = smooth_objective(data, features, &factors.u, &factors.v, &a);
        a[idx] = x0;
        worst = worst.max(scaled(g_alpha[idx], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

/// Draw a random interior evaluation point for [`gradient_check`].
pub fn random_interior_point<R: Rng>(
    rng: &mut R,
    features: &FeatureSet,
    rank: usize,
    max_p: f64,
) -> (FactorModel, DetectionModel) {
    let u = uniform_matrix(rng, features.n_rows(), rank, 0.2, 1.5);
    let v = uniform_matrix(rng, features.n_cols(), rank, 0.2, 1.5);
    let mut alpha = uniform_vector(rng, features.n_features(), 0.1, 1.0);
    let m = (features.z() * &alpha).max();
    if m > 0.0 {
        alpha *= max_p / m;
    }
    let detection = DetectionModel::from_alpha(features, alpha).expect("alpha has feature length");
    (FactorModel { u, v }, detection)
}
