//! Domain types, the collapsed likelihood and the generative sampler.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{NmixError, Result};

/// Observed interaction counts over an `I x J` bipartite network.
///
/// `observed[(i, j)] == false` marks a pair for which no observation was made
/// ("truly missing"). Counts stored at such positions are always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDataset {
    counts: DMatrix<u64>,
    observed: DMatrix<bool>,
}

impl CountDataset {
    pub fn new(mut counts: DMatrix<u64>, observed: DMatrix<bool>) -> Result<Self> {
        if counts.shape() != observed.shape() {
            return Err(NmixError::dims(
                "observed mask",
                format!("{:?}", counts.shape()),
                format!("{:?}", observed.shape()),
            ));
        }
        if counts.nrows() == 0 || counts.ncols() == 0 {
            return Err(NmixError::invalid("count matrix must be non-empty"));
        }
        if !observed.iter().any(|&o| o) {
            return Err(NmixError::invalid("no observed entries"));
        }
        for (c, &o) in counts.iter_mut().zip(observed.iter()) {
            if !o {
                *c = 0;
            }
        }
        Ok(Self { counts, observed })
    }

    pub fn fully_observed(counts: DMatrix<u64>) -> Result<Self> {
        let observed = DMatrix::from_element(counts.nrows(), counts.ncols(), true);
        Self::new(counts, observed)
    }

    pub fn n_rows(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.counts.ncols()
    }

    pub fn counts(&self) -> &DMatrix<u64> {
        &self.counts
    }

    pub fn observed(&self) -> &DMatrix<bool> {
        &self.observed
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[(i, j)]
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[(i, j)]
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    /// Observed positions in column-major order, the same order used for
    /// the rows of the design matrix.
    pub fn observed_positions(&self) -> Vec<(usize, usize)> {
        let (ni, nj) = self.counts.shape();
        let mut out = Vec::with_capacity(self.n_observed());
        for j in 0..nj {
            for i in 0..ni {
                if self.observed[(i, j)] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Counts as reals with zeros at unobserved positions.
    pub fn counts_f64(&self) -> DMatrix<f64> {
        self.counts.map(|c| c as f64)
    }

    /// Restrict observation to `positions` (a subset of the current mask),
    /// e.g. the training folds of a cross-validation split.
    pub fn restricted_to(&self, positions: &[(usize, usize)]) -> Result<Self> {
        let mut mask = DMatrix::from_element(self.n_rows(), self.n_cols(), false);
        for &(i, j) in positions {
            if i >= self.n_rows() || j >= self.n_cols() || !self.observed[(i, j)] {
                return Err(NmixError::invalid(format!("position ({i}, {j}) is not an observed entry")));
            }
            mask[(i, j)] = true;
        }
        Self::new(self.counts.clone(), mask)
    }
}

/// True (latent) interaction counts `N_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCounts {
    pub counts: DMatrix<u64>,
}

/// Nonnegative row and column embeddings; rates are `lambda = U V^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl FactorModel {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(NmixError::dims("factor rank", u.ncols(), v.ncols()));
        }
        if u.ncols() == 0 {
            return Err(NmixError::invalid("rank must be at least 1"));
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite() || *x < 0.0) {
            return Err(NmixError::invalid("factor entries must be finite and nonnegative"));
        }
        Ok(Self { u, v })
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.v.nrows()
    }

    pub fn rates(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.u.row(i).dot(&self.v.row(j))
    }
}

/// Per-pair detection features stacked into an `(I*J) x R` design matrix.
/// Row `j * I + i` holds the features of pair `(i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    z: DMatrix<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl FeatureSet {
    pub fn new(z: DMatrix<f64>, n_rows: usize, n_cols: usize) -> Result<Self> {
        if z.nrows() != n_rows * n_cols {
            return Err(NmixError::dims("feature rows", n_rows * n_cols, z.nrows()));
        }
        if z.ncols() == 0 {
            return Err(NmixError::invalid("at least one feature is required"));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(NmixError::invalid("feature entries must be finite"));
        }
        Ok(Self { z, n_rows, n_cols })
    }

    /// A single all-ones feature: one detection probability shared by every pair.
    pub fn constant(n_rows: usize, n_cols: usize) -> Self {
        Self { z: DMatrix::from_element(n_rows * n_cols, 1, 1.0), n_rows, n_cols }
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn n_features(&self) -> usize {
        self.z.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn row_index(&self, i: usize, j: usize) -> usize {
        j * self.n_rows + i
    }

    /// Design matrix restricted to `positions`, in the given order.
    pub fn restricted(&self, positions: &[(usize, usize)]) -> DMatrix<f64> {
        let r = self.n_features();
        DMatrix::from_fn(positions.len(), r, |k, c| {
            let (i, j) = positions[k];
            self.z[(self.row_index(i, j), c)]
        })
    }

    /// Unclipped linear predictor `z_ij . alpha` laid out as an `I x J` matrix.
    pub fn linear_predictor(&self, alpha: &DVector<f64>) -> DMatrix<f64> {
        let zalpha = &self.z * alpha;
        DMatrix::from_fn(self.n_rows, self.n_cols, |i, j| zalpha[self.row_index(i, j)])
    }
}

/// Detection weights `alpha` and the matrix of detection probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionModel {
    pub alpha: DVector<f64>,
    pub p: DMatrix<f64>,
}

impl DetectionModel {
    /// `p_ij = clip(z_ij . alpha, 0, 1)`.
    pub fn from_alpha(features: &FeatureSet, alpha: DVector<f64>) -> Result<Self> {
        if alpha.len() != features.n_features() {
            return Err(NmixError::dims("alpha length", features.n_features(), alpha.len()));
        }
        let p = features.linear_predictor(&alpha).map(|x| x.clamp(0.0, 1.0));
        Ok(Self { alpha, p })
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NmixError::invalid(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn check_rate(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(NmixError::invalid(format!("rate {lambda} must be finite and nonnegative")));
    }
    Ok(())
}

pub fn ln_factorial(y: u64) -> f64 {
    match y {
        0 | 1 => 0.0,
        _ => ln_gamma(y as f64 + 1.0),
    }
}

/// `a * ln(b)` with the convention `0 * ln(0) = 0`.
#[inline]
fn xlogy(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * b.ln()
    }
}

/// Marginal log-probability of observing `y` after binomial thinning with
/// probability `p` of a `Poisson(lambda)` count: `log Poisson(y; p*lambda)`.
///
/// Returns `-inf` when `y > 0` but `p * lambda == 0`.
pub fn collapsed_loglik(y: u64, lambda: f64, p: f64) -> Result<f64> {
    check_rate(lambda)?;
    check_probability(p)?;
    let yf = y as f64;
    if y > 0 && (p == 0.0 || lambda == 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(xlogy(yf, p) + xlogy(yf, lambda) - lambda * p - ln_factorial(y))
}

/// Running log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
struct LogSumExp {
    max: f64,
    scaled_sum: f64,
}

impl LogSumExp {
    fn new() -> Self {
        Self { max: f64::NEG_INFINITY, scaled_sum: 0.0 }
    }

    fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.scaled_sum += (x - self.max).exp();
        } else {
            self.scaled_sum = self.scaled_sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled_sum.ln()
        }
    }
}

/// Brute-force marginal `sum_{n=y}^{n_max} Poisson(n; lambda) * Binomial(y | n, p)`.
///
/// Summed in log space; used as an oracle for [`collapsed_loglik`].
pub fn truncated_mixture_sum(y: u64, lambda: f64, p: f64, n_max: u64) -> Result<f64> {
    check_rate(lambda)?;
    check_probability(p)?;
    if n_max < y {
        return Err(NmixError::invalid(format!("n_max ({n_max}) must be >= y ({y})")));
    }
    let yf = y as f64;
    let log_p_part = xlogy(yf, p) - ln_factorial(y);
    let mut acc = LogSumExp::new();
    for n in y..=n_max {
        let nf = n as f64;
        let log_poisson = xlogy(nf, lambda) - lambda - ln_factorial(n);
        let m = (n - y) as f64;
        // log C(n, y) + y log p + (n - y) log(1 - p)
        let log_binom = ln_factorial(n) - ln_factorial(n - y) + log_p_part + xlogy(m, 1.0 - p);
        acc.push(log_poisson + log_binom);
    }
    Ok(acc.value().exp())
}

/// Per-entry contribution `lambda*p - y*ln(p) - y*ln(lambda)`; `+inf` when
/// `y > 0` and either factor vanishes.
#[inline]
pub(crate) fn objective_term(y: f64, lambda: f64, p: f64) -> f64 {
    if y > 0.0 && (p <= 0.0 || lambda <= 0.0) {
        return f64::INFINITY;
    }
    lambda * p - xlogy(y, p) - xlogy(y, lambda)
}

/// Negative log-likelihood over the observed entries, excluding the
/// constant `sum log(y!)` (see [`log_factorial_constant`]).
pub fn total_objective(data: &CountDataset, factors: &FactorModel, detection: &DetectionModel) -> Result<f64> {
    let shape = (data.n_rows(), data.n_cols());
    if factors.n_rows() != shape.0 || factors.n_cols() != shape.1 {
        return Err(NmixError::dims(
            "factor shape",
            format!("{shape:?}"),
            format!("({}, {})", factors.n_rows(), factors.n_cols()),
        ));
    }
    if detection.p.shape() != shape {
        return Err(NmixError::dims(
            "detection probability shape",
            format!("{shape:?}"),
            format!("{:?}", detection.p.shape()),
        ));
    }
    let rates = factors.rates();
    Ok(objective_with_rates(data, &rates, &detection.p))
}

pub(crate) fn objective_with_rates(data: &CountDataset, rates: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for j in 0..data.n_cols() {
        for i in 0..data.n_rows() {
            if data.is_observed(i, j) {
                total += objective_term(data.count(i, j) as f64, rates[(i, j)], p[(i, j)]);
            }
        }
    }
    total
}

/// `sum over observed entries of log(y!)`.
pub fn log_factorial_constant(data: &CountDataset) -> f64 {
    data.observed_positions().into_iter().map(|(i, j)| ln_factorial(data.count(i, j))).sum()
}

/// Full observed-data log-likelihood, `-(objective + sum log y!)`.
pub fn log_likelihood(data: &CountDataset, factors: &FactorModel, detection: &DetectionModel) -> Result<f64> {
    Ok(-total_objective(data, factors, detection)? - log_factorial_constant(data))
}

/// Draw `(N, Y)` from the generative model. Deterministic given `seed`.
pub fn sample_network(
    factors: &FactorModel,
    detection: &DetectionModel,
    seed: u64,
) -> Result<(LatentCounts, CountDataset)> {
    let (ni, nj) = (factors.n_rows(), factors.n_cols());
    if detection.p.shape() != (ni, nj) {
        return Err(NmixError::dims(
            "detection probability shape",
            format!("({ni}, {nj})"),
            format!("{:?}", detection.p.shape()),
        ));
    }
    for &p in detection.p.iter() {
        check_probability(p)?;
    }
    let rates = factors.rates();
    for &l in rates.iter() {
        check_rate(l)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latent = DMatrix::<u64>::zeros(ni, nj);
    let mut observed = DMatrix::<u64>::zeros(ni, nj);
    for i in 0..ni {
        for j in 0..nj {
            let lambda = rates[(i, j)];
            let n = if lambda > 0.0 {
                let pois = Poisson::new(lambda).map_err(|e| NmixError::Numerical(format!("poisson({lambda}): {e}")))?;
                pois.sample(&mut rng) as u64
            } else {
                0
            };
            let p = detection.p[(i, j)];
            let y = if n == 0 {
                0
            } else {
                let binom =
                    Binomial::new(n, p).map_err(|e| NmixError::Numerical(format!("binomial({n}, {p}): {e}")))?;
                binom.sample(&mut rng)
            };
            latent[(i, j)] = n;
            observed[(i, j)] = y;
        }
    }
    Ok((LatentCounts { counts: latent }, CountDataset::fully_observed(observed)?))
}
