//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Relative singular-value cutoff used when forming pseudo-inverses.
pub const PINV_RTOL: f64 = 1e-12;

/// Moore-Penrose pseudo-inverse together with the numerical facts the
/// callers report as diagnostics.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub pinv: DMatrix<f64>,
    pub rank: usize,
    /// Ratio of largest to smallest retained singular value; `inf` if the
    /// matrix is rank deficient.
    pub condition_number: f64,
}

impl PseudoInverse {
    pub fn is_rank_deficient(&self, n_cols: usize) -> bool {
        self.rank < n_cols
    }
}

/// Pseudo-inverse via the SVD, discarding singular values below
/// `rtol * sigma_max`.
pub fn pseudo_inverse(a: &DMatrix<f64>, rtol: f64) -> PseudoInverse {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return PseudoInverse { pinv: DMatrix::zeros(n, m), rank: 0, condition_number: f64::INFINITY };
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let sigma = &svd.singular_values;
    let smax = sigma.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rtol * smax;

    let mut pinv = DMatrix::zeros(n, m);
    let mut rank = 0;
    let mut smin = f64::INFINITY;
    for (k, &s) in sigma.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            smin = smin.min(s);
            // pinv += v_k * u_k^T / s
            let vk = v_t.row(k).transpose();
            let uk = u.column(k);
            pinv.ger(1.0 / s, &vk, &uk, 1.0);
        }
    }
    let condition_number = if rank < n || rank == 0 { f64::INFINITY } else { smax / smin };
    PseudoInverse { pinv, rank, condition_number }
}

pub fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let dist = Uniform::new(lo, hi).expect("valid uniform range");
    // Fill row by row so that draws are laid out in reading order.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = dist.sample(rng);
        }
    }
    m
}

pub fn uniform_vector<R: Rng + ?Sized>(rng: &mut R, len: usize, lo: f64, hi: f64) -> DVector<f64> {
    let dist = Uniform::new(lo, hi).expect("valid uniform range");
    DVector::from_iterator(len, (0..len).map(|_| dist.sample(rng)))
}
