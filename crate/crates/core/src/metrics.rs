//! Evaluation metrics and fold splitting.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NmixError, Result};

/// Largest rank aligned by exhaustive permutation search under
/// [`Alignment::Auto`].
pub const EXHAUSTIVE_MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Exhaustive search up to [`EXHAUSTIVE_MAX_RANK`], Hungarian beyond.
    Auto,
    Exhaustive,
    Hungarian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub rrmse: f64,
    pub auroc: f64,
    pub auprc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rrmse: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub per_fold: Vec<FoldMetrics>,
}

impl EvalReport {
    /// Average over folds, skipping metrics that were undefined (NaN) on a fold.
    pub fn from_folds(per_fold: Vec<FoldMetrics>) -> Self {
        let mean = |get: fn(&FoldMetrics) -> f64| {
            let vals: Vec<f64> = per_fold.iter().map(get).filter(|x| x.is_finite()).collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        Self { rrmse: mean(|m| m.rrmse), auroc: mean(|m| m.auroc), auprc: mean(|m| m.auprc), per_fold }
    }
}

fn normalized_columns(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for (k, mut col) in out.column_iter_mut().enumerate() {
        let n = col.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(NmixError::invalid(format!("column {k} has zero or non-finite norm")));
        }
        col /= n;
    }
    Ok(out)
}

/// Minimum-cost perfect assignment on a square cost matrix; `result[row] = col`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // Potentials method, 1-based with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// `(1/F) sum_f || truth[:, perm[f]] - est[:, f] ||^2` on normalized columns.
fn permuted_mse(cost: &DMatrix<f64>, perm: &[usize]) -> f64 {
    let f = perm.len();
    perm.iter().enumerate().map(|(k, &t)| cost[(t, k)]).sum::<f64>() / f as f64
}

/// Factor estimation error up to column scaling and permutation.
pub fn factor_mse(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<f64> {
    factor_mse_with(truth, estimate, Alignment::Auto)
}

pub fn factor_mse_with(truth: &DMatrix<f64>, estimate: &DMatrix<f64>, alignment: Alignment) -> Result<f64> {
    if truth.shape() != estimate.shape() {
        return Err(NmixError::dims("factor shape", format!("{:?}", truth.shape()), format!("{:?}", estimate.shape())));
    }
    let f = truth.ncols();
    if f == 0 {
        return Err(NmixError::invalid("factors need at least one column"));
    }
    let t = normalized_columns(truth)?;
    let e = normalized_columns(estimate)?;
    // cost[(a, b)] = ||t[:, a] - e[:, b]||^2
    let cost = DMatrix::from_fn(f, f, |a, b| (t.column(a) - e.column(b)).norm_squared());

    let exhaustive = match alignment {
        Alignment::Auto => f <= EXHAUSTIVE_MAX_RANK,
        Alignment::Exhaustive => true,
        Alignment::Hungarian => false,
    };
    if exhaustive {
        let best = (0..f).permutations(f).map(|perm| permuted_mse(&cost, &perm)).fold(f64::INFINITY, f64::min);
        Ok(best)
    } else {
        // assign each estimated column (row of the transposed cost) to a true column
        let assign = hungarian(&cost.transpose());
        Ok(permuted_mse(&cost, &assign))
    }
}

pub fn alpha_mse(truth: &DVector<f64>, estimate: &DVector<f64>) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(NmixError::dims("alpha length", truth.len(), estimate.len()));
    }
    if truth.is_empty() {
        return Err(NmixError::invalid("alpha must be non-empty"));
    }
    Ok((estimate - truth).norm_squared() / truth.len() as f64)
}

/// Root-mean-squared error over masked entries divided by the mean truth
/// over the same entries.
pub fn rrmse(truth: &[f64], pred: &[f64], mask: &[bool]) -> Result<f64> {
    if truth.len() != pred.len() || truth.len() != mask.len() {
        return Err(NmixError::dims("rrmse inputs", truth.len(), format!("{}/{}", pred.len(), mask.len())));
    }
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for ((&t, &p), _) in truth.iter().zip(pred).zip(mask).filter(|(_, &m)| m) {
        n += 1;
        sum += t;
        sq += (t - p) * (t - p);
    }
    if n == 0 {
        return Err(NmixError::invalid("mask selects no entries"));
    }
    let mean = sum / n as f64;
    if mean == 0.0 {
        return Err(NmixError::invalid("mean of masked truth is zero"));
    }
    Ok((sq / n as f64).sqrt() / mean)
}

fn check_scores(labels: &[bool], scores: &[f64]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(NmixError::dims("scores length", labels.len(), scores.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(NmixError::invalid("scores must not be NaN"));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve, ties counted as one half.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_scores(labels, scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(NmixError::invalid("auroc needs at least one positive and one negative"));
    }
    // Walk score groups from the lowest upward, counting negatives already
    // passed; wins and ties are accumulated in half-units to stay exact.
    let mut order = descending(scores);
    order.reverse();
    let mut neg_below = 0u64;
    let mut half_wins = 0u64;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let mut end = k;
        let (mut pos_here, mut neg_here) = (0u64, 0u64);
        while end < order.len() && scores[order[end]] == s {
            if labels[order[end]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            end += 1;
        }
        half_wins += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
        k = end;
    }
    Ok(half_wins as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Average precision: precision summed at each positive in descending-score
/// order, tied scores processed as one block.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_scores(labels, scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(NmixError::invalid("auprc needs at least one positive"));
    }
    let order = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let mut pos_here = 0;
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                pos_here += 1;
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        if pos_here > 0 {
            ap += pos_here as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap / n_pos as f64)
}

/// Uniform random partition of `positions` into `k` folds whose sizes
/// differ by at most one.
pub fn kfold_split(positions: &[(usize, usize)], k: usize, seed: u64) -> Result<Vec<Vec<(usize, usize)>>> {
    if k < 2 {
        return Err(NmixError::invalid("need at least two folds"));
    }
    if positions.len() < k {
        return Err(NmixError::invalid(format!("{} folds requested for {} observed entries", k, positions.len())));
    }
    let mut shuffled = positions.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut folds = vec![Vec::with_capacity(positions.len() / k + 1); k];
    for (n, pos) in shuffled.into_iter().enumerate() {
        folds[n % k].push(pos);
    }
    Ok(folds)
}
