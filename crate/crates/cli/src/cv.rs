//! Rotating train/validation/test cross-validation over observed entries.
//!
//! Fold `r` is the test set, fold `r + 1` (cyclically) the validation set,
//! and the remaining folds are used for training. Iterative methods are
//! stopped early on validation error, checked every `check_every` sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use nmix::baselines::{mc_cf, truncated_svd, PoissonNmf};
use nmix::metrics::{auprc, auroc, kfold_split, rrmse, EvalReport, FoldMetrics};
use nmix::{CountDataset, FeatureSet, FitConfig, Fitter};
use rayon::prelude::*;

use crate::error::{CliError, Result};
use crate::io::{load_count_table, load_features, write_atomic};

/// Environment variable capping worker threads (`0` or unset: automatic).
pub const THREADS_ENV: &str = "NMIX_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Nmix,
    PoissonNmf,
    McCf,
    TruncSvd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Nmix, Method::PoissonNmf, Method::McCf, Method::TruncSvd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nmix => "nmix",
            Method::PoissonNmf => "poisson-nmf",
            Method::McCf => "mc-cf",
            Method::TruncSvd => "trunc-svd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}; expected one of nmix, poisson-nmf, mc-cf, trunc-svd"))
    }
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub ranks: Vec<usize>,
    pub folds: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Settings for the N-mixture fit; `rank` and `seed` are set per job.
    pub fit: FitConfig,
    pub check_every: usize,
    pub mc_cf_regs: Vec<f64>,
    pub mc_cf_iter: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            ranks: vec![10],
            folds: 10,
            methods: Method::ALL.to_vec(),
            seed: 0,
            fit: FitConfig::default(),
            check_every: 10,
            mc_cf_regs: vec![0.01, 0.1, 1.0],
            mc_cf_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub method: Method,
    pub rank: usize,
    /// 1-based fold; `None` marks the average over folds.
    pub fold: Option<usize>,
    pub metrics: FoldMetrics,
}

/// One rotation of the fold assignment.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: CountDataset,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

pub fn cv_splits(data: &CountDataset, k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 3 {
        return Err(CliError::Invalid("cross-validation needs at least 3 folds".into()));
    }
    let folds = kfold_split(&data.observed_positions(), k, seed)?;
    (0..k)
        .map(|r| {
            let test = folds[r].clone();
            let validation = folds[(r + 1) % k].clone();
            let mut mask = data.observed().clone();
            for &(i, j) in test.iter().chain(&validation) {
                mask[(i, j)] = false;
            }
            let train = CountDataset::new(data.counts().clone(), mask)?;
            Ok(Split { train, validation, test })
        })
        .collect()
}

fn rmse_at(data: &CountDataset, positions: &[(usize, usize)], pred: &DMatrix<f64>) -> f64 {
    let sq: f64 = positions.iter().map(|&(i, j)| (data.count(i, j) as f64 - pred[(i, j)]).powi(2)).sum();
    (sq / positions.len() as f64).sqrt()
}

/// Test metrics; a metric undefined on this fold is NaN.
pub fn fold_metrics(data: &CountDataset, test: &[(usize, usize)], pred: &DMatrix<f64>) -> FoldMetrics {
    let truth: Vec<f64> = test.iter().map(|&(i, j)| data.count(i, j) as f64).collect();
    let scores: Vec<f64> = test.iter().map(|&(i, j)| pred[(i, j)]).collect();
    let labels: Vec<bool> = truth.iter().map(|&y| y > 0.0).collect();
    FoldMetrics {
        rrmse: rrmse(&truth, &scores, &vec![true; truth.len()]).unwrap_or(f64::NAN),
        auroc: auroc(&labels, &scores).unwrap_or(f64::NAN),
        auprc: auprc(&labels, &scores).unwrap_or(f64::NAN),
    }
}

trait Iterative {
    fn step(&mut self) -> nmix::Result<()>;
    fn converged(&self) -> bool;
    fn predict(&self) -> DMatrix<f64>;
}

impl Iterative for Fitter<'_> {
    fn step(&mut self) -> nmix::Result<()> {
        Fitter::step(self).map(|_| ())
    }

    fn converged(&self) -> bool {
        self.is_converged()
    }

    fn predict(&self) -> DMatrix<f64> {
        self.factors().rates().component_mul(self.detection_p())
    }
}

struct Nmf<'a> {
    inner: PoissonNmf<'a>,
    tol: f64,
}

impl Iterative for Nmf<'_> {
    fn step(&mut self) -> nmix::Result<()> {
        self.inner.step().map(|_| ())
    }

    fn converged(&self) -> bool {
        match self.inner.objective_trace() {
            [.., a, b] => (a - b).abs() / a.abs().max(1.0) < self.tol,
            _ => false,
        }
    }

    fn predict(&self) -> DMatrix<f64> {
        self.inner.factors().rates()
    }
}

/// Run until convergence or `max_iter`, returning the prediction with the
/// lowest validation error among the checkpoints. Stops at the first
/// checkpoint that fails to improve.
fn early_stopped<M: Iterative>(
    model: &mut M,
    data: &CountDataset,
    validation: &[(usize, usize)],
    max_iter: usize,
    check_every: usize,
) -> nmix::Result<DMatrix<f64>> {
    let mut best = model.predict();
    let mut best_err = rmse_at(data, validation, &best);
    for it in 1..=max_iter {
        model.step()?;
        let last = model.converged() || it == max_iter;
        if it % check_every == 0 || last {
            let pred = model.predict();
            let err = rmse_at(data, validation, &pred);
            if err < best_err {
                best_err = err;
                best = pred;
            } else {
                break;
            }
        }
        if last {
            break;
        }
    }
    Ok(best)
}

fn job_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64)
}

fn predict_fold(
    method: Method,
    rank: usize,
    fold: usize,
    split: &Split,
    data: &CountDataset,
    features: &FeatureSet,
    opts: &CvOptions,
) -> Result<DMatrix<f64>> {
    let seed = job_seed(opts.seed, fold);
    let check = opts.check_every.max(1);
    Ok(match method {
        Method::Nmix => {
            let config = FitConfig { rank, seed, ..opts.fit.clone() };
            let mut fitter = Fitter::new(&split.train, features, config)?;
            early_stopped(&mut fitter, data, &split.validation, opts.fit.max_outer, check)?
        }
        Method::PoissonNmf => {
            let mut nmf =
                Nmf { inner: PoissonNmf::new(&split.train, rank, opts.fit.epsilon, seed)?, tol: opts.fit.outer_tol };
            early_stopped(&mut nmf, data, &split.validation, opts.fit.max_outer, check)?
        }
        Method::McCf => {
            let mut best: Option<(f64, DMatrix<f64>)> = None;
            for &reg in &opts.mc_cf_regs {
                let pred = mc_cf(&split.train, rank, reg, opts.mc_cf_iter, seed)?.predict();
                let err = rmse_at(data, &split.validation, &pred);
                if best.as_ref().is_none_or(|(e, _)| err < *e) {
                    best = Some((err, pred));
                }
            }
            best.ok_or_else(|| CliError::Invalid("no regularization values to tune over".into()))?.1
        }
        Method::TruncSvd => truncated_svd(&split.train, rank)?,
    })
}

fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(s) if s.trim().is_empty() => Ok(0),
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::Invalid(format!("{THREADS_ENV} must be a nonnegative integer, got {s:?}"))),
    }
}

/// Cross-validate every (method, rank) pair. Rows are ordered by method,
/// rank and fold, each group followed by its average row.
pub fn run_cv(data: &CountDataset, features: Option<&FeatureSet>, opts: &CvOptions) -> Result<Vec<CvRow>> {
    if opts.ranks.is_empty() || opts.methods.is_empty() {
        return Err(CliError::Invalid("at least one rank and one method are required".into()));
    }
    opts.fit.validate()?;
    let constant;
    let features = match features {
        Some(f) => f,
        None => {
            constant = FeatureSet::constant(data.n_rows(), data.n_cols());
            &constant
        }
    };
    let splits = cv_splits(data, opts.folds, opts.seed)?;
    let mut methods = opts.methods.clone();
    methods.sort();
    methods.dedup();

    let jobs: Vec<(Method, usize, usize)> = methods
        .iter()
        .flat_map(|&m| opts.ranks.iter().flat_map(move |&r| (0..opts.folds).map(move |f| (m, r, f))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| CliError::Invalid(format!("thread pool: {e}")))?;
    let results: Vec<FoldMetrics> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, r, f)| {
                let split = &splits[f];
                let pred = predict_fold(m, r, f, split, data, features, opts)?;
                Ok(fold_metrics(data, &split.test, &pred))
            })
            .collect::<Result<_>>()
    })?;

    let mut rows = Vec::with_capacity(jobs.len() + jobs.len() / opts.folds);
    for (group, chunk) in jobs.chunks(opts.folds).zip(results.chunks(opts.folds)) {
        let (method, rank, _) = group[0];
        for (&(_, _, f), m) in group.iter().zip(chunk) {
            rows.push(CvRow { method, rank, fold: Some(f + 1), metrics: *m });
        }
        let report = EvalReport::from_folds(chunk.to_vec());
        rows.push(CvRow {
            method,
            rank,
            fold: None,
            metrics: FoldMetrics { rrmse: report.rrmse, auroc: report.auroc, auprc: report.auprc },
        });
    }
    Ok(rows)
}

pub fn cv_csv(rows: &[CvRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Invalid(format!("csv encoding failed: {e}"));
    w.write_record(["method", "rank", "fold", "rrmse", "auroc", "auprc"]).map_err(err)?;
    for row in rows {
        let fold = row.fold.map_or_else(|| "mean".to_owned(), |f| f.to_string());
        w.write_record([
            row.method.name().to_owned(),
            row.rank.to_string(),
            fold,
            row.metrics.rrmse.to_string(),
            row.metrics.auroc.to_string(),
            row.metrics.auprc.to_string(),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))
}

/// Load inputs, cross-validate and write the results table to `out`.
pub fn run_cv_files(counts: &Path, features: Option<&Path>, opts: &CvOptions, out: &Path) -> Result<Vec<CvRow>> {
    let table = load_count_table(counts)?;
    let data = table.data;
    let features =
        features.map(|p| load_features(p, data.n_rows(), data.n_cols(), Some(data.observed()))).transpose()?;
    let rows = run_cv(&data, features.as_ref(), opts)?;
    write_atomic(out, &cv_csv(&rows)?)?;
    Ok(rows)
}
