use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use nmix::metrics::{alpha_mse, factor_mse};
use nmix::synth::{simulate, DetectionMode, SynthConfig};
use nmix::{fit, FeatureSet, FitConfig};
use nmix_cli::io::{counts_csv, features_csv, matrix_csv};
use nmix_cli::{
    load_count_table, load_features, load_matrix, run_cv_files, write_atomic, CliError, CvOptions, Method, ModelFile,
    Result,
};

#[derive(Parser)]
#[command(name = "nmix", version, about = "Poisson N-mixture matrix factorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic network and its ground truth
    Simulate(SimulateArgs),
    /// Fit the model to a counts table
    Fit(FitArgs),
    /// Write expected counts and latent rates from a fitted model
    Predict(PredictArgs),
    /// Compare a fitted model against ground truth
    Eval(EvalArgs),
    /// Cross-validate the model and the baselines
    Cv(CvArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 50)]
    rows: usize,
    #[arg(long, default_value_t = 50)]
    cols: usize,
    #[arg(long, default_value_t = 15)]
    rank: usize,
    /// Number of detection features
    #[arg(long, default_value_t = 8)]
    features: usize,
    #[arg(long, default_value_t = 15.0)]
    gamma: f64,
    /// Largest detection probability after rescaling
    #[arg(long, default_value_t = 0.9)]
    max_p: f64,
    /// Use one constant detection probability instead of features
    #[arg(long)]
    constant_p: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// Rebalance rho from the ADMM residuals
    #[arg(long)]
    adaptive_rho: bool,
    #[arg(long, default_value_t = 500)]
    max_outer: usize,
    /// Relative objective change that ends the outer loop
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    admm_tol: f64,
    #[arg(long, default_value_t = 200)]
    admm_max_iter: usize,
    #[arg(long, default_value_t = 1e-12)]
    epsilon: f64,
    /// Impute never-observed pairs with current rates before each sweep
    #[arg(long)]
    impute_missing: bool,
}

impl SolverArgs {
    fn config(&self, rank: usize, seed: u64) -> FitConfig {
        FitConfig {
            rank,
            rho: self.rho,
            adaptive_rho: self.adaptive_rho,
            max_outer: self.max_outer,
            outer_tol: self.tol,
            admm_max_iter: self.admm_max_iter,
            admm_tol: self.admm_tol,
            epsilon: self.epsilon,
            seed,
            impute_missing: self.impute_missing,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    counts: PathBuf,
    /// Detection features; a constant detection probability is fitted when omitted
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    rank: usize,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output directory for yhat.csv and lambda.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    truth_u: PathBuf,
    #[arg(long)]
    truth_v: PathBuf,
    #[arg(long)]
    truth_alpha: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    /// Also write the metrics table here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Comma-separated ranks
    #[arg(long, value_delimiter = ',', default_value = "10")]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Comma-separated methods: nmix, poisson-nmf, mc-cf, trunc-svd, or all
    #[arg(long, value_delimiter = ',', default_value = "all")]
    method: Vec<String>,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Results CSV
    #[arg(long)]
    out: PathBuf,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let config = SynthConfig {
        n_rows: a.rows,
        n_cols: a.cols,
        rank: a.rank,
        n_features: a.features,
        gamma: a.gamma,
        target_max_p: a.max_p,
        detection: a.constant_p.map_or(DetectionMode::Features, DetectionMode::Constant),
        seed: a.seed,
    };
    let (inst, latent, data) = simulate(&config)?;
    ensure_dir(&a.out)?;
    let f_ids: Vec<String> = (1..=a.rank).map(|k| format!("f{k}")).collect();
    write_atomic(&a.out.join("counts.csv"), &counts_csv(&data)?)?;
    write_atomic(&a.out.join("features.csv"), &features_csv(&inst.features)?)?;
    write_atomic(&a.out.join("truth_u.csv"), &matrix_csv(&inst.factors.u, "id", None, Some(&f_ids))?)?;
    let v_ids: Vec<String> = (1..=a.cols).map(|k| format!("c{k}")).collect();
    write_atomic(&a.out.join("truth_v.csv"), &matrix_csv(&inst.factors.v, "id", Some(&v_ids), Some(&f_ids))?)?;
    let alpha = DMatrix::from_column_slice(inst.alpha.len(), 1, inst.alpha.as_slice());
    let z_ids: Vec<String> = (1..=inst.alpha.len()).map(|k| format!("z{k}")).collect();
    write_atomic(
        &a.out.join("truth_alpha.csv"),
        &matrix_csv(&alpha, "feature", Some(&z_ids), Some(&["alpha".to_owned()]))?,
    )?;
    let latent = latent.counts.map(|n| n as f64);
    write_atomic(&a.out.join("latent.csv"), &matrix_csv(&latent, "id", None, None)?)?;
    Ok(())
}

fn run_fit(a: FitArgs) -> Result<()> {
    let table = load_count_table(&a.counts)?;
    let data = &table.data;
    let features = match &a.features {
        Some(p) => load_features(p, data.n_rows(), data.n_cols(), Some(data.observed()))?,
        None => FeatureSet::constant(data.n_rows(), data.n_cols()),
    };
    let result = fit(data, &features, &a.solver.config(a.rank, a.seed))?;
    ModelFile::from_fit(&result, table.row_ids, table.col_ids).write(&a.out)?;
    println!(
        "iterations {} objective {} converged {}",
        result.n_outer,
        result.objective_trace.last().copied().unwrap_or(result.initial_objective),
        result.converged
    );
    Ok(())
}

fn ids(v: &[String]) -> Option<&[String]> {
    (!v.is_empty()).then_some(v)
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let model = ModelFile::read(&a.model)?;
    ensure_dir(&a.out)?;
    let lambda = model.factors()?.rates();
    let yhat = model.predict()?;
    let (r, c) = (ids(&model.row_ids), ids(&model.col_ids));
    write_atomic(&a.out.join("yhat.csv"), &matrix_csv(&yhat, "id", r, c)?)?;
    write_atomic(&a.out.join("lambda.csv"), &matrix_csv(&lambda, "id", r, c)?)?;
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let model = ModelFile::read(&a.model)?;
    let factors = model.factors()?;
    let mut table = String::from("metric,value\n");
    let u = factor_mse(&load_matrix(&a.truth_u)?, &factors.u)?;
    let v = factor_mse(&load_matrix(&a.truth_v)?, &factors.v)?;
    table += &format!("factor_mse_u,{u}\nfactor_mse_v,{v}\n");
    if let Some(path) = &a.truth_alpha {
        let truth = load_matrix(path)?;
        if truth.ncols() != 1 {
            return Err(CliError::Invalid(format!("{}: expected a single alpha column", path.display())));
        }
        let alpha = alpha_mse(&truth.column(0).into_owned(), &model.alpha())?;
        table += &format!("alpha_mse,{alpha}\n");
    }
    if let Some(out) = &a.out {
        write_atomic(out, table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn run_cv_command(a: CvArgs) -> Result<()> {
    let methods = if a.method.iter().any(|m| m == "all") {
        Method::ALL.to_vec()
    } else {
        a.method.iter().map(|m| m.parse::<Method>().map_err(CliError::Invalid)).collect::<Result<_>>()?
    };
    let opts = CvOptions {
        ranks: a.ranks,
        folds: a.folds,
        methods,
        seed: a.seed,
        fit: a.solver.config(1, a.seed),
        ..CvOptions::default()
    };
    let rows = run_cv_files(&a.counts, a.features.as_deref(), &opts, &a.out)?;
    for row in rows.iter().filter(|r| r.fold.is_none()) {
        println!(
            "{} rank {}: rrmse {} auroc {} auprc {}",
            row.method, row.rank, row.metrics.rrmse, row.metrics.auroc, row.metrics.auprc
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Cv(a) => run_cv_command(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
