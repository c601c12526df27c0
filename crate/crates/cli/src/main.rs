//! `tailfactor`: tail quantile factor models for heavy-tailed panels.
//!
//! Exit codes: 0 success, 2 argument or config error, 3 data error, 4
//! numerical infeasibility, 1 anything else.

mod config;
mod output;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tailfactor_core::io::{matrix, option_matrix};
use tailfactor_core::{
    fit_ftvm, hill_plot, ic_select, ks_test, load_covariates, load_panel, predict_quantiles, run_eot, save_result,
    write_covariates, write_wide_csv, EotFlags, Error as CoreError, FitOptions, FitResult, PanelData, PanelFormat,
    QuantileLevel, TailConfig, TailEstimates, ThresholdKind,
};
use tailfactor_sim::{format_csv, format_table, generate, run_experiment, DgpSpec, ExperimentConfig};

use config::{FileConfig, Merge, UsageError};
use output::{emit, emit_text};

#[derive(Parser)]
#[command(name = "tailfactor", version, about = "Tail quantile factor models for heavy-tailed panels")]
struct Cli {
    /// Worker threads; all cores when absent
    #[arg(long, global = true, env = "TAILFACTOR_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the constrained tail factor model
    Fit(FitCmd),
    /// Pooled intermediate quantile, Hill index and Hill-plot data
    Evt(EvtCmd),
    /// Test the common-quantile hypothesis
    Validate(ValidateCmd),
    /// Choose the number of tail factors by the information criterion
    Select(SelectCmd),
    /// Excess-over-threshold pipeline
    Eot(EotCmd),
    /// Generate a panel from one of the simulation designs
    Simulate(SimulateCmd),
    /// Run a Monte Carlo experiment
    Bench(BenchCmd),
}

#[derive(Args)]
struct InputArgs {
    /// Panel file: wide CSV, long CSV (unit,time,value) or JSON
    panel: PathBuf,
    /// Panel layout; detected from the extension and header when absent
    #[arg(long, value_parser = ["wide-csv", "long-csv", "json"])]
    format: Option<String>,
    /// Flat JSON file of settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; standard output when absent
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct KArgs {
    /// Intermediate order k, the number of pooled tail observations
    #[arg(long, conflicts_with = "k_frac")]
    k: Option<usize>,
    /// k as a fraction of N*T
    #[arg(long, default_value_t = 0.1)]
    k_frac: f64,
}

#[derive(Args)]
struct BoundArgs {
    /// Lower bound m on the scaled volatility surface
    #[arg(long = "m", id = "lower", value_name = "m", default_value_t = 0.1)]
    lower: f64,
    /// Upper bound M on the scaled volatility surface
    #[arg(long = "M", id = "upper", value_name = "M", default_value_t = 1.6)]
    upper: f64,
}

#[derive(Args)]
struct SolverArgs {
    /// Seed of the restart perturbations
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of restarts
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    /// Largest number of outer iterations
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Relative objective improvement below which iteration stops
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Grid size for line searches; 0 uses the exact solver
    #[arg(long, default_value_t = 0)]
    inner_grid: usize,
}

#[derive(Args)]
struct SelectionArgs {
    /// Largest factor count scanned by the criterion
    #[arg(long, default_value_t = 3)]
    rmax: usize,
    /// Penalty constant c of the criterion
    #[arg(long, default_value_t = 10.0)]
    c: f64,
}

#[derive(Args)]
struct FitCmd {
    #[command(flatten)]
    input: InputArgs,
    /// Number of factors
    #[arg(long)]
    r: Option<usize>,
    #[command(flatten)]
    k: KArgs,
    #[command(flatten)]
    bounds: BoundArgs,
    /// Extreme level p < k/NT for extrapolated surfaces
    #[arg(long)]
    p: Option<f64>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct EvtCmd {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    k: KArgs,
    /// Extreme level p < k/NT for the extrapolated quantile
    #[arg(long)]
    p: Option<f64>,
    /// Write Hill-plot data (k,gamma_hat) to this CSV file
    #[arg(long)]
    hill_plot: Option<PathBuf>,
    /// Largest k in the Hill plot; half the sample when absent
    #[arg(long)]
    hill_kmax: Option<usize>,
}

#[derive(Args)]
struct ValidateCmd {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    k: KArgs,
    /// Test level: 0.10, 0.05 or 0.01
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct SelectCmd {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    k: KArgs,
    #[command(flatten)]
    bounds: BoundArgs,
    #[command(flatten)]
    selection: SelectionArgs,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdArg {
    /// Pooled central quantile
    Constant,
    /// Additive quantile factor model
    Qfm,
    /// Per-unit quantile regression on covariates
    Qr,
}

#[derive(Args)]
struct EotCmd {
    #[command(flatten)]
    input: InputArgs,
    /// Central threshold model
    #[arg(long, value_enum, default_value_t = ThresholdArg::Constant)]
    threshold: ThresholdArg,
    /// Factors of the qfm threshold
    #[arg(long, default_value_t = 1)]
    threshold_r: usize,
    /// Central level of the threshold
    #[arg(long, default_value_t = 0.5)]
    tau_star: f64,
    #[command(flatten)]
    k: KArgs,
    #[command(flatten)]
    bounds: BoundArgs,
    /// Extreme level p < k/NT for extrapolated surfaces
    #[arg(long)]
    p: Option<f64>,
    /// Test level: 0.10, 0.05 or 0.01
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Covariates in long CSV (unit,time,x1,...) for the qr threshold
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Skip the test and use the common excess quantile
    #[arg(long, conflicts_with = "force_r")]
    force_degenerate: bool,
    /// Skip the test and the criterion and fit this many excess factors
    #[arg(long)]
    force_r: Option<usize>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct SimulateCmd {
    /// Design number, 1 to 5
    #[arg(long)]
    dgp: Option<u8>,
    /// Number of units
    #[arg(long = "N", id = "n", value_name = "N")]
    n: Option<usize>,
    /// Number of periods
    #[arg(long = "T", id = "t", value_name = "T")]
    t: Option<usize>,
    /// Tail index of the innovations (degrees of freedom for designs 4 and 5)
    #[arg(long)]
    lambda: Option<f64>,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flat JSON file of settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Panel output (wide CSV); standard output when absent
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the true loadings, factors and thresholds as JSON
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write the covariates of design 5 as long CSV
    #[arg(long)]
    covariates_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchCmd {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Report output (JSON); standard output when absent
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Also write an aligned text table
    #[arg(long)]
    table: Option<PathBuf>,
    /// Also write per-replication scores as CSV (model,level,rep,msre)
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Input file problem; exits with the data code.
#[derive(Debug)]
struct DataError(String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<DataError>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Argument(_) => 2,
                CoreError::Parse { .. } | CoreError::IncompleteGrid { .. } | CoreError::Duplicate(_) | CoreError::Json(_) => 3,
                CoreError::Domain(_) | CoreError::Rank(_) | CoreError::Infeasible(_) | CoreError::EvtInfeasible(_) => 4,
                CoreError::Io(_) => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli, matches: &ArgMatches) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let merge = Merge { matches: sub };
    match cli.command {
        Command::Fit(cmd) => fit(cmd, &merge),
        Command::Evt(cmd) => evt(cmd, &merge),
        Command::Validate(cmd) => validate(cmd, &merge),
        Command::Select(cmd) => select(cmd, &merge),
        Command::Eot(cmd) => eot(cmd, &merge),
        Command::Simulate(cmd) => simulate(cmd, &merge),
        Command::Bench(cmd) => bench(cmd),
    }
}

fn read_input(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| DataError(format!("cannot read {}: {e}", path.display())).into())
}

fn load_input(input: &InputArgs) -> anyhow::Result<PanelData<f64>> {
    let bytes = read_input(&input.panel)?;
    let format = match &input.format {
        Some(f) => f.parse::<PanelFormat>()?,
        None => {
            let head = String::from_utf8_lossy(&bytes[..bytes.len().min(4096)]);
            PanelFormat::detect(&input.panel, &head)
        }
    };
    load_panel(bytes.as_slice(), format).with_context(|| format!("loading {}", input.panel.display()))
}

fn resolve_k(m: &Merge, file: &FileConfig, k: &KArgs, n_cells: usize) -> usize {
    let frac = |f: f64| TailConfig::<f64>::with_k_frac(f, n_cells).k;
    if m.given("k") {
        k.k.expect("given")
    } else if m.given("k_frac") {
        frac(k.k_frac)
    } else if let Some(v) = file.k {
        v
    } else {
        frac(file.k_frac.unwrap_or(k.k_frac))
    }
}

fn tail_config(m: &Merge, file: &FileConfig, k: &KArgs, bounds: Option<&BoundArgs>, n_cells: usize) -> TailConfig<f64> {
    let mut cfg = TailConfig::<f64>::with_k(resolve_k(m, file, k, n_cells));
    if let Some(b) = bounds {
        cfg.lower = m.pick("lower", b.lower, file.lower);
        cfg.upper = m.pick("upper", b.upper, file.upper);
    }
    cfg
}

fn fit_options(m: &Merge, file: &FileConfig, s: &SolverArgs) -> FitOptions {
    FitOptions {
        max_outer_iters: m.pick("max_iters", s.max_iters, file.max_outer_iters),
        loss_rel_tol: m.pick("tol", s.tol, file.loss_rel_tol),
        inner_grid: m.pick("inner_grid", s.inner_grid, file.inner_grid),
        seed: m.pick("seed", s.seed, file.seed),
        n_restarts: m.pick("restarts", s.restarts, file.n_restarts),
    }
}

fn apply_selection(m: &Merge, file: &FileConfig, s: &SelectionArgs, cfg: &mut TailConfig<f64>) {
    cfg.r_max = m.pick("rmax", s.rmax, file.r_max);
    cfg.c_ic = m.pick("c", s.c, file.c_ic);
}

fn emit_json<R: Serialize>(path: Option<&Path>, result: &R, kind: &str) -> anyhow::Result<()> {
    emit(path, |w| Ok(save_result(result, kind, w)?))
}

#[derive(Serialize)]
struct FitOutput<'a> {
    fit: &'a FitResult<f64>,
    #[serde(with = "matrix")]
    intermediate_surface: ndarray::Array2<f64>,
    p: Option<f64>,
    #[serde(with = "option_matrix")]
    extreme_surface: Option<ndarray::Array2<f64>>,
}

fn fit(cmd: FitCmd, m: &Merge) -> anyhow::Result<()> {
    let file = FileConfig::load(cmd.input.config.as_deref())?;
    let panel = load_input(&cmd.input)?;
    let mut cfg = tail_config(m, &file, &cmd.k, Some(&cmd.bounds), panel.n_cells());
    cfg.p = m.pick_opt("p", cmd.p, file.p);
    let r = m.pick_opt("r", cmd.r, file.r).ok_or_else(|| UsageError("the number of factors is required (--r)".into()))?;
    let opts = fit_options(m, &file, &cmd.solver);
    let result = fit_ftvm(&panel, r, &cfg, &opts)?;
    let intermediate_surface = predict_quantiles(&result, QuantileLevel::Intermediate)?;
    let extreme_surface = cfg.p.map(|p| predict_quantiles(&result, QuantileLevel::Extreme(p))).transpose()?;
    let out = FitOutput { fit: &result, intermediate_surface, p: cfg.p, extreme_surface };
    emit_json(cmd.input.output.as_deref(), &out, "fit")
}

#[derive(Serialize)]
struct EvtOutput {
    estimates: TailEstimates<f64>,
    p: Option<f64>,
    extreme_quantile: Option<f64>,
}

fn evt(cmd: EvtCmd, m: &Merge) -> anyhow::Result<()> {
    let file = FileConfig::load(cmd.input.config.as_deref())?;
    let panel = load_input(&cmd.input)?;
    let pooled = panel.pooled();
    let k = resolve_k(m, &file, &cmd.k, pooled.len());
    let estimates = TailEstimates::from_sample(&pooled, k)?;
    let p = m.pick_opt("p", cmd.p, file.p);
    let extreme_quantile = p.map(|p| estimates.extreme_quantile(p)).transpose()?;
    if let Some(path) = &cmd.hill_plot {
        let k_max = cmd.hill_kmax.unwrap_or(pooled.len() / 2);
        let points = hill_plot(&pooled, k_max)?;
        let mut text = String::from("k,gamma_hat\n");
        for (k, g) in points {
            text.push_str(&format!("{k},{g:.17e}\n"));
        }
        emit_text(Some(path), &text)?;
    }
    emit_json(cmd.input.output.as_deref(), &EvtOutput { estimates, p, extreme_quantile }, "evt")
}

#[derive(Serialize)]
struct ValidateOutput {
    alpha: f64,
    reject: bool,
    ks: tailfactor_core::KsReport<f64>,
}

fn validate(cmd: ValidateCmd, m: &Merge) -> anyhow::Result<()> {
    let file = FileConfig::load(cmd.input.config.as_deref())?;
    let panel = load_input(&cmd.input)?;
    let k = resolve_k(m, &file, &cmd.k, panel.n_cells());
    let alpha = m.pick("alpha", cmd.alpha, file.alpha);
    if ![0.10, 0.05, 0.01].iter().any(|a: &f64| (a - alpha).abs() < 1e-12) {
        return Err(UsageError(format!("--alpha must be one of 0.10, 0.05, 0.01, got {alpha}")).into());
    }
    let ks = ks_test(&panel, k)?;
    emit_json(cmd.input.output.as_deref(), &ValidateOutput { alpha, reject: ks.rejects(alpha), ks }, "validate")
}

fn select(cmd: SelectCmd, m: &Merge) -> anyhow::Result<()> {
    let file = FileConfig::load(cmd.input.config.as_deref())?;
    let panel = load_input(&cmd.input)?;
    let mut cfg = tail_config(m, &file, &cmd.k, Some(&cmd.bounds), panel.n_cells());
    apply_selection(m, &file, &cmd.selection, &mut cfg);
    let opts = fit_options(m, &file, &cmd.solver);
    let report = ic_select(&panel, &cfg, &opts)?;
    emit_json(cmd.input.output.as_deref(), &report, "select")
}

fn eot(cmd: EotCmd, m: &Merge) -> anyhow::Result<()> {
    let file = FileConfig::load(cmd.input.config.as_deref())?;
    let panel = load_input(&cmd.input)?;
    let mut cfg = tail_config(m, &file, &cmd.k, Some(&cmd.bounds), panel.n_cells());
    apply_selection(m, &file, &cmd.selection, &mut cfg);
    cfg.p = m.pick_opt("p", cmd.p, file.p);
    cfg.tau_star = m.pick("tau_star", cmd.tau_star, file.tau_star);
    let alpha = m.pick("alpha", cmd.alpha, file.alpha);
    let threshold_r = m.pick("threshold_r", cmd.threshold_r, file.threshold_r);
    let threshold = if m.given("threshold") {
        cmd.threshold
    } else {
        match file.threshold.as_deref() {
            None => cmd.threshold,
            Some(name) => ThresholdArg::from_str(name, false)
                .map_err(|_| UsageError(format!("unknown threshold {name:?}; expected constant, qfm or qr")))?,
        }
    };
    let kind = match threshold {
        ThresholdArg::Constant => ThresholdKind::Constant,
        ThresholdArg::Qfm => ThresholdKind::Qfm { r: threshold_r },
        ThresholdArg::Qr => ThresholdKind::PerUnitQr,
    };
    let covariates = match &cmd.covariates {
        Some(path) => {
            let bytes = read_input(path)?;
            Some(load_covariates(bytes.as_slice(), &panel).with_context(|| format!("loading {}", path.display()))?)
        }
        None => None,
    };
    if matches!(kind, ThresholdKind::PerUnitQr) && covariates.is_none() {
        return Err(UsageError("--threshold qr needs --covariates".into()).into());
    }
    let force_degenerate = m.pick("force_degenerate", cmd.force_degenerate, file.force_degenerate);
    let force_r = m.pick_opt("force_r", cmd.force_r, file.force_r);
    if force_degenerate && force_r.is_some() {
        return Err(UsageError("force_degenerate and force_r are mutually exclusive".into()).into());
    }
    let flags = EotFlags { force_degenerate, force_r };
    let opts = fit_options(m, &file, &cmd.solver);
    let result = run_eot(&panel, covariates.as_ref(), kind, &cfg, alpha, &opts, flags)?;
    emit_json(cmd.input.output.as_deref(), &result, "eot")
}

#[derive(Serialize)]
struct Truth<'a> {
    spec: &'a DgpSpec,
    /// Power mean of the volatility surface of this sample.
    c_sample: f64,
    #[serde(with = "matrix")]
    true_loadings: ndarray::Array2<f64>,
    #[serde(with = "matrix")]
    true_factors: ndarray::Array2<f64>,
    #[serde(with = "option_matrix")]
    true_threshold: Option<ndarray::Array2<f64>>,
    #[serde(with = "option_matrix")]
    coefficients: Option<ndarray::Array2<f64>>,
}

fn simulate(cmd: SimulateCmd, m: &Merge) -> anyhow::Result<()> {
    let file = FileConfig::load(cmd.config.as_deref())?;
    let need = |name: &str| UsageError(format!("--{name} is required"));
    let spec = DgpSpec {
        dgp: m.pick_opt("dgp", cmd.dgp, file.dgp).ok_or_else(|| need("dgp"))?,
        n: m.pick_opt("n", cmd.n, file.n).ok_or_else(|| need("N"))?,
        t: m.pick_opt("t", cmd.t, file.t).ok_or_else(|| need("T"))?,
        lambda: m.pick_opt("lambda", cmd.lambda, file.lambda).ok_or_else(|| need("lambda"))?,
        seed: m.pick("seed", cmd.seed, file.seed),
    };
    let sample = generate(&spec)?;
    if let Some(path) = &cmd.truth {
        let truth = Truth {
            spec: &spec,
            c_sample: sample.c_ref,
            true_loadings: sample.true_loadings.clone(),
            true_factors: sample.true_factors.clone(),
            true_threshold: sample.true_threshold.clone(),
            coefficients: sample.coefficients.clone(),
        };
        emit_json(Some(path), &truth, "truth")?;
    }
    if let Some(path) = &cmd.covariates_out {
        let cov = sample.covariates.as_ref().ok_or_else(|| UsageError(format!("design {} has no covariates", spec.dgp)))?;
        emit(Some(path), |w| Ok(write_covariates(&sample.panel, cov, w)?))?;
    }
    emit(cmd.output.as_deref(), |w| Ok(write_wide_csv(&sample.panel, w)?))
}

fn bench(cmd: BenchCmd) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&cmd.config)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", cmd.config.display())))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("invalid experiment config {}: {e}", cmd.config.display())))?;
    let report = run_experiment(&config)?;
    if let Some(path) = &cmd.table {
        emit_text(Some(path), &format_table(&report))?;
    }
    if let Some(path) = &cmd.csv {
        emit_text(Some(path), &format_csv(&report))?;
    }
    emit_json(cmd.output.as_deref(), &report, "bench")?;
    if cmd.output.is_some() && cmd.table.is_none() {
        std::io::stderr().write_all(format_table(&report).as_bytes()).map_err(|e| anyhow!(e))?;
    }
    Ok(())
}
