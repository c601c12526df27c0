//! Monte Carlo replication harness.
//!
//! Replication `j` uses the seed `replication_seed(seed, j)`, so a run with
//! more replications repeats every replication of a shorter run exactly.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tailfactor_core::eot::per_unit_qr;
use tailfactor_core::{
    fit_ftvm, fit_qfm, ic_select, ks_test, predict_quantiles, run_eot, EotFlags, Error, FitOptions, PanelData,
    QuantileLevel, Result, TailConfig, TailEstimates, ThresholdKind,
};

use crate::dgp::{generate, mean_and_se, reference_constant, replication_seed, DgpSample, DgpSpec};
use crate::metrics::{msre_surface, truth_at};

/// Estimators compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    /// Pooled tail quantile for every cell.
    Degenerate,
    /// Tail factor model with `r` factors fitted to the raw panel.
    Ftvm { r: usize },
    /// Additive quantile factor model fitted directly at each tail level.
    Qfm {
        #[serde(default = "one")]
        r: usize,
    },
    /// Covariate quantile regression with interactive effects, fitted
    /// directly at each tail level (needs covariates).
    Qrife {
        #[serde(default = "one")]
        r: usize,
    },
    /// Central threshold plus the pooled excess quantile.
    Eotm0,
    /// Central threshold plus a one-factor model of the excesses.
    Eotm1,
}

fn one() -> usize {
    1
}

impl ModelKind {
    pub fn label(&self) -> String {
        match self {
            ModelKind::Degenerate => "r=0".to_string(),
            ModelKind::Ftvm { r } => format!("r={r}"),
            ModelKind::Qfm { r } => format!("QFM({r})"),
            ModelKind::Qrife { r } => format!("QRIFE({r})"),
            ModelKind::Eotm0 => "EoTM-0".to_string(),
            ModelKind::Eotm1 => "EoTM-1".to_string(),
        }
    }
}

/// A tail level at which every model is scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "snake_case", deny_unknown_fields)]
pub enum LevelSpec {
    /// `k / NT`.
    Intermediate,
    /// A level `p < k / NT` reached by extrapolation.
    Extreme { p: f64 },
}

impl LevelSpec {
    pub fn label(&self) -> String {
        match self {
            LevelSpec::Intermediate => "k/NT".to_string(),
            LevelSpec::Extreme { p } => format!("p={p}"),
        }
    }
}

fn default_lower() -> f64 {
    TailConfig::<f64>::DEFAULT_LOWER
}
fn default_upper() -> f64 {
    TailConfig::<f64>::DEFAULT_UPPER
}
fn default_tau_star() -> f64 {
    TailConfig::<f64>::DEFAULT_TAU_STAR
}
fn default_c_ic() -> f64 {
    TailConfig::<f64>::DEFAULT_C_IC
}
fn default_r_max() -> usize {
    TailConfig::<f64>::DEFAULT_R_MAX
}
fn default_alpha() -> f64 {
    0.05
}
fn default_c_reps() -> usize {
    200
}
fn default_levels() -> Vec<LevelSpec> {
    vec![LevelSpec::Intermediate]
}

/// Tail settings of an experiment; `k = round(k_frac * N * T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailSettings {
    pub k_frac: f64,
    #[serde(default = "default_lower")]
    pub lower: f64,
    #[serde(default = "default_upper")]
    pub upper: f64,
    #[serde(default = "default_tau_star")]
    pub tau_star: f64,
    #[serde(default = "default_c_ic")]
    pub c_ic: f64,
    #[serde(default = "default_r_max")]
    pub r_max: usize,
    /// Level of the validation test.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl TailSettings {
    pub fn new(k_frac: f64) -> Self {
        Self {
            k_frac,
            lower: default_lower(),
            upper: default_upper(),
            tau_star: default_tau_star(),
            c_ic: default_c_ic(),
            r_max: default_r_max(),
            alpha: default_alpha(),
        }
    }

    pub fn config(&self, n_cells: usize, p: Option<f64>) -> TailConfig<f64> {
        let mut cfg = TailConfig::with_k_frac(self.k_frac, n_cells);
        cfg.lower = self.lower;
        cfg.upper = self.upper;
        cfg.tau_star = self.tau_star;
        cfg.c_ic = self.c_ic;
        cfg.r_max = self.r_max;
        cfg.p = p;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// The seed here is the base seed of the replication stream.
    pub dgp_spec: DgpSpec,
    pub tail: TailSettings,
    pub model_grid: Vec<ModelKind>,
    pub reps: usize,
    #[serde(default = "default_levels")]
    pub quantile_levels: Vec<LevelSpec>,
    /// Also run the validation test and the information criterion.
    #[serde(default)]
    pub selection: bool,
    #[serde(default)]
    pub fit: FitOptions,
    /// Surfaces averaged for the reference constant.
    #[serde(default = "default_c_reps")]
    pub c_reps: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp_spec.validate()?;
        self.fit.validate()?;
        if self.reps < 1 {
            return Err(Error::arg("reps must be at least 1"));
        }
        if self.model_grid.is_empty() && !self.selection {
            return Err(Error::arg("model_grid is empty and selection is off: nothing to run"));
        }
        if self.quantile_levels.is_empty() && !self.model_grid.is_empty() {
            return Err(Error::arg("quantile_levels must not be empty"));
        }
        if self.c_reps < 1 {
            return Err(Error::arg("c_reps must be at least 1"));
        }
        if !(self.tail.alpha > 0.0 && self.tail.alpha < 1.0) {
            return Err(Error::arg(format!("alpha must lie in (0,1), got {}", self.tail.alpha)));
        }
        let n_cells = self.dgp_spec.n * self.dgp_spec.t;
        for level in &self.quantile_levels {
            let p = match level {
                LevelSpec::Intermediate => None,
                LevelSpec::Extreme { p } => Some(*p),
            };
            self.tail.config(n_cells, p).validate(n_cells)?;
        }
        for m in &self.model_grid {
            match m {
                ModelKind::Ftvm { r } | ModelKind::Qfm { r } | ModelKind::Qrife { r } if *r == 0 => {
                    return Err(Error::arg(format!("{} needs r >= 1", m.label())));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub rep: usize,
    pub cause: String,
}

/// MSRE of one model at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: LevelSpec,
    /// Mean over completed replications.
    pub mean: f64,
    /// Monte Carlo standard error of the mean.
    pub se: f64,
    pub completed: usize,
    pub failed: usize,
    /// Per replication; `None` where the model failed.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: ModelKind,
    pub label: String,
    pub levels: Vec<LevelReport>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub true_r: usize,
    /// Fraction of replications in which the validation test rejects.
    pub rejection_frequency: f64,
    pub mean_r_hat: f64,
    /// Fraction of replications with `r_hat == true_r`.
    pub correct_frequency: f64,
    pub completed: usize,
    pub rejections: Vec<Option<bool>>,
    pub r_hats: Vec<Option<usize>>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_seconds: f64,
    pub mean_rep_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub k: usize,
    /// Reference constant used to normalize errors, and its standard error.
    pub c_ref: f64,
    pub c_se: f64,
    pub models: Vec<ModelReport>,
    pub selection: Option<SelectionReport>,
    pub runtime: RuntimeStats,
}

impl ExperimentReport {
    pub fn model(&self, model: ModelKind) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == model)
    }

    /// Mean MSRE of `model` at the level with index `level`.
    pub fn mean(&self, model: ModelKind, level: usize) -> Option<f64> {
        self.model(model).and_then(|m| m.levels.get(level)).map(|l| l.mean)
    }
}

struct RepOutcome {
    scores: Vec<Vec<std::result::Result<f64, String>>>,
    selection: Option<std::result::Result<(bool, usize), String>>,
    seconds: f64,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let spec = config.dgp_spec;
    let n_cells = spec.n * spec.t;
    let (c_ref, c_se) = reference_constant(&spec, config.c_reps)?;
    let outcomes: Vec<RepOutcome> = (0..config.reps).into_par_iter().map(|rep| run_rep(config, c_ref, rep)).collect();

    let mut models = Vec::with_capacity(config.model_grid.len());
    for (mi, model) in config.model_grid.iter().enumerate() {
        let mut failures = Vec::new();
        let mut levels = Vec::with_capacity(config.quantile_levels.len());
        for (li, level) in config.quantile_levels.iter().enumerate() {
            let mut values = Vec::with_capacity(config.reps);
            for (rep, o) in outcomes.iter().enumerate() {
                match &o.scores[mi][li] {
                    Ok(v) => values.push(Some(*v)),
                    Err(cause) => {
                        values.push(None);
                        if !failures.iter().any(|f: &Failure| f.rep == rep) {
                            failures.push(Failure { rep, cause: cause.clone() });
                        }
                    }
                }
            }
            let ok: Vec<f64> = values.iter().flatten().copied().collect();
            let (mean, se) = mean_and_se(&ok);
            levels.push(LevelReport { level: *level, mean, se, completed: ok.len(), failed: config.reps - ok.len(), values });
        }
        models.push(ModelReport { model: *model, label: model.label(), levels, failures });
    }

    let selection = config.selection.then(|| {
        let mut rejections = Vec::with_capacity(config.reps);
        let mut r_hats = Vec::with_capacity(config.reps);
        let mut failures = Vec::new();
        for (rep, o) in outcomes.iter().enumerate() {
            match o.selection.as_ref().expect("selection requested") {
                Ok((rej, r)) => {
                    rejections.push(Some(*rej));
                    r_hats.push(Some(*r));
                }
                Err(cause) => {
                    rejections.push(None);
                    r_hats.push(None);
                    failures.push(Failure { rep, cause: cause.clone() });
                }
            }
        }
        let done = rejections.iter().flatten().count();
        let frac = |count: usize| if done == 0 { f64::NAN } else { count as f64 / done as f64 };
        let true_r = spec.true_r();
        SelectionReport {
            true_r,
            rejection_frequency: frac(rejections.iter().flatten().filter(|r| **r).count()),
            mean_r_hat: if done == 0 { f64::NAN } else { r_hats.iter().flatten().sum::<usize>() as f64 / done as f64 },
            correct_frequency: frac(r_hats.iter().flatten().filter(|r| **r == true_r).count()),
            completed: done,
            rejections,
            r_hats,
            failures,
        }
    });

    let total = start.elapsed().as_secs_f64();
    let mean_rep = outcomes.iter().map(|o| o.seconds).sum::<f64>() / config.reps as f64;
    Ok(ExperimentReport {
        config: config.clone(),
        k: TailConfig::<f64>::with_k_frac(config.tail.k_frac, n_cells).k,
        c_ref,
        c_se,
        models,
        selection,
        runtime: RuntimeStats { total_seconds: total, mean_rep_seconds: mean_rep },
    })
}

fn run_rep(config: &ExperimentConfig, c_ref: f64, rep: usize) -> RepOutcome {
    let t0 = Instant::now();
    let spec = config.dgp_spec.with_seed(replication_seed(config.dgp_spec.seed, rep as u64));
    let n_levels = config.quantile_levels.len();
    let sample = match generate(&spec) {
        Ok(s) => s,
        Err(e) => {
            let cause = format!("generation failed: {e}");
            return RepOutcome {
                scores: vec![vec![Err(cause.clone()); n_levels]; config.model_grid.len()],
                selection: config.selection.then(|| Err(cause)),
                seconds: t0.elapsed().as_secs_f64(),
            };
        }
    };
    let scores = config.model_grid.iter().map(|m| score_model(config, &sample, c_ref, *m)).collect();
    let selection = config.selection.then(|| select(config, &sample).map_err(|e| e.to_string()));
    RepOutcome { scores, selection, seconds: t0.elapsed().as_secs_f64() }
}

fn select(config: &ExperimentConfig, sample: &DgpSample) -> Result<(bool, usize)> {
    let cfg = config.tail.config(sample.panel.n_cells(), None);
    let ks = ks_test(&sample.panel, cfg.k)?;
    let ic = ic_select(&sample.panel, &cfg, &config.fit)?;
    Ok((ks.rejects(config.tail.alpha), ic.r_hat))
}

fn level_p(level: &LevelSpec) -> Option<f64> {
    match level {
        LevelSpec::Intermediate => None,
        LevelSpec::Extreme { p } => Some(*p),
    }
}

/// MSRE of one model at every level of the config.
fn score_model(
    config: &ExperimentConfig,
    sample: &DgpSample,
    c_ref: f64,
    model: ModelKind,
) -> Vec<std::result::Result<f64, String>> {
    match predict_levels(config, sample, model) {
        Ok(preds) => preds
            .into_iter()
            .zip(&config.quantile_levels)
            .map(|(pred, level)| {
                let cfg = config.tail.config(sample.panel.n_cells(), level_p(level));
                let tau = level_p(level).unwrap_or_else(|| cfg.tail_level(sample.panel.n_cells()));
                truth_at(sample, c_ref, tau).and_then(|t| msre_surface(&pred, &t)).map_err(|e| e.to_string())
            })
            .collect(),
        Err(e) => vec![Err(e.to_string()); config.quantile_levels.len()],
    }
}

/// Predicted quantile surfaces of `model` at every configured level.
pub fn predict_levels(config: &ExperimentConfig, sample: &DgpSample, model: ModelKind) -> Result<Vec<Array2<f64>>> {
    let panel = &sample.panel;
    let n_cells = panel.n_cells();
    let levels = &config.quantile_levels;
    let extreme_p = levels.iter().find_map(level_p);
    let cfg = config.tail.config(n_cells, extreme_p);
    let shape = panel.values().dim();
    match model {
        ModelKind::Degenerate => {
            let tail = TailEstimates::from_sample(&panel.pooled(), cfg.k)?;
            levels
                .iter()
                .map(|l| {
                    let q = match l {
                        LevelSpec::Intermediate => tail.u_intermediate,
                        LevelSpec::Extreme { p } => tail.extreme_quantile(*p)?,
                    };
                    Ok(Array2::from_elem(shape, q))
                })
                .collect()
        }
        ModelKind::Ftvm { r } => {
            let fit = fit_ftvm(panel, r, &cfg, &config.fit)?;
            levels
                .iter()
                .map(|l| {
                    let level = match l {
                        LevelSpec::Intermediate => QuantileLevel::Intermediate,
                        LevelSpec::Extreme { p } => QuantileLevel::Extreme(*p),
                    };
                    predict_quantiles(&fit, level)
                })
                .collect()
        }
        ModelKind::Qfm { r } => levels
            .iter()
            .map(|l| {
                let tau = level_p(l).unwrap_or_else(|| cfg.tail_level(n_cells));
                Ok(fit_qfm(panel.values(), r, tau, &config.fit)?.surface())
            })
            .collect(),
        ModelKind::Qrife { r } => {
            let cov = sample
                .covariates
                .as_ref()
                .ok_or_else(|| Error::arg("QRIFE needs covariates; this design has none"))?;
            levels
                .iter()
                .map(|l| {
                    let tau = level_p(l).unwrap_or_else(|| cfg.tail_level(n_cells));
                    fit_qrife(panel.values(), cov, r, tau, &config.fit)
                })
                .collect()
        }
        ModelKind::Eotm0 | ModelKind::Eotm1 => {
            let kind = match (&sample.covariates, sample.spec.dgp) {
                (Some(_), _) => ThresholdKind::PerUnitQr,
                (None, 4) => ThresholdKind::Qfm { r: 1 },
                _ => ThresholdKind::Constant,
            };
            let flags = if model == ModelKind::Eotm0 {
                EotFlags { force_degenerate: true, force_r: None }
            } else {
                EotFlags { force_degenerate: false, force_r: Some(1) }
            };
            let res = run_eot(panel, sample.covariates.as_ref(), kind, &cfg, config.tail.alpha, &config.fit, flags)?;
            levels
                .iter()
                .map(|l| match l {
                    LevelSpec::Intermediate => Ok(res.intermediate_surface.clone()),
                    LevelSpec::Extreme { p } => {
                        if Some(*p) == res.p {
                            Ok(res.extreme_surface.clone().expect("extreme level configured"))
                        } else {
                            let mut c2 = cfg;
                            c2.p = Some(*p);
                            let r2 = run_eot(panel, sample.covariates.as_ref(), kind, &c2, config.tail.alpha, &config.fit, flags)?;
                            Ok(r2.extreme_surface.expect("extreme level configured"))
                        }
                    }
                })
                .collect()
        }
    }
}

/// Quantile regression with interactive effects at level `tau`: alternates a
/// per-unit regression on the covariates with an additive factor model of
/// what the covariates leave.
pub fn fit_qrife(values: &Array2<f64>, cov: &Array3<f64>, r: usize, tau: f64, opts: &FitOptions) -> Result<Array2<f64>> {
    let (mut x_part, _) = per_unit_qr(values, cov, tau)?;
    let mut factor_part = Array2::zeros(values.dim());
    for _ in 0..5 {
        factor_part = fit_qfm(&(values - &x_part), r, tau, opts)?.surface();
        x_part = per_unit_qr(&(values - &factor_part), cov, tau)?.0;
    }
    Ok(x_part + factor_part)
}

/// Aligned text table: one row per model, one column per level, MSRE x 1e3
/// with its standard error.
pub fn format_table(report: &ExperimentReport) -> String {
    let spec = &report.config.dgp_spec;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "DGP{} lambda={} (N,T)=({}, {}) k={} reps={} c={:.4}",
        spec.dgp, spec.lambda, spec.n, spec.t, report.k, report.config.reps, report.c_ref
    );
    let mut header = format!("{:<12}", "model");
    for level in &report.config.quantile_levels {
        let _ = write!(header, " {:>24}", format!("MSRE {} (x1e-3)", level.label()));
    }
    let _ = writeln!(out, "{header}  failed");
    for m in &report.models {
        let mut row = format!("{:<12}", m.label);
        for l in &m.levels {
            let _ = write!(row, " {:>24}", format!("{:.1} ({:.1})", l.mean * 1e3, l.se * 1e3));
        }
        let failed = m.levels.iter().map(|l| l.failed).max().unwrap_or(0);
        let _ = writeln!(out, "{row}  {failed}");
    }
    if let Some(s) = &report.selection {
        let _ = writeln!(
            out,
            "RF {:.1}%  mean r_hat {:.2}  P(r_hat = {}) {:.1}%  failed {}",
            100.0 * s.rejection_frequency,
            s.mean_r_hat,
            s.true_r,
            100.0 * s.correct_frequency,
            s.failures.len()
        );
    }
    let _ = writeln!(out, "runtime {:.1}s", report.runtime.total_seconds);
    out
}

/// Plot-ready long CSV: `model,level,rep,msre` (empty msre for failures).
pub fn format_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("model,level,rep,msre\n");
    for m in &report.models {
        for l in &m.levels {
            for (rep, v) in l.values.iter().enumerate() {
                let v = v.map(|x| format!("{x:e}")).unwrap_or_default();
                let _ = writeln!(out, "{},{},{rep},{v}", m.label, l.level.label());
            }
        }
    }
    out
}

/// Panel of a single replication, for inspection.
pub fn replication_panel(config: &ExperimentConfig, rep: usize) -> Result<PanelData<f64>> {
    let spec = config.dgp_spec.with_seed(replication_seed(config.dgp_spec.seed, rep as u64));
    Ok(generate(&spec)?.panel)
}
