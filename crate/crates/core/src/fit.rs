//! Constrained check-loss factorization of a tail-scaled panel.
//!
//! The panel is divided by its pooled intermediate quantile `U(NT/k)`; the
//! surface `l_i^T f_t` is then fitted at tail level `k/NT` subject to
//! `m < l_i^T f_t <= M`, alternating between per-unit and per-time
//! subproblems.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evt::{extrapolation_factor, TailEstimates};
use crate::linalg::truncated_svd;
use crate::model::{normalize_identification, pad_factor, FactorModel};
use crate::panel::{rho, PanelData, TailConfig};
use crate::pivot::pivot_sweep;
use crate::qr::{solve_vector_qr, FitBounds, LineSolver, VectorQrOptions};
use crate::scalar::Real;

/// Margin that closes the strict lower bound `m < l^T f`.
pub const LOWER_MARGIN: f64 = 1e-9;

/// Settings for the alternating solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_outer_iters: usize,
    /// Stop once an outer iteration improves the objective by less than this
    /// fraction.
    pub loss_rel_tol: f64,
    /// Candidate count for grid line searches; 0 selects the exact solver.
    pub inner_grid: usize,
    pub seed: u64,
    pub n_restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_outer_iters: 100, loss_rel_tol: 1e-6, inner_grid: 0, seed: 0, n_restarts: 5 }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters < 1 {
            return Err(Error::arg("max_outer_iters must be at least 1"));
        }
        if !(self.loss_rel_tol > 0.0) {
            return Err(Error::arg(format!("loss_rel_tol must be positive, got {}", self.loss_rel_tol)));
        }
        if self.n_restarts < 1 {
            return Err(Error::arg("n_restarts must be at least 1"));
        }
        Ok(())
    }

    fn line(&self) -> LineSolver {
        if self.inner_grid == 0 {
            LineSolver::Exact
        } else {
            LineSolver::Grid(self.inner_grid)
        }
    }
}

/// A fitted tail factor model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Clone", deserialize = "T: Deserialize<'de>"))]
pub struct FitResult<T> {
    pub model: FactorModel<T>,
    pub tail: TailEstimates<T>,
    /// Tail level `k/NT` of the check loss.
    pub tau: T,
    pub lower: T,
    pub upper: T,
    /// `sum_{i,t} rho_tau(Y_it / U - l_i^T f_t)` at the returned model.
    pub final_loss: T,
    /// Objective at the start and after every half-step of the winning restart.
    pub loss_trace: Vec<T>,
    /// Final objective of every restart, in order.
    pub restart_losses: Vec<T>,
    pub restarts_used: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Quantile level for surface predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantileLevel<T> {
    /// The fitted level `k/NT`.
    Intermediate,
    /// An extreme level `p < k/NT`, reached by Weissman extrapolation.
    Extreme(T),
}

/// Objective `sum rho_tau(z_it - l_i^T f_t)` of a model on a scaled panel.
pub fn objective<T: Real>(z: &Array2<T>, model: &FactorModel<T>, tau: T) -> T {
    let surface = model.surface();
    z.iter().zip(surface.iter()).map(|(&a, &b)| rho(a - b, tau)).sum()
}

/// Fits an `r`-factor tail volatility model.
pub fn fit_ftvm<T: Real>(panel: &PanelData<T>, r: usize, cfg: &TailConfig<T>, opts: &FitOptions) -> Result<FitResult<T>> {
    fit_ftvm_from(panel, r, cfg, opts, None)
}

/// As [`fit_ftvm`], with the first restart seeded from `warm` (a fit with
/// `r` or `r - 1` factors on the same panel and `k`). The result then never
/// has a larger objective than `warm`.
pub fn fit_ftvm_from<T: Real>(
    panel: &PanelData<T>,
    r: usize,
    cfg: &TailConfig<T>,
    opts: &FitOptions,
    warm: Option<&FactorModel<T>>,
) -> Result<FitResult<T>> {
    let (n, t_len) = (panel.n_units(), panel.n_times());
    cfg.validate(panel.n_cells())?;
    opts.validate()?;
    if r < 1 || r > n.min(t_len) {
        return Err(Error::arg(format!("factor count must lie in 1..={}, got {r}", n.min(t_len))));
    }
    let lower = cfg.lower + T::lit(LOWER_MARGIN);
    if !(lower < cfg.upper) {
        return Err(Error::arg(format!(
            "empty feasible set: need m < M, got m = {}, M = {}",
            cfg.lower, cfg.upper
        )));
    }
    if let Some(w) = warm {
        if w.n_units() != n || w.n_times() != t_len || !(w.r() == r || w.r() + 1 == r) {
            return Err(Error::arg(format!(
                "warm start has r = {} on {}x{}, expected r in {{{}, {r}}} on {n}x{t_len}",
                w.r(),
                w.n_units(),
                w.n_times(),
                r.saturating_sub(1)
            )));
        }
    }

    let pooled = panel.pooled();
    let tail = TailEstimates::from_sample(&pooled, cfg.k)?;
    if !(tail.u_intermediate > T::zero()) {
        return Err(Error::EvtInfeasible(format!(
            "the {}-th largest pooled value is {}; scaling needs a positive intermediate quantile",
            cfg.k, tail.u_intermediate
        )));
    }
    let tau = cfg.tail_level(panel.n_cells());
    let z = panel.values().mapv(|v| v / tail.u_intermediate);
    let bounds = FitBounds { lower, upper: cfg.upper };

    let starts = initial_models(&z, r, bounds, opts, warm);
    let runs: Vec<Result<Run<T>>> = starts
        .into_par_iter()
        .map(|start| alternate(&z, start, tau, bounds, opts, true))
        .collect();

    let mut restart_losses = Vec::with_capacity(runs.len());
    let mut best: Option<Run<T>> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(run) => {
                restart_losses.push(run.loss);
                if best.as_ref().is_none_or(|b| run.loss < b.loss) {
                    best = Some(run);
                }
            }
            Err(e) => {
                restart_losses.push(T::nan());
                first_err.get_or_insert(e);
            }
        }
    }
    let Some(best) = best else {
        return Err(first_err.expect("at least one restart"));
    };
    let (model, _) = normalize_identification(&best.model)?;
    check_feasible(&model, bounds.lower, cfg.upper)?;
    let final_loss = objective(&z, &model, tau);
    Ok(FitResult {
        model,
        tail,
        tau,
        lower: cfg.lower,
        upper: cfg.upper,
        final_loss,
        loss_trace: best.trace,
        restarts_used: restart_losses.len(),
        restart_losses,
        iterations: best.iterations,
        converged: best.converged,
    })
}

/// `l_i^T f_t U(NT/k)` at the intermediate level, times `(k/(NT p))^gamma`
/// at an extreme level `p`.
pub fn predict_quantiles<T: Real>(fit: &FitResult<T>, level: QuantileLevel<T>) -> Result<Array2<T>> {
    let base = fit.model.surface().mapv(|v| v * fit.tail.u_intermediate);
    match level {
        QuantileLevel::Intermediate => Ok(base),
        QuantileLevel::Extreme(p) => {
            let factor = extreme_factor(&fit.tail, p)?;
            Ok(base.mapv(|v| v * factor))
        }
    }
}

/// `(k/(n p))^gamma_hat`, validating `p`.
pub(crate) fn extreme_factor<T: Real>(tail: &TailEstimates<T>, p: T) -> Result<T> {
    let ratio = T::count(tail.k) / T::count(tail.n);
    if !(p > T::zero() && p < ratio) {
        return Err(Error::arg(format!("extreme level p must lie in (0, k/NT = {ratio}), got {p}")));
    }
    let gamma = tail
        .gamma_hat
        .ok_or_else(|| Error::EvtInfeasible("no Hill estimate: the top k pooled values are not all positive".into()))?;
    Ok(extrapolation_factor(gamma, tail.k, tail.n, p))
}

fn check_feasible<T: Real>(model: &FactorModel<T>, lower: T, upper: T) -> Result<()> {
    let tol = T::lit(1e-9);
    let surface = model.surface();
    let bad: Vec<String> = surface
        .indexed_iter()
        .filter(|(_, v)| **v < lower - tol || **v > upper * (T::one() + tol))
        .take(5)
        .map(|((i, t), v)| format!("({i},{t})={v}"))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Infeasible(format!("fitted surface leaves [{lower}, {upper}] at {}", bad.join(", "))))
    }
}

pub(crate) struct Run<T> {
    pub model: FactorModel<T>,
    pub loss: T,
    pub trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternating minimisation from a feasible start.
pub(crate) fn alternate<T: Real>(
    z: &Array2<T>,
    mut model: FactorModel<T>,
    tau: T,
    bounds: FitBounds<T>,
    opts: &FitOptions,
    renormalize: bool,
) -> Result<Run<T>> {
    let qopts = VectorQrOptions { line: opts.line(), ..VectorQrOptions::default() };
    let zt = z.t().as_standard_layout().into_owned();
    let mut loss = objective(z, &model, tau);
    let mut trace = vec![loss];
    let mut converged = false;
    let mut iterations = 0;
    let tol = T::lit(opts.loss_rel_tol);
    for _ in 0..opts.max_outer_iters {
        iterations += 1;
        let before = loss;
        let l_new = half_step(z, &model.factors, &model.loadings, tau, bounds, &qopts)?;
        model.loadings = l_new.0;
        trace.push(l_new.1);
        let f_new = half_step(&zt, &model.loadings, &model.factors, tau, bounds, &qopts)?;
        model.factors = f_new.0;
        loss = f_new.1;
        trace.push(loss);
        if renormalize && model.r() >= 2 {
            if let Ok((m, _)) = normalize_identification(&model) {
                model = m;
            }
        }
        if before - loss <= tol * before || loss == T::zero() {
            // Block updates have stalled; pivot moves may still improve, and
            // a large enough gain reopens the alternation.
            let mut gained = T::zero();
            for _ in 0..20 {
                let g = if loss > T::zero() { pivot_sweep(z, &mut model, tau, bounds) } else { T::zero() };
                gained += g;
                if g <= tol * loss {
                    break;
                }
            }
            if gained > T::zero() {
                loss = objective(z, &model, tau);
                trace.push(loss);
            }
            if gained > tol * before {
                continue;
            }
            converged = true;
            break;
        }
    }
    Ok(Run { model, loss, trace, iterations, converged })
}

/// Solves every column of `coef` (r x rows of `z`) against the fixed design
/// `x` (r x cols of `z`); returns the new coefficients and the total loss.
fn half_step<T: Real>(
    z: &Array2<T>,
    x: &Array2<T>,
    coef: &Array2<T>,
    tau: T,
    bounds: FitBounds<T>,
    qopts: &VectorQrOptions,
) -> Result<(Array2<T>, T)> {
    let rows = z.nrows();
    let solved: Vec<Result<(Array1<T>, T)>> = (0..rows)
        .into_par_iter()
        .map(|i| {
            let zi = z.row(i);
            let zi = zi.as_slice().expect("standard layout");
            let init = coef.column(i).to_vec();
            solve_vector_qr(zi, x.view(), tau, bounds, &init, qopts).map(|o| (o.coef, o.loss))
        })
        .collect();
    let mut out = Array2::zeros(coef.dim());
    let mut total = T::zero();
    for (i, s) in solved.into_iter().enumerate() {
        let (c, l) = s?;
        out.column_mut(i).assign(&c);
        total += l;
    }
    Ok((out, total))
}

/// Right singular directions of the row-standardised exceedance indicators
/// `1(z_it > 1)`, as `count x T` rows scaled to `||row||^2 / T = 1`.
fn exceedance_directions<T: Real>(z: &Array2<T>, count: usize) -> Option<Array2<T>> {
    let (n, t_len) = z.dim();
    if count == 0 {
        return Some(Array2::zeros((0, t_len)));
    }
    let mut x = z.mapv(|v| if v > T::one() { T::one() } else { T::zero() });
    for mut row in x.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / T::count(t_len);
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / T::count(t_len);
        let sd = var.sqrt();
        row.mapv_inplace(|v| if sd > T::zero() { (v - mean) / sd } else { T::zero() });
    }
    if x.iter().all(|v| *v == T::zero()) || count > n.min(t_len) {
        return None;
    }
    let (_, s, v) = truncated_svd(&x, count).ok()?;
    if s.iter().any(|s| !(*s > T::zero())) {
        return None;
    }
    let scale = T::count(t_len).sqrt();
    Some(v.t().mapv(|e| e * scale))
}

fn standardize_row<T: Real>(mut row: ndarray::ArrayViewMut1<'_, T>) {
    let t_len = T::count(row.len());
    let ms = row.iter().map(|v| *v * *v).sum::<T>() / t_len;
    if ms > T::zero() {
        let s = ms.sqrt();
        row.mapv_inplace(|v| v / s);
    }
}

/// Feasible starting models, one per restart.
fn initial_models<T: Real>(
    z: &Array2<T>,
    r: usize,
    bounds: FitBounds<T>,
    opts: &FitOptions,
    warm: Option<&FactorModel<T>>,
) -> Vec<FactorModel<T>> {
    let (n, t_len) = z.dim();
    let s0 = if bounds.lower < T::one() && T::one() <= bounds.upper {
        T::one()
    } else {
        (bounds.lower + bounds.upper) / T::lit(2.0)
    };
    let dirs = exceedance_directions(z, r - 1);
    let amp = T::lit(0.3)
        .min(T::lit(0.9) * (bounds.upper / s0 - T::one()))
        .min(T::lit(0.9) * (T::one() - bounds.lower / s0))
        .max(T::zero());

    let mut out = Vec::with_capacity(opts.n_restarts);
    for restart in 0..opts.n_restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(restart as u64);
        if restart == 0 {
            if let Some(w) = warm {
                if w.r() == r {
                    out.push(w.clone());
                } else {
                    let row = match &dirs {
                        Some(d) => d.row(r - 2).to_owned(),
                        None => random_row(&mut rng, t_len),
                    };
                    out.push(pad_factor(w, row));
                }
                continue;
            }
        }
        let mut f = Array2::<T>::zeros((r, t_len));
        for t in 0..t_len {
            f[[0, t]] = if restart == 0 {
                T::one()
            } else {
                T::one() + amp * T::lit(rng.random_range(-1.0..1.0))
            };
        }
        for j in 1..r {
            let mut row = match &dirs {
                Some(d) => d.row(j - 1).to_owned(),
                None => random_row(&mut rng, t_len),
            };
            if restart > 0 {
                row.mapv_inplace(|v| v + T::lit(rng.random_range(-0.5..0.5)));
            }
            f.row_mut(j).assign(&row);
            standardize_row(f.row_mut(j));
        }
        let mut l = Array2::<T>::zeros((r, n));
        l.row_mut(0).fill(s0);
        out.push(FactorModel { loadings: l, factors: f });
    }
    out
}

fn random_row<T: Real>(rng: &mut ChaCha8Rng, t_len: usize) -> Array1<T> {
    let mut row = Array1::from_shape_fn(t_len, |_| T::lit(rng.random_range(-1.0..1.0)));
    standardize_row(row.view_mut());
    row
}
