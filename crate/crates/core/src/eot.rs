//! Excess-over-threshold pipeline: a central quantile model removes the
//! location of every cell, and the tail factor model is fitted to the excesses.

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evt::{hill, order_statistic_quantile};
use crate::fit::{alternate, extreme_factor, fit_ftvm, FitOptions, FitResult};
use crate::linalg::truncated_svd;
use crate::model::FactorModel;
use crate::panel::{PanelData, TailConfig};
use crate::qr::{solve_vector_qr, FitBounds, VectorQrOptions};
use crate::scalar::Real;
use crate::selection::{check_alpha, ic_select_with, IcMode, IcReport, KsReport};
use crate::evt::TailEstimates;

/// Central quantile model subtracted before tail estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdKind {
    /// Pooled empirical quantile, the same for every cell.
    Constant,
    /// Additive quantile factor model `alpha_i^T beta_t` with `r` factors.
    Qfm { r: usize },
    /// Linear quantile regression with intercept, per unit, on covariates.
    PerUnitQr,
}

/// Options specific to the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EotFlags {
    /// Skip the test and use the common excess quantile.
    pub force_degenerate: bool,
    /// Skip the test and the criterion; fit this many excess factors (0 means degenerate).
    pub force_r: Option<usize>,
}

/// Everything produced by [`run_eot`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Clone", deserialize = "T: Deserialize<'de>"))]
pub struct EoTResult<T> {
    #[serde(with = "crate::io::matrix")]
    pub threshold_surface: Array2<T>,
    #[serde(with = "crate::io::matrix")]
    pub excess_panel: Array2<T>,
    pub k: usize,
    /// k-th largest excess.
    pub u_adj: T,
    /// Hill estimate on the excesses.
    pub gamma_adj: T,
    pub ks_adj: KsReport<T>,
    pub ic: Option<IcReport<T>>,
    /// Number of excess factors; 0 is the common-quantile branch.
    pub r_selected: usize,
    pub excess_model: Option<FactorModel<T>>,
    #[serde(with = "crate::io::matrix")]
    pub intermediate_surface: Array2<T>,
    pub p: Option<T>,
    #[serde(with = "crate::io::option_matrix")]
    pub extreme_surface: Option<Array2<T>>,
}

impl<T: Real> EoTResult<T> {
    /// Fitted excess surface `l_i^T f_t` (all ones on the common-quantile branch).
    pub fn excess_surface(&self) -> Array2<T> {
        match &self.excess_model {
            Some(m) => m.surface(),
            None => Array2::from_elem(self.threshold_surface.dim(), T::one()),
        }
    }
}

/// Fits the central quantile surface at level `tau_star` (upper-tail
/// convention: the `(1 - tau_star)`-quantile).
pub fn fit_threshold<T: Real>(
    panel: &PanelData<T>,
    covariates: Option<&Array3<T>>,
    kind: ThresholdKind,
    tau_star: T,
    opts: &FitOptions,
) -> Result<Array2<T>> {
    if !(tau_star > T::zero() && tau_star < T::one()) {
        return Err(Error::arg(format!("tau* must lie in (0,1), got {tau_star}")));
    }
    let (n, t_len) = (panel.n_units(), panel.n_times());
    match kind {
        ThresholdKind::Constant => {
            let k_star = ((tau_star * T::count(panel.n_cells())).round().to_usize().unwrap_or(1)).max(1);
            let h = order_statistic_quantile(&panel.pooled(), k_star.min(panel.n_cells()))?;
            Ok(Array2::from_elem((n, t_len), h))
        }
        ThresholdKind::Qfm { r } => Ok(fit_qfm(panel.values(), r, tau_star, opts)?.surface()),
        ThresholdKind::PerUnitQr => {
            let cov = covariates.ok_or_else(|| Error::arg("per-unit quantile regression needs covariates"))?;
            per_unit_qr(panel.values(), cov, tau_star).map(|(surface, _)| surface)
        }
    }
}

/// Unconstrained additive check-loss factorization `Y ≈ L^T F` at tail level
/// `tau`. Alternation starts from the truncated SVD of the raw panel, from
/// that of the panel clipped to its central 95% (single outliers cannot
/// claim a factor there), and from a constant first factor; the lowest
/// objective wins.
pub fn fit_qfm<T: Real>(values: &Array2<T>, r: usize, tau: T, opts: &FitOptions) -> Result<FactorModel<T>> {
    opts.validate()?;
    let (n, t_len) = values.dim();
    if r < 1 || r > n.min(t_len) {
        return Err(Error::Rank(format!("QFM factor count must lie in 1..={}, got {r}", n.min(t_len))));
    }
    let raw = svd_start(values, r)?;
    let flat: Vec<T> = values.iter().copied().collect();
    let cut = (flat.len() / 40).max(1);
    let (hi, lo) = (order_statistic_quantile(&flat, cut)?, order_statistic_quantile(&flat, flat.len() + 1 - cut)?);
    let clipped = svd_start(&values.mapv(|v| v.max(lo).min(hi)), r).ok();
    let constant = clipped.as_ref().map(|c| {
        let mut m = c.clone();
        m.factors.row_mut(0).fill(T::one());
        m.loadings.fill(T::zero());
        for (i, row) in values.rows().into_iter().enumerate() {
            let v: Vec<T> = row.to_vec();
            let k = ((T::count(t_len) * tau).round().to_usize().unwrap_or(1)).clamp(1, t_len);
            m.loadings[[0, i]] = order_statistic_quantile(&v, k).unwrap_or(T::zero());
        }
        m
    });
    let starts: Vec<FactorModel<T>> = [Some(raw), clipped, constant].into_iter().flatten().collect();
    let runs: Vec<Result<(FactorModel<T>, T)>> = starts
        .into_par_iter()
        .map(|start| alternate(values, start, tau, FitBounds::unbounded(), opts, true).map(|run| (run.model, run.loss)))
        .collect();
    let mut best: Option<(FactorModel<T>, T)> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start").0)
}

fn svd_start<T: Real>(values: &Array2<T>, r: usize) -> Result<FactorModel<T>> {
    let (u, s, v) = truncated_svd(values, r)?;
    if s.iter().any(|x| !(*x > T::zero())) {
        return Err(Error::Rank(format!("panel has fewer than {r} nonzero singular values")));
    }
    let loadings = Array2::from_shape_fn((r, values.nrows()), |(j, i)| u[[i, j]] * s[j]);
    FactorModel::new(loadings, v.t().to_owned())
}

/// Per-unit linear quantile regression of `values[i, .]` on an intercept and
/// `cov[i, ., .]`. Returns the fitted surface and the coefficients (N x (d+1)).
pub fn per_unit_qr<T: Real>(values: &Array2<T>, cov: &Array3<T>, tau: T) -> Result<(Array2<T>, Array2<T>)> {
    let (n, t_len) = values.dim();
    let (cn, ct, d) = cov.dim();
    if cn != n || ct != t_len {
        return Err(Error::arg(format!("covariates are {cn}x{ct}x{d}, panel is {n}x{t_len}")));
    }
    let qopts = VectorQrOptions { max_cycles: 500, rel_tol: 1e-12, ..VectorQrOptions::default() };
    let fits: Vec<Result<Array1<T>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = Array2::from_shape_fn((d + 1, t_len), |(j, t)| if j == 0 { T::one() } else { cov[[i, t, j - 1]] });
            let z = values.row(i).to_vec();
            let init = vec![T::zero(); d + 1];
            solve_vector_qr(&z, x.view(), tau, FitBounds::unbounded(), &init, &qopts).map(|o| o.coef)
        })
        .collect();
    let mut coefs = Array2::zeros((n, d + 1));
    for (i, c) in fits.into_iter().enumerate() {
        coefs.row_mut(i).assign(&c?);
    }
    let surface = Array2::from_shape_fn((n, t_len), |(i, t)| {
        coefs[[i, 0]] + (0..d).map(|j| coefs[[i, j + 1]] * cov[[i, t, j]]).sum::<T>()
    });
    Ok((surface, coefs))
}

/// Threshold, excesses, adjusted tail estimates, test, selection and the
/// combined quantile surfaces.
pub fn run_eot<T: Real>(
    panel: &PanelData<T>,
    covariates: Option<&Array3<T>>,
    kind: ThresholdKind,
    cfg: &TailConfig<T>,
    alpha: f64,
    opts: &FitOptions,
    flags: EotFlags,
) -> Result<EoTResult<T>> {
    check_alpha(alpha)?;
    cfg.validate(panel.n_cells())?;
    let threshold = fit_threshold(panel, covariates, kind, cfg.tau_star, opts)?;
    run_eot_with_threshold(panel, threshold, cfg, alpha, opts, flags)
}

/// [`run_eot`] with a given threshold surface.
pub fn run_eot_with_threshold<T: Real>(
    panel: &PanelData<T>,
    threshold: Array2<T>,
    cfg: &TailConfig<T>,
    alpha: f64,
    opts: &FitOptions,
    flags: EotFlags,
) -> Result<EoTResult<T>> {
    check_alpha(alpha)?;
    cfg.validate(panel.n_cells())?;
    if threshold.dim() != panel.values().dim() {
        return Err(Error::arg("threshold surface must match the panel shape"));
    }
    let k = cfg.k;
    let excess = panel.values() - &threshold;
    let positive = excess.iter().filter(|v| **v > T::zero()).count();
    if positive < k {
        return Err(Error::EvtInfeasible(format!(
            "only {positive} positive excesses for k = {k}; use a smaller k or a lower central level tau*"
        )));
    }
    let excess_panel = panel.with_values(excess)?;
    let pooled = excess_panel.pooled();
    let u_adj = order_statistic_quantile(&pooled, k)?;
    let gamma_adj = hill(&pooled, k)?;
    let ks_adj = crate::selection::ks_test(&excess_panel, k)?;

    let (r_selected, ic, fit): (usize, Option<IcReport<T>>, Option<FitResult<T>>) = if flags.force_degenerate {
        (0, None, None)
    } else if let Some(r) = flags.force_r {
        if r == 0 {
            (0, None, None)
        } else {
            (r, None, Some(fit_ftvm(&excess_panel, r, cfg, opts)?))
        }
    } else if !ks_adj.rejects(alpha) {
        (0, None, None)
    } else {
        let (report, mut fits) = ic_select_with(&excess_panel, cfg, opts, IcMode::WarmChain)?;
        let r = report.r_hat;
        let fit = if r == 0 { None } else { Some(fits.swap_remove(r - 1)) };
        (r, Some(report), fit)
    };

    let excess_model = fit.map(|f| f.model);
    let scale = match &excess_model {
        Some(m) => m.surface(),
        None => Array2::from_elem(threshold.dim(), T::one()),
    };
    let intermediate_surface = &threshold + &scale.mapv(|v| v * u_adj);
    let extreme_surface = match cfg.p {
        Some(p) => {
            let tail = TailEstimates { u_intermediate: u_adj, gamma_hat: Some(gamma_adj), k, n: panel.n_cells() };
            let factor = extreme_factor(&tail, p)?;
            Some(&threshold + &scale.mapv(|v| v * u_adj * factor))
        }
        None => None,
    };
    Ok(EoTResult {
        threshold_surface: threshold,
        excess_panel: excess_panel.values().clone(),
        k,
        u_adj,
        gamma_adj,
        ks_adj,
        ic,
        r_selected,
        excess_model,
        intermediate_surface,
        p: cfg.p,
        extreme_surface,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::QuantileLevel;

    fn panel(v: Array2<f64>) -> PanelData<f64> {
        PanelData::from_values(v).unwrap()
    }

    #[test]
    fn constant_threshold_is_pooled_quantile() {
        let p = panel(Array2::from_shape_fn((10, 10), |(i, t)| (i * 10 + t + 1) as f64));
        let h = fit_threshold(&p, None, ThresholdKind::Constant, 0.5, &FitOptions::default()).unwrap();
        assert!(h.iter().all(|v| *v == 51.0));
    }

    #[test]
    fn qfm_recovers_rank_one() {
        let a = [1.0, 2.0, 0.5, 3.0, 1.5];
        let b = [2.0, 1.0, 4.0, 0.3, 1.1, 2.2];
        let y: Array2<f64> = Array2::from_shape_fn((5, 6), |(i, t)| a[i] * b[t]);
        let m = fit_qfm(&y, 1, 0.5, &FitOptions::default()).unwrap();
        let s = m.surface();
        for (x, z) in s.iter().zip(y.iter()) {
            assert!((x - z).abs() < 1e-6);
        }
    }

    #[test]
    fn per_unit_qr_exact_line() {
        let t_len = 12;
        let cov = Array3::from_shape_fn((2, t_len, 1), |(i, t, _)| (t as f64 - 3.0) * (1.0 + i as f64));
        let y = Array2::from_shape_fn((2, t_len), |(i, t)| 2.0 * cov[[i, t, 0]]);
        let (surface, coefs) = per_unit_qr(&y, &cov, 0.5).unwrap();
        for i in 0..2 {
            assert!(coefs[[i, 0]].abs() < 1e-10);
            assert!((coefs[[i, 1]] - 2.0).abs() < 1e-10);
        }
        for (a, b) in surface.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(per_unit_qr(&y, &Array3::zeros((2, 3, 1)), 0.5).is_err());
    }

    fn heavy_panel(n: usize, t: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, t), |(i, tt)| {
            let u = ((i * 7919 + tt * 104_729) % 1000) as f64 / 1000.0 + 0.0005;
            let vol = if tt % 2 == 0 { 1.0 } else { 1.4 };
            vol * u.powf(-0.5)
        })
    }

    #[test]
    fn zero_threshold_reduces_to_direct_fit() {
        let y = heavy_panel(12, 12);
        let p = panel(y.clone());
        let mut cfg = TailConfig::with_k(20);
        cfg.p = Some(0.01);
        let opts = FitOptions { n_restarts: 2, ..FitOptions::default() };
        let flags = EotFlags { force_r: Some(1), ..EotFlags::default() };
        let res = run_eot_with_threshold(&p, Array2::zeros((12, 12)), &cfg, 0.05, &opts, flags).unwrap();
        let direct = fit_ftvm(&p, 1, &cfg, &opts).unwrap();
        assert_eq!(res.u_adj, direct.tail.u_intermediate);
        assert_eq!(Some(res.gamma_adj), direct.tail.gamma_hat);
        let inter = crate::fit::predict_quantiles(&direct, QuantileLevel::Intermediate).unwrap();
        assert_eq!(res.intermediate_surface, inter);
        let ext = crate::fit::predict_quantiles(&direct, QuantileLevel::Extreme(0.01)).unwrap();
        for (a, b) in res.extreme_surface.unwrap().iter().zip(ext.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn location_shift_is_absorbed() {
        let y = heavy_panel(10, 10).mapv(|v| (v * 64.0).round());
        let cfg = TailConfig::with_k(15);
        let opts = FitOptions { n_restarts: 1, ..FitOptions::default() };
        let flags = EotFlags { force_r: Some(1), ..EotFlags::default() };
        let a = run_eot(&panel(y.clone()), None, ThresholdKind::Constant, &cfg, 0.05, &opts, flags).unwrap();
        let b = run_eot(&panel(y.mapv(|v| v + 1024.0)), None, ThresholdKind::Constant, &cfg, 0.05, &opts, flags).unwrap();
        assert_eq!(a.u_adj, b.u_adj);
        assert_eq!(a.gamma_adj, b.gamma_adj);
        assert_eq!(a.ks_adj, b.ks_adj);
        assert_eq!(a.r_selected, b.r_selected);
        assert_eq!(a.excess_panel, b.excess_panel);
        assert_eq!(a.excess_surface(), b.excess_surface());
    }

    #[test]
    fn too_few_positive_excesses() {
        let p = panel(Array2::from_shape_fn((4, 4), |(i, t)| (i + t) as f64));
        let cfg = TailConfig::with_k(10);
        let err = run_eot(&p, None, ThresholdKind::Constant, &cfg, 0.05, &FitOptions::default(), EotFlags::default());
        assert!(matches!(err, Err(Error::EvtInfeasible(_))));
    }

    #[test]
    fn degenerate_surfaces() {
        let y = heavy_panel(10, 10);
        let mut cfg = TailConfig::with_k(10);
        cfg.p = Some(0.001);
        let flags = EotFlags { force_degenerate: true, ..EotFlags::default() };
        let res = run_eot(&panel(y), None, ThresholdKind::Constant, &cfg, 0.05, &FitOptions::default(), flags).unwrap();
        assert_eq!(res.r_selected, 0);
        let factor = (10.0f64 / (100.0 * 0.001)).powf(res.gamma_adj);
        let ext = res.extreme_surface.as_ref().unwrap();
        for ((h, i), e) in res.threshold_surface.iter().zip(res.intermediate_surface.iter()).zip(ext.iter()) {
            assert!((i - h - res.u_adj).abs() < 1e-12);
            assert!((e - (h + (i - h) * factor)).abs() < 1e-10 * e.abs());
        }
    }
}
