//! Testing the degenerate (common tail quantile) model and choosing the
//! number of tail factors.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evt::order_statistic_quantile;
use crate::fit::{fit_ftvm, fit_ftvm_from, FitOptions, FitResult};
use crate::panel::{rho, PanelData, TailConfig};
use crate::scalar::Real;

/// Significance levels reported by [`KsReport`].
pub const KS_LEVELS: [f64; 3] = [0.10, 0.05, 0.01];

/// Outcome of the exceedance-position KS test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsReport<T> {
    pub statistic: T,
    pub p_value: T,
    pub k: usize,
    /// Keyed by the level printed with two decimals.
    pub reject_at: BTreeMap<String, bool>,
}

impl<T: Real> KsReport<T> {
    pub fn new(statistic: T, k: usize) -> Result<Self> {
        let p_value = ks_pvalue(statistic)?;
        let reject_at = KS_LEVELS
            .iter()
            .map(|a| (format!("{a:.2}"), p_value.as_f64() < *a))
            .collect();
        Ok(Self { statistic, p_value, k, reject_at })
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value.as_f64() < alpha
    }
}

/// KS distance between the time-major cumulative share of exceedances of
/// `U(NT/k)` and the uniform line, scaled by `sqrt(k)`.
pub fn ks_statistic<T: Real>(panel: &PanelData<T>, k: usize) -> Result<T> {
    ks_statistic_values(panel.values(), k)
}

/// [`ks_statistic`] on a raw N x T matrix.
pub fn ks_statistic_values<T: Real>(values: &Array2<T>, k: usize) -> Result<T> {
    let (n, t_len) = values.dim();
    let total = n * t_len;
    if k < 1 || k >= total {
        return Err(Error::arg(format!("k must satisfy 1 <= k < N*T = {total}, got {k}")));
    }
    let flat: Vec<T> = values.iter().copied().collect();
    let u = order_statistic_quantile(&flat, k)?;
    let kf = T::count(k);
    let nt = T::count(total);
    let mut count = 0usize;
    let mut sup = T::zero();
    // Step j covers s in [j/NT, (j+1)/NT) with level C(j)/k.
    for j in 0..=total {
        let c = T::count(count) / kf;
        let left = (c - T::count(j) / nt).abs();
        sup = sup.max(left);
        if j < total {
            sup = sup.max((c - T::count(j + 1) / nt).abs());
            let (t, i) = (j / n, j % n);
            if values[[i, t]] >= u {
                count += 1;
            }
        }
    }
    Ok(kf.sqrt() * sup)
}

/// `P(sup |B(s)| > x)` for a standard Brownian bridge.
pub fn ks_pvalue<T: Real>(statistic: T) -> Result<T> {
    let x = statistic.as_f64();
    if x.is_nan() || x < 0.0 {
        return Err(Error::arg(format!("KS statistic must be nonnegative, got {statistic}")));
    }
    let p = if x == 0.0 {
        1.0
    } else if x < 1.0 {
        // Jacobi theta form of the CDF: sqrt(2 pi)/x * sum exp(-(2j-1)^2 pi^2 / (8 x^2)).
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut cdf = 0.0;
        for j in 1..=100 {
            let m = (2 * j - 1) as f64;
            let term = (-(m * m) * pi2 / (8.0 * x * x)).exp();
            cdf += term;
            if term < 1e-16 {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / x * cdf
    } else {
        let mut sum = 0.0;
        for j in 1..=100 {
            let jf = j as f64;
            let term = (-2.0 * jf * jf * x * x).exp();
            sum += if j % 2 == 1 { term } else { -term };
            if term < 1e-12 {
                break;
            }
        }
        2.0 * sum
    };
    Ok(T::lit(p.clamp(0.0, 1.0)))
}

/// KS statistic and its asymptotic p-value.
pub fn ks_test<T: Real>(panel: &PanelData<T>, k: usize) -> Result<KsReport<T>> {
    KsReport::new(ks_statistic(panel, k)?, k)
}

/// One row of the information criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcTerm<T> {
    pub l: usize,
    /// `k^-1 sum rho_{k/NT}(Y/U - l_i^T f_t)` at the fitted surface.
    pub loss_term: T,
    pub penalty: T,
    pub total: T,
}

/// Factor-count selection by the penalised check loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcReport<T> {
    pub r_hat: usize,
    pub criterion_values: Vec<IcTerm<T>>,
    pub penalty_base: T,
    pub warnings: Vec<String>,
}

/// How candidate models are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IcMode {
    /// Serial; `l + 1` starts from the `l`-factor fit padded with a zero-loading factor.
    #[default]
    WarmChain,
    /// Each `l` fitted independently (in parallel).
    Independent,
}

/// Scans `l = 0..=r_max` and picks the minimiser of
/// `loss_term(l) + l * penalty_base` (ties to the smaller `l`).
pub fn ic_select<T: Real>(panel: &PanelData<T>, cfg: &TailConfig<T>, opts: &FitOptions) -> Result<IcReport<T>> {
    ic_select_with(panel, cfg, opts, IcMode::WarmChain).map(|(r, _)| r)
}

/// [`ic_select`] that also returns the candidate fits (index `l - 1`).
pub fn ic_select_with<T: Real>(
    panel: &PanelData<T>,
    cfg: &TailConfig<T>,
    opts: &FitOptions,
    mode: IcMode,
) -> Result<(IcReport<T>, Vec<FitResult<T>>)> {
    cfg.validate(panel.n_cells())?;
    if cfg.r_max < 1 {
        return Err(Error::arg("r_max must be at least 1"));
    }
    let (n, t_len) = (panel.n_units(), panel.n_times());
    let k = cfg.k;
    let kf = T::count(k);
    let r_max = cfg.r_max.min(n.min(t_len));
    let mut warnings = Vec::new();
    if r_max < cfg.r_max {
        warnings.push(format!("r_max reduced from {} to min(N, T) = {r_max}", cfg.r_max));
    }
    let pooled = panel.pooled();
    let u = order_statistic_quantile(&pooled, k)?;
    if !(u > T::zero()) {
        return Err(Error::EvtInfeasible(format!("the {k}-th largest pooled value is {u}; need a positive quantile")));
    }
    let tau = cfg.tail_level(panel.n_cells());
    let loss0 = pooled.iter().map(|&y| rho(y / u - T::one(), tau)).sum::<T>() / kf;

    let fits: Vec<FitResult<T>> = match mode {
        IcMode::WarmChain => {
            let mut fits: Vec<FitResult<T>> = Vec::with_capacity(r_max);
            for l in 1..=r_max {
                let fit = match fits.last() {
                    Some(prev) => fit_ftvm_from(panel, l, cfg, opts, Some(&prev.model))?,
                    None => fit_ftvm(panel, l, cfg, opts)?,
                };
                fits.push(fit);
            }
            fits
        }
        IcMode::Independent => (1..=r_max)
            .into_par_iter()
            .map(|l| fit_ftvm(panel, l, cfg, opts))
            .collect::<Result<Vec<_>>>()?,
    };

    let nt_sum = T::count(n + t_len);
    if k <= n + t_len {
        warnings.push(format!(
            "k = {k} <= N + T = {}: the penalty is nonpositive and the selection is unreliable",
            n + t_len
        ));
    }
    let penalty_base = nt_sum / (cfg.c_ic * kf) * (kf / nt_sum).ln() * loss0;
    let mut criterion_values = vec![IcTerm { l: 0, loss_term: loss0, penalty: T::zero(), total: loss0 }];
    for (idx, fit) in fits.iter().enumerate() {
        let l = idx + 1;
        let loss_term = fit.final_loss / kf;
        let penalty = T::count(l) * penalty_base;
        criterion_values.push(IcTerm { l, loss_term, penalty, total: loss_term + penalty });
    }
    let mut r_hat = 0;
    for term in &criterion_values {
        if term.total < criterion_values[r_hat].total {
            r_hat = term.l;
        }
    }
    Ok((IcReport { r_hat, criterion_values, penalty_base, warnings }, fits))
}

/// Result of testing then selecting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Selection<T> {
    /// The common-quantile model was not rejected.
    Degenerate { ks: KsReport<T> },
    Factors { ks: KsReport<T>, ic: IcReport<T> },
}

impl<T> Selection<T> {
    pub fn r(&self) -> usize {
        match self {
            Selection::Degenerate { .. } => 0,
            Selection::Factors { ic, .. } => ic.r_hat,
        }
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if KS_LEVELS.iter().any(|a| (a - alpha).abs() < 1e-12) {
        Ok(())
    } else {
        Err(Error::arg(format!("alpha must be one of 0.10, 0.05, 0.01, got {alpha}")))
    }
}

/// KS test at level `alpha`; on rejection, the information criterion.
pub fn validate_then_select<T: Real>(
    panel: &PanelData<T>,
    cfg: &TailConfig<T>,
    alpha: f64,
    opts: &FitOptions,
) -> Result<Selection<T>> {
    check_alpha(alpha)?;
    cfg.validate(panel.n_cells())?;
    let ks = ks_test(panel, cfg.k)?;
    if !ks.rejects(alpha) {
        return Ok(Selection::Degenerate { ks });
    }
    let ic = ic_select(panel, cfg, opts)?;
    Ok(Selection::Factors { ks, ic })
}
