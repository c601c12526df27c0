//! Panel container, tail configuration and the check loss.
//!
//! Quantile levels throughout the crate follow the *upper-tail* convention:
//! a level `tau` designates the `(1 - tau)`-quantile, so small `tau` means
//! far in the right tail. `check_loss(x, tau)` is minimised in expectation
//! by that quantile, and `k / (N*T)` is the intermediate tail level.

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Asymmetric absolute loss `(1(x > 0) - tau) * x` at upper-tail level `tau`.
pub fn check_loss<T: Real>(x: T, tau: T) -> Result<T> {
    if !(tau > T::zero() && tau < T::one()) {
        return Err(Error::arg(format!("check loss level must lie in (0,1), got {tau}")));
    }
    Ok(rho(x, tau))
}

/// Unchecked check loss for inner loops; `tau` must lie in (0,1).
#[inline]
pub(crate) fn rho<T: Real>(x: T, tau: T) -> T {
    if x > T::zero() {
        (T::one() - tau) * x
    } else {
        -tau * x
    }
}

/// An `N x T` panel of finite observations with unit and time labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData<T> {
    values: Array2<T>,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
}

impl<T: Real> PanelData<T> {
    pub fn new(values: Array2<T>, unit_labels: Vec<String>, time_labels: Vec<String>) -> Result<Self> {
        let (n, t) = values.dim();
        if n < 2 || t < 2 {
            return Err(Error::arg(format!("panel must be at least 2x2, got {n}x{t}")));
        }
        if unit_labels.len() != n || time_labels.len() != t {
            return Err(Error::arg(format!(
                "label count mismatch: {} unit labels for {n} rows, {} time labels for {t} columns",
                unit_labels.len(),
                time_labels.len()
            )));
        }
        check_unique(&unit_labels, "unit")?;
        check_unique(&time_labels, "time")?;
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Parse {
                location: format!("unit {:?}, time {:?}", unit_labels[i], time_labels[j]),
                message: format!("non-finite value {v}"),
            });
        }
        Ok(Self { values, unit_labels, time_labels })
    }

    /// Builds a panel with generated labels `u1..uN`, `t1..tT`.
    pub fn from_values(values: Array2<T>) -> Result<Self> {
        let (n, t) = values.dim();
        let units = (1..=n).map(|i| format!("u{i}")).collect();
        let times = (1..=t).map(|j| format!("t{j}")).collect();
        Self::new(values, units, times)
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn n_units(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_cells(&self) -> usize {
        self.values.len()
    }

    /// All observations pooled (row-major order).
    pub fn pooled(&self) -> Vec<T> {
        self.values.iter().copied().collect()
    }

    /// Same panel with new values (labels retained).
    pub fn with_values(&self, values: Array2<T>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::arg("replacement values must keep the panel shape"));
        }
        Self::new(values, self.unit_labels.clone(), self.time_labels.clone())
    }
}

fn check_unique(labels: &[String], axis: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(labels.len());
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::Duplicate(format!("{axis} label {l:?}")));
        }
    }
    Ok(())
}

/// Tail levels, bounds and selection constants shared by the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailConfig<T> {
    /// Intermediate order: the number of pooled observations in the tail.
    pub k: usize,
    /// Strict lower bound `m` on the scaled volatility surface.
    pub lower: T,
    /// Upper bound `M` on the scaled volatility surface.
    pub upper: T,
    /// Extreme upper-tail level, required only for extrapolation.
    pub p: Option<T>,
    /// Central level of the threshold model.
    pub tau_star: T,
    /// Penalty constant of the information criterion.
    pub c_ic: T,
    /// Largest factor count scanned by the information criterion.
    pub r_max: usize,
}

impl<T: Real> TailConfig<T> {
    pub const DEFAULT_LOWER: f64 = 0.1;
    pub const DEFAULT_UPPER: f64 = 1.6;
    pub const DEFAULT_TAU_STAR: f64 = 0.5;
    pub const DEFAULT_C_IC: f64 = 10.0;
    pub const DEFAULT_R_MAX: usize = 3;

    /// Defaults for everything but `k`.
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            lower: T::lit(Self::DEFAULT_LOWER),
            upper: T::lit(Self::DEFAULT_UPPER),
            p: None,
            tau_star: T::lit(Self::DEFAULT_TAU_STAR),
            c_ic: T::lit(Self::DEFAULT_C_IC),
            r_max: Self::DEFAULT_R_MAX,
        }
    }

    /// `k = round(frac * n_cells)`, at least 1.
    pub fn with_k_frac(frac: f64, n_cells: usize) -> Self {
        Self::with_k(k_from_fraction(frac, n_cells))
    }

    pub fn validate(&self, n_cells: usize) -> Result<()> {
        if self.k < 1 || self.k >= n_cells {
            return Err(Error::arg(format!("k must satisfy 1 <= k < N*T = {n_cells}, got {}", self.k)));
        }
        if !(self.lower > T::zero()) || !self.upper.is_finite() || self.upper < self.lower {
            return Err(Error::arg(format!(
                "bounds must satisfy 0 < m <= M, got m = {}, M = {}",
                self.lower, self.upper
            )));
        }
        if self.lower > T::one() || self.upper < T::one() {
            return Err(Error::arg(format!(
                "bounds must satisfy m <= 1 <= M, got m = {}, M = {}",
                self.lower, self.upper
            )));
        }
        if let Some(p) = self.p {
            let kt = T::count(self.k) / T::count(n_cells);
            if !(p > T::zero() && p < kt) {
                return Err(Error::arg(format!("extreme level p must lie in (0, k/NT = {kt}), got {p}")));
            }
        }
        if !(self.tau_star > T::zero() && self.tau_star < T::one()) {
            return Err(Error::arg(format!("tau* must lie in (0,1), got {}", self.tau_star)));
        }
        if !(self.c_ic > T::zero()) {
            return Err(Error::arg(format!("IC constant c must be positive, got {}", self.c_ic)));
        }
        Ok(())
    }

    /// Intermediate tail level `k / n_cells`.
    pub fn tail_level(&self, n_cells: usize) -> T {
        T::count(self.k) / T::count(n_cells)
    }
}

pub fn k_from_fraction(frac: f64, n_cells: usize) -> usize {
    ((frac * n_cells as f64).round() as usize).max(1)
}
