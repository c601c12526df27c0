//! Pooled order statistics, the Hill estimator and Weissman extrapolation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Intermediate tail quantile and tail index of a pooled sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimates<T> {
    /// k-th largest pooled observation.
    pub u_intermediate: T,
    /// Hill estimate; absent when the top k order statistics are not all positive.
    pub gamma_hat: Option<T>,
    pub k: usize,
    pub n: usize,
}

impl<T: Real> TailEstimates<T> {
    pub fn from_sample(values: &[T], k: usize) -> Result<Self> {
        let u_intermediate = order_statistic_quantile(values, k)?;
        let gamma_hat = if k >= 2 && k < values.len() { hill(values, k).ok() } else { None };
        Ok(Self { u_intermediate, gamma_hat, k, n: values.len() })
    }

    /// Weissman-extrapolated quantile at extreme level `p`.
    pub fn extreme_quantile(&self, p: T) -> Result<T> {
        let gamma = self
            .gamma_hat
            .ok_or_else(|| Error::EvtInfeasible("no Hill estimate available for extrapolation".into()))?;
        weissman_extrapolate(self.u_intermediate, gamma, self.k, self.n, p)
    }
}

fn desc<T: Real>(a: &T, b: &T) -> Ordering {
    b.partial_cmp(a).unwrap_or(Ordering::Equal)
}

/// The k-th largest value (k = 1 is the maximum); duplicates count separately.
pub fn order_statistic_quantile<T: Real>(values: &[T], k: usize) -> Result<T> {
    if k < 1 || k > values.len() {
        return Err(Error::arg(format!("order k must lie in 1..={}, got {k}", values.len())));
    }
    let mut buf = values.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, desc);
    Ok(*kth)
}

/// The `k` largest values in decreasing order.
pub fn top_order_statistics<T: Real>(values: &[T], k: usize) -> Result<Vec<T>> {
    if k < 1 || k > values.len() {
        return Err(Error::arg(format!("order k must lie in 1..={}, got {k}", values.len())));
    }
    let mut buf = values.to_vec();
    if k < buf.len() {
        buf.select_nth_unstable_by(k - 1, desc);
    }
    buf.truncate(k);
    buf.sort_unstable_by(desc);
    Ok(buf)
}

/// Hill estimator `k^-1 * sum_{i=1..k} log y_(i) - log y_(k)`, with `y_(i)` the
/// i-th largest value.
pub fn hill<T: Real>(values: &[T], k: usize) -> Result<T> {
    if k < 2 || k >= values.len() {
        return Err(Error::arg(format!("Hill order must satisfy 2 <= k < n = {}, got {k}", values.len())));
    }
    let top = top_order_statistics(values, k)?;
    if let Some((i, v)) = top.iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
        return Err(Error::Domain(format!(
            "order statistic {} of the top {k} is {v}; the Hill estimator needs positive values",
            i + 1
        )));
    }
    // Ratios keep the estimate exactly invariant to power-of-two rescaling.
    let base = top[k - 1];
    let sum: T = top.iter().map(|v| (*v / base).ln()).sum();
    Ok(sum / T::count(k))
}

/// Hill estimates for every `k` in `2..=k_max` (plot-ready), computed from
/// one sort.
pub fn hill_plot<T: Real>(values: &[T], k_max: usize) -> Result<Vec<(usize, T)>> {
    let k_max = k_max.min(values.len().saturating_sub(1));
    if k_max < 2 {
        return Err(Error::arg("Hill plot needs at least three observations"));
    }
    let top = top_order_statistics(values, k_max)?;
    let mut out = Vec::with_capacity(k_max - 1);
    let mut log_sum = T::zero();
    for (idx, v) in top.iter().enumerate() {
        if !(*v > T::zero()) {
            break;
        }
        log_sum += v.ln();
        let k = idx + 1;
        if k >= 2 {
            out.push((k, log_sum / T::count(k) - v.ln()));
        }
    }
    Ok(out)
}

/// `u_intermediate * (k / (n p))^gamma_hat`.
pub fn weissman_extrapolate<T: Real>(u_intermediate: T, gamma_hat: T, k: usize, n: usize, p: T) -> Result<T> {
    let ratio = T::count(k) / T::count(n);
    if !(p > T::zero() && p < ratio) {
        return Err(Error::arg(format!("extreme level p must lie in (0, k/n = {ratio}), got {p}")));
    }
    Ok(u_intermediate * extrapolation_factor(gamma_hat, k, n, p))
}

/// `(k / (n p))^gamma`.
pub(crate) fn extrapolation_factor<T: Real>(gamma: T, k: usize, n: usize, p: T) -> T {
    (T::count(k) / (T::count(n) * p)).powf(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn order_statistics() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(order_statistic_quantile(&v, 10).unwrap(), 91.0);
        assert_eq!(order_statistic_quantile(&v, 1).unwrap(), 100.0);
        assert_eq!(order_statistic_quantile(&[5.0, 5.0, 5.0, 1.0], 3).unwrap(), 5.0);
        assert_eq!(order_statistic_quantile(&[5.0, 5.0, 5.0, 1.0], 4).unwrap(), 1.0);
        assert!(order_statistic_quantile(&v, 0).is_err());
        assert!(order_statistic_quantile(&v, 101).is_err());
    }

    #[test]
    fn hill_closed_form() {
        // values (n/j)^0.5, j = 1..16; the oracle sums the logs directly.
        let n = 16;
        let v: Vec<f64> = (1..=n).map(|j| (n as f64 / j as f64).sqrt()).collect();
        let k = 4;
        let oracle: f64 = (1..=k).map(|i| (0.5 / k as f64) * (k as f64 / i as f64).ln()).sum();
        assert!((oracle - 0.295_894).abs() < 5e-6);
        assert!((hill(&v, k).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn hill_degenerate_and_domain() {
        let v = [3.0, 3.0, 3.0, 3.0, 1.0];
        assert_eq!(hill(&v, 3).unwrap(), 0.0);
        let v = [4.0, 2.0, 0.0, -1.0, -2.0];
        match hill(&v, 3) {
            Err(Error::Domain(msg)) => assert!(msg.contains("order statistic 3")),
            other => panic!("expected domain error, got {other:?}"),
        }
        assert!(hill(&v, 1).is_err());
        assert!(hill(&v, 5).is_err());
    }

    #[test]
    fn hill_plot_matches_pointwise() {
        let v: Vec<f64> = (1..=50).map(|j| (50.0 / j as f64).powf(0.7) + 0.01 * j as f64).collect();
        for (k, g) in hill_plot(&v, 20).unwrap() {
            assert!((g - hill(&v, k).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn weissman_cases() {
        let (k, n) = (100, 100_000);
        let p = k as f64 / (n as f64 * 100.0);
        assert!((weissman_extrapolate(10.0, 0.5, k, n, p).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(weissman_extrapolate(7.0, 0.0, k, n, p).unwrap(), 7.0);
        assert!(weissman_extrapolate(7.0, 0.5, k, n, 0.001).is_err());
        assert!(weissman_extrapolate(7.0, 0.5, k, n, 0.0).is_err());

        // reference tail quantile U(x) = c (x/2)^(1/lambda): extrapolating
        // U(n/k) recovers U(1/p) exactly.
        let (c, lambda) = (1.3_f64, 3.0_f64);
        let u = |x: f64| c * (x / 2.0).powf(1.0 / lambda);
        let p = 1e-5;
        let got = weissman_extrapolate(u(n as f64 / k as f64), 1.0 / lambda, k, n, p).unwrap();
        assert!((got - u(1.0 / p)).abs() < 1e-12 * u(1.0 / p));
    }

    #[test]
    fn tail_estimates_bundle() {
        let v: Vec<f64> = (1..=1000).map(|j| (1000.0 / j as f64).sqrt()).collect();
        let est = TailEstimates::from_sample(&v, 100).unwrap();
        assert_eq!(est.u_intermediate, v[99]);
        assert!(est.gamma_hat.unwrap() > 0.4);
        let q = est.extreme_quantile(0.001).unwrap();
        assert!(q > est.u_intermediate);
        let v: Vec<f64> = (0..10).map(|j| j as f64 - 20.0).collect();
        assert!(TailEstimates::from_sample(&v, 3).unwrap().gamma_hat.is_none());
    }

    proptest! {
        #[test]
        fn scale_equivariance(v in proptest::collection::vec(0.01f64..100.0, 5..60), a in 0.5f64..4.0, kf in 0.0f64..1.0) {
            let n = v.len();
            let k = 2 + ((n - 3) as f64 * kf) as usize;
            let scaled: Vec<f64> = v.iter().map(|x| a * x).collect();
            let q = order_statistic_quantile(&v, k).unwrap();
            prop_assert_eq!(order_statistic_quantile(&scaled, k).unwrap(), a * q);
            let h = hill(&v, k).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!((hill(&scaled, k).unwrap() - h).abs() <= 1e-12 * (1.0 + h));
        }

        #[test]
        fn weissman_monotone(gamma in 0.0f64..2.0, p1 in 1e-6f64..1e-3, p2 in 1e-6f64..1e-3) {
            let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
            let a = weissman_extrapolate(3.0, gamma, 50, 10_000, lo).unwrap();
            let b = weissman_extrapolate(3.0, gamma, 50, 10_000, hi).unwrap();
            prop_assert!(a >= b);
        }
    }
}
