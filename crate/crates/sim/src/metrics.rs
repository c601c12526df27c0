//! Error metrics against the known truth of a simulated panel.

use ndarray::{Array1, Array2};
use statrs::distribution::{ContinuousCDF, StudentsT};
use tailfactor_core::{Error, FactorModel, Result};

use crate::dgp::DgpSample;

/// True conditional quantiles of every cell at one upper-tail level, and the
/// reference quantile that normalizes errors.
#[derive(Debug, Clone)]
pub struct TailTruth {
    pub level: f64,
    pub quantiles: Array2<f64>,
    pub reference: f64,
}

/// `(1 - tau)`-quantile of the standard Student-t law with `nu` degrees of freedom.
pub fn student_t_upper_quantile(nu: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) || !(nu > 0.0) {
        return Err(Error::arg(format!("need 0 < tau < 1 and nu > 0, got tau = {tau}, nu = {nu}")));
    }
    let t = StudentsT::new(0.0, 1.0, nu).map_err(|e| Error::arg(format!("student-t: {e}")))?;
    Ok(t.inverse_cdf(1.0 - tau))
}

/// Truth at level `tau` for a sample, with reference constant `c`.
///
/// DGP1-3: a cell exceeds `y > 0` with probability `(y / vol)^(-lambda) / 2`,
/// so its quantile is `vol * (2 tau)^(-1/lambda)` and the reference is
/// `c * (2 tau)^(-1/lambda)`; this needs `tau < 1/2`.
/// DGP4-5: the quantile is `H + vol * q_t` with the Student-t quantile `q_t`,
/// and the reference is `c * q_t`.
pub fn truth_at(sample: &DgpSample, c: f64, tau: f64) -> Result<TailTruth> {
    if !(c > 0.0) {
        return Err(Error::arg(format!("reference constant must be positive, got {c}")));
    }
    let lambda = sample.spec.lambda;
    let vol = sample.volatility();
    match &sample.true_threshold {
        None => {
            if !(tau > 0.0 && tau < 0.5) {
                return Err(Error::arg(format!("symmetric designs need 0 < tau < 1/2, got {tau}")));
            }
            let scale = (2.0 * tau).powf(-1.0 / lambda);
            Ok(TailTruth { level: tau, quantiles: vol.mapv(|v| v * scale), reference: c * scale })
        }
        Some(h) => {
            let q = student_t_upper_quantile(lambda, tau)?;
            if !(q > 0.0) {
                return Err(Error::arg(format!("level {tau} is not in the upper tail")));
            }
            Ok(TailTruth { level: tau, quantiles: h + &vol.mapv(|v| v * q), reference: c * q })
        }
    }
}

/// Mean over cells of `((pred - truth) / reference)^2`.
pub fn msre_surface(pred: &Array2<f64>, truth: &TailTruth) -> Result<f64> {
    if pred.dim() != truth.quantiles.dim() {
        return Err(Error::arg(format!("prediction is {:?}, truth is {:?}", pred.dim(), truth.quantiles.dim())));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(truth.quantiles.iter()).map(|(p, q)| ((p - q) / truth.reference).powi(2)).sum::<f64>() / n)
}

/// MSRE of the scaled surface `l_i^T f_t * scale`.
pub fn msre(model: &FactorModel<f64>, scale: f64, truth: &TailTruth) -> Result<f64> {
    msre_surface(&model.surface().mapv(|v| v * scale), truth)
}

/// MSRE of `threshold + l_i^T f_t * scale`; no model means the all-ones surface.
pub fn msre_eot(threshold: &Array2<f64>, model: Option<&FactorModel<f64>>, scale: f64, truth: &TailTruth) -> Result<f64> {
    let surface = match model {
        Some(m) => m.surface(),
        None => Array2::from_elem(threshold.dim(), 1.0),
    };
    if surface.dim() != threshold.dim() {
        return Err(Error::arg("threshold and model shapes differ"));
    }
    msre_surface(&(threshold + &surface.mapv(|v| v * scale)), truth)
}

/// Signs `S = sgn(diag(F_true F_hat^T))` and the errors
/// `N^(-1/2) |L_hat - S L_true|_F`, `T^(-1/2) |F_hat - S F_true|_F`.
/// Both models should be in the same identification gauge.
pub fn align_and_score(
    f_true: &Array2<f64>,
    f_hat: &Array2<f64>,
    l_true: &Array2<f64>,
    l_hat: &Array2<f64>,
) -> Result<(Array1<f64>, f64, f64)> {
    if f_true.dim() != f_hat.dim() || l_true.dim() != l_hat.dim() || f_true.nrows() != l_true.nrows() {
        return Err(Error::arg(format!(
            "shape mismatch: F {:?} vs {:?}, L {:?} vs {:?}",
            f_true.dim(),
            f_hat.dim(),
            l_true.dim(),
            l_hat.dim()
        )));
    }
    let r = f_true.nrows();
    let signs = Array1::from_shape_fn(r, |j| if f_true.row(j).dot(&f_hat.row(j)) < 0.0 { -1.0 } else { 1.0 });
    let dist = |hat: &Array2<f64>, truth: &Array2<f64>| {
        let mut s = 0.0;
        for j in 0..r {
            for (a, b) in hat.row(j).iter().zip(truth.row(j).iter()) {
                s += (a - signs[j] * b).powi(2);
            }
        }
        s.sqrt()
    };
    let l_err = dist(l_hat, l_true) / (l_true.ncols() as f64).sqrt();
    let f_err = dist(f_hat, f_true) / (f_true.ncols() as f64).sqrt();
    Ok((signs, l_err, f_err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, DgpSpec};
    use proptest::prelude::*;

    #[test]
    fn student_t_closed_forms() {
        for tau in [0.4, 0.1, 0.05, 0.01, 0.001] {
            let p: f64 = 1.0 - tau;
            let cauchy = (std::f64::consts::PI * (p - 0.5)).tan();
            let two = (2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt();
            assert!((student_t_upper_quantile(1.0, tau).unwrap() - cauchy).abs() < 1e-10 * cauchy.abs().max(1.0));
            assert!((student_t_upper_quantile(2.0, tau).unwrap() - two).abs() < 1e-10 * two.abs().max(1.0));
        }
        assert!(student_t_upper_quantile(2.0, 0.0).is_err());
    }

    #[test]
    fn perfect_fit_scores_zero() {
        let s = generate(&DgpSpec::new(1, 6, 7, 2.0, 3)).unwrap();
        let truth = truth_at(&s, 1.3, 0.1).unwrap();
        let scale = 0.2f64.powf(-0.5);
        let model = FactorModel::new(s.true_loadings.clone(), s.true_factors.clone()).unwrap();
        assert!(msre(&model, scale, &truth).unwrap() < 1e-28);
        let s4 = generate(&DgpSpec::new(4, 6, 7, 2.0, 3)).unwrap();
        let t4 = truth_at(&s4, 1.3, 0.1).unwrap();
        let q = student_t_upper_quantile(2.0, 0.1).unwrap();
        let m4 = FactorModel::new(s4.true_loadings.clone(), s4.true_factors.clone()).unwrap();
        assert!(msre_eot(s4.true_threshold.as_ref().unwrap(), Some(&m4), q, &t4).unwrap() < 1e-26);
    }

    #[test]
    fn hand_instance() {
        let truth = TailTruth { level: 0.1, quantiles: Array2::from_elem((2, 2), 2.0), reference: 2.0 };
        let ones = FactorModel::new(Array2::from_elem((1, 2), 1.0), Array2::from_elem((1, 2), 1.0)).unwrap();
        assert_eq!(msre(&ones, 1.0, &truth).unwrap(), 0.25);
        assert_eq!(msre_eot(&Array2::zeros((2, 2)), None, 1.0, &truth).unwrap(), 0.25);
        assert!(msre(&ones, 1.0, &TailTruth { quantiles: Array2::zeros((3, 2)), ..truth }).is_err());
    }

    #[test]
    fn truth_rejects_central_levels() {
        let s = generate(&DgpSpec::new(2, 4, 4, 1.0, 0)).unwrap();
        assert!(truth_at(&s, 1.0, 0.6).is_err());
        assert!(truth_at(&s, 0.0, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn zero_threshold_matches_plain_msre(seed in 0u64..1000, scale in 0.5f64..3.0) {
            let s = generate(&DgpSpec::new(1, 5, 6, 2.0, seed)).unwrap();
            let truth = truth_at(&s, 1.4, 0.05).unwrap();
            let l = s.true_loadings.mapv(|v| v * 1.1);
            let model = FactorModel::new(l, s.true_factors.clone()).unwrap();
            let a = msre(&model, scale, &truth).unwrap();
            let b = msre_eot(&Array2::zeros((5, 6)), Some(&model), scale, &truth).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn alignment_absorbs_signs(seed in 0u64..1000, flip0: bool, flip1: bool) {
            let s = generate(&DgpSpec::new(2, 8, 9, 1.0, seed)).unwrap();
            let mut l = s.true_loadings.clone();
            let mut f = s.true_factors.clone();
            for (j, flip) in [flip0, flip1].into_iter().enumerate() {
                if flip {
                    l.row_mut(j).mapv_inplace(|v| -v);
                    f.row_mut(j).mapv_inplace(|v| -v);
                }
            }
            let (signs, le, fe) = align_and_score(&s.true_factors, &f, &s.true_loadings, &l).unwrap();
            prop_assert_eq!(signs[0], if flip0 { -1.0 } else { 1.0 });
            prop_assert!(le < 1e-15 && fe < 1e-15);
        }

        #[test]
        fn loading_error_is_perturbation_norm(seed in 0u64..1000, d in prop::collection::vec(-0.1f64..0.1, 8)) {
            let s = generate(&DgpSpec::new(1, 8, 5, 2.0, seed)).unwrap();
            let delta = Array2::from_shape_vec((1, 8), d).unwrap();
            let l_hat = &s.true_loadings + &delta;
            let (_, le, fe) = align_and_score(&s.true_factors, &s.true_factors, &s.true_loadings, &l_hat).unwrap();
            let want = delta.iter().map(|x| x * x).sum::<f64>().sqrt() / 8f64.sqrt();
            prop_assert!((le - want).abs() < 1e-14);
            prop_assert_eq!(fe, 0.0);
        }
    }
}
