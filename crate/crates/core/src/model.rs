//! Factor models and their identification gauge.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::scalar::Real;

/// Loadings `L` (r x N) and factors `F` (r x T); the fitted surface at
/// `(i, t)` is `l_i^T f_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Clone", deserialize = "T: Deserialize<'de>"))]
pub struct FactorModel<T> {
    #[serde(with = "crate::io::matrix")]
    pub loadings: Array2<T>,
    #[serde(with = "crate::io::matrix")]
    pub factors: Array2<T>,
}

impl<T: Real> FactorModel<T> {
    pub fn new(loadings: Array2<T>, factors: Array2<T>) -> Result<Self> {
        if loadings.nrows() != factors.nrows() || loadings.nrows() == 0 {
            return Err(Error::arg(format!(
                "loadings ({}x{}) and factors ({}x{}) need the same positive row count",
                loadings.nrows(),
                loadings.ncols(),
                factors.nrows(),
                factors.ncols()
            )));
        }
        Ok(Self { loadings, factors })
    }

    pub fn r(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn n_units(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn n_times(&self) -> usize {
        self.factors.ncols()
    }

    /// `l_i^T f_t`.
    pub fn cell(&self, i: usize, t: usize) -> T {
        (0..self.r()).map(|j| self.loadings[[j, i]] * self.factors[[j, t]]).sum()
    }

    /// The N x T surface `L^T F`.
    pub fn surface(&self) -> Array2<T> {
        self.loadings.t().dot(&self.factors)
    }
}

/// Rotates `(L, F)` so that `F F^T / T = I` and `L L^T / N` is diagonal with
/// nonincreasing entries, keeping every product `l_i^T f_t`. Each factor row
/// is signed so that its first nonzero entry is positive; the returned vector
/// holds those signs.
pub fn normalize_identification<T: Real>(model: &FactorModel<T>) -> Result<(FactorModel<T>, Array1<T>)> {
    let r = model.r();
    let n = T::count(model.n_units());
    let t_len = T::count(model.n_times());
    let f = &model.factors;
    let l = &model.loadings;

    let sigma_f = f.dot(&f.t()) / t_len;
    let (eval, evec) = symmetric_eigen(&sigma_f);
    let top = eval[0].max(T::zero());
    if !(eval[r - 1] > T::epsilon() * T::lit(1e3) * top) {
        return Err(Error::Rank(format!(
            "factor second-moment matrix is singular (eigenvalues {} .. {}); reduce r",
            eval[0],
            eval[r - 1]
        )));
    }
    let sqrt = Array2::from_diag(&eval.mapv(|v| v.sqrt()));
    let inv_sqrt = Array2::from_diag(&eval.mapv(|v| T::one() / v.sqrt()));
    let root = evec.dot(&sqrt).dot(&evec.t());
    let inv_root = evec.dot(&inv_sqrt).dot(&evec.t());
    let f1 = inv_root.dot(f);
    let l1 = root.dot(l);

    let sigma_l = l1.dot(&l1.t()) / n;
    let (_, q) = symmetric_eigen(&sigma_l);
    let mut f2 = q.t().dot(&f1);
    let mut l2 = q.t().dot(&l1);

    let mut signs = Array1::from_elem(r, T::one());
    for j in 0..r {
        let row = f2.row(j);
        let scale = row.iter().fold(T::zero(), |a, v| a.max(v.abs()));
        let tiny = scale * T::epsilon() * T::lit(16.0);
        if let Some(first) = row.iter().find(|v| v.abs() > tiny) {
            if *first < T::zero() {
                signs[j] = -T::one();
            }
        }
    }
    for (j, s) in signs.iter().enumerate() {
        if *s < T::zero() {
            f2.row_mut(j).mapv_inplace(|v| -v);
            l2.row_mut(j).mapv_inplace(|v| -v);
        }
    }
    Ok((FactorModel { loadings: l2, factors: f2 }, signs))
}

/// Largest absolute entry of `F F^T / T - I` and largest off-diagonal
/// entry of `L L^T / N`.
pub fn identification_residuals<T: Real>(model: &FactorModel<T>) -> (T, T) {
    let r = model.r();
    let ff = model.factors.dot(&model.factors.t()) / T::count(model.n_times());
    let ll = model.loadings.dot(&model.loadings.t()) / T::count(model.n_units());
    let mut f_err = T::zero();
    let mut l_err = T::zero();
    for a in 0..r {
        for b in 0..r {
            let target = if a == b { T::one() } else { T::zero() };
            f_err = f_err.max((ff[[a, b]] - target).abs());
            if a != b {
                l_err = l_err.max(ll[[a, b]].abs());
            }
        }
    }
    (f_err, l_err)
}

/// Appends a zero loading row and the given factor row: products unchanged.
pub(crate) fn pad_factor<T: Real>(model: &FactorModel<T>, new_row: Array1<T>) -> FactorModel<T> {
    let mut loadings = model.loadings.clone();
    loadings.push(Axis(0), Array1::zeros(model.n_units()).view()).expect("matching width");
    let mut factors = model.factors.clone();
    factors.push(Axis(0), new_row.view()).expect("matching width");
    FactorModel { loadings, factors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    fn random_model(r: usize, n: usize, t: usize, seed: u64) -> FactorModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = Array2::from_shape_fn((r, n), |_| rng.random_range(-1.0..2.0));
        let f = Array2::from_shape_fn((r, t), |_| rng.random_range(-1.0..2.0));
        FactorModel::new(l, f).unwrap()
    }

    #[test]
    fn products_preserved_and_gauge_met() {
        for seed in 0..20 {
            let m = random_model(2, 15, 12, seed);
            let (norm, _) = normalize_identification(&m).unwrap();
            assert!(max_abs_diff(&m.surface(), &norm.surface()) < 1e-10);
            let (fe, le) = identification_residuals(&norm);
            assert!(fe < 1e-8 && le < 1e-8, "seed {seed}: {fe} {le}");
            let ll = norm.loadings.dot(&norm.loadings.t()) / 15.0;
            assert!(ll[[0, 0]] >= ll[[1, 1]]);
            for j in 0..2 {
                let first = norm.factors.row(j).iter().copied().find(|v| v.abs() > 1e-12).unwrap();
                assert!(first > 0.0);
            }
        }
    }

    #[test]
    fn idempotent_up_to_sign() {
        let m = random_model(3, 20, 25, 99);
        let (once, _) = normalize_identification(&m).unwrap();
        let (twice, signs) = normalize_identification(&once).unwrap();
        assert!(signs.iter().all(|s| *s == 1.0));
        assert!(max_abs_diff(&once.factors, &twice.factors) < 1e-9);
        assert!(max_abs_diff(&once.surface(), &twice.surface()) < 1e-10);
    }

    #[test]
    fn scalar_rescaling() {
        let m = FactorModel::new(Array2::from_elem((1, 4), 2.0f64), Array2::from_elem((1, 5), -3.0)).unwrap();
        let (norm, signs) = normalize_identification(&m).unwrap();
        assert_eq!(signs[0], -1.0);
        assert!(norm.factors.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(norm.surface().iter().all(|v| (v + 6.0).abs() < 1e-12));
    }

    #[test]
    fn rank_deficient_factors() {
        let f = Array2::from_shape_fn((2, 6), |(_, t)| t as f64 + 1.0);
        let m = FactorModel::new(Array2::from_elem((2, 3), 1.0), f).unwrap();
        assert!(matches!(normalize_identification(&m), Err(Error::Rank(_))));
    }

    #[test]
    fn padding_keeps_products() {
        let m = random_model(1, 5, 6, 3);
        let p = pad_factor(&m, Array1::from_elem(6, 0.7));
        assert_eq!(p.r(), 2);
        assert!(max_abs_diff(&m.surface(), &p.surface()) == 0.0);
    }
}
