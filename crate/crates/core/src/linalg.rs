//! Small dense linear algebra: symmetric eigen-decomposition (cyclic Jacobi),
//! Gram-Schmidt and truncated SVD by subspace iteration.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Eigen-decomposition of a symmetric matrix. Eigenvalues are returned in
/// decreasing order; eigenvectors are the matching columns.
pub fn symmetric_eigen<T: Real>(a: &Array2<T>) -> (Array1<T>, Array2<T>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigen needs a square matrix");
    let mut m = a.clone();
    let mut v = Array2::<T>::eye(n);
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut scale = T::zero();
        for i in 0..n {
            scale += m[[i, i]] * m[[i, i]];
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off <= eps * eps * scale || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap_or(std::cmp::Ordering::Equal));
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let vectors = v.select(Axis(1), &order);
    (values, vectors)
}

/// Orthonormalises the columns in place (modified Gram-Schmidt). Returns the
/// number of columns that were numerically independent; dependent columns
/// are zeroed.
pub fn orthonormalize_columns<T: Real>(a: &mut Array2<T>) -> usize {
    let cols = a.ncols();
    let mut rank = 0;
    let tiny = T::epsilon().sqrt();
    for j in 0..cols {
        let norm0 = a.column(j).dot(&a.column(j)).sqrt();
        for i in 0..j {
            let proj = a.column(i).dot(&a.column(j));
            let ci = a.column(i).to_owned();
            a.column_mut(j).scaled_add(-proj, &ci);
        }
        let norm = a.column(j).dot(&a.column(j)).sqrt();
        if norm > tiny * (norm0 + T::min_positive_value()) && norm > T::zero() {
            a.column_mut(j).mapv_inplace(|x| x / norm);
            rank += 1;
        } else {
            a.column_mut(j).fill(T::zero());
        }
    }
    rank
}

/// Truncated SVD `x ≈ U diag(s) V^T` with `r` leading triplets, computed by
/// block subspace iteration with Rayleigh-Ritz. `U` is `n x r`, `V` is `t x r`.
pub fn truncated_svd<T: Real>(x: &Array2<T>, r: usize) -> Result<(Array2<T>, Array1<T>, Array2<T>)> {
    let (n, t) = x.dim();
    if r == 0 || r > n.min(t) {
        return Err(Error::arg(format!("cannot extract {r} singular triplets from a {n}x{t} matrix")));
    }
    // Oversampled block; deterministic start.
    let b = (r + 2).min(n.min(t));
    let mut v = Array2::<T>::from_shape_fn((t, b), |(i, j)| {
        let h = ((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((j as u64 + 7) << 32)) % 10_007;
        T::lit(h as f64 / 10_007.0 - 0.5) + if i % b == j { T::one() } else { T::zero() }
    });
    orthonormalize_columns(&mut v);
    let xt = x.t();
    let mut prev = Array1::<T>::zeros(b);
    for _ in 0..1000 {
        let xv = x.dot(&v);
        let mut w = xt.dot(&xv);
        orthonormalize_columns(&mut w);
        // Rayleigh-Ritz on the block.
        let xw = x.dot(&w);
        let gram = xw.t().dot(&xw);
        let (vals, vecs) = symmetric_eigen(&gram);
        v = w.dot(&vecs);
        let delta = vals
            .iter()
            .zip(prev.iter())
            .take(r)
            .map(|(a, b)| (*a - *b).abs() / (a.abs() + T::min_positive_value()))
            .fold(T::zero(), T::max);
        prev = vals;
        if delta < T::epsilon() * T::lit(16.0) {
            break;
        }
    }
    let v = v.slice(ndarray::s![.., 0..r]).to_owned();
    let xv = x.dot(&v);
    let mut s = Array1::<T>::zeros(r);
    let mut u = Array2::<T>::zeros((n, r));
    for j in 0..r {
        let col = xv.column(j);
        let norm = col.dot(&col).sqrt();
        s[j] = norm;
        if norm > T::zero() {
            u.column_mut(j).assign(&col.mapv(|c| c / norm));
        }
    }
    Ok((u, s, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn jacobi_reconstructs() {
        let a: Array2<f64> = array![[4.0, 1.0, 0.5], [1.0, 3.0, -0.2], [0.5, -0.2, 1.0]];
        let (vals, vecs) = symmetric_eigen(&a);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        let recon = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let id = vecs.t().dot(&vecs);
        for ((i, j), x) in id.indexed_iter() {
            assert!((x - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_of_rank_two() {
        let u: Array2<f64> = array![[1.0, 0.0], [1.0, 1.0], [0.0, 2.0], [3.0, 1.0]];
        let v = array![[2.0, 1.0], [0.5, -1.0], [1.0, 1.0]];
        let x = u.dot(&v.t());
        let (uu, s, vv) = truncated_svd(&x, 2).unwrap();
        let recon = uu.dot(&Array2::from_diag(&s)).dot(&vv.t());
        for (a, b) in recon.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(s[0] >= s[1]);
    }

    #[test]
    fn gram_schmidt_detects_dependence() {
        let mut a = array![[1.0, 2.0, 0.0], [1.0, 2.0, 1.0], [0.0, 0.0, 1.0]];
        assert_eq!(orthonormalize_columns(&mut a), 2);
    }
}
