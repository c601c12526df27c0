//! Check-loss regression subproblems.
//!
//! Every solver here reduces to one primitive: minimising the convex,
//! piecewise-linear function `s -> sum_t rho_tau(res_t - s * slope_t)` over an
//! interval, which is a weighted quantile of the breakpoints `res_t / slope_t`
//! with weights `|slope_t|`.

use std::cmp::Ordering;

use ndarray::{Array1, ArrayView2};

use crate::error::{Error, Result};
use crate::panel::rho;
use crate::scalar::Real;

/// How one-dimensional subproblems are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineSolver {
    /// Exact weighted quantile of the breakpoints.
    Exact,
    /// Best of `n` equispaced candidates (plus the current point); falls back
    /// to `Exact` on unbounded intervals.
    Grid(usize),
}

/// Minimiser over `[lo, hi]` of `s -> sum_t rho_tau(res_t - s * slope_t)`,
/// smallest one on ties. `None` when every slope vanishes (flat objective).
pub fn line_argmin<T: Real>(res: &[T], slope: &[T], tau: T, lo: T, hi: T) -> Option<T> {
    let mut pts: Vec<(T, T)> = Vec::with_capacity(res.len());
    let mut deriv = T::zero();
    for (&r, &a) in res.iter().zip(slope) {
        if a > T::zero() {
            deriv -= a * (T::one() - tau);
            pts.push((r / a, a));
        } else if a < T::zero() {
            deriv += a * tau;
            pts.push((r / a, -a));
        }
    }
    if pts.is_empty() {
        return None;
    }
    let need = -deriv;
    let best = weighted_select(&mut pts, need);
    Some(clamp(best, lo, hi))
}

/// Smallest breakpoint `b` whose cumulative weight (over breakpoints `<= b`)
/// reaches `need`. Expected linear time (quickselect on weights).
fn weighted_select<T: Real>(pts: &mut [(T, T)], need: T) -> T {
    let cmp = |a: &(T, T), b: &(T, T)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal);
    if pts.len() <= 32 {
        pts.sort_unstable_by(cmp);
        let mut acc = T::zero();
        for &(b, w) in pts.iter() {
            acc += w;
            if acc >= need {
                return b;
            }
        }
        return pts[pts.len() - 1].0;
    }
    let mut lo = 0usize;
    let mut hi = pts.len();
    let mut need = need;
    loop {
        let len = hi - lo;
        if len <= 32 {
            let slice = &mut pts[lo..hi];
            slice.sort_unstable_by(cmp);
            let mut acc = T::zero();
            for &(b, w) in slice.iter() {
                acc += w;
                if acc >= need {
                    return b;
                }
            }
            return slice[slice.len() - 1].0;
        }
        let mid = len / 2;
        let slice = &mut pts[lo..hi];
        slice.select_nth_unstable_by(mid, cmp);
        let pivot = slice[mid].0;
        let left: T = slice[..mid].iter().map(|p| p.1).sum();
        if left >= need {
            // Answer lies among the left part, unless ties with the pivot
            // straddle the split; the left part holds values <= pivot so the
            // smallest qualifying breakpoint is still on the left.
            hi = lo + mid;
        } else if left + slice[mid].1 >= need {
            return pivot;
        } else {
            need -= left + slice[mid].1;
            lo += mid + 1;
        }
    }
}

fn clamp<T: Real>(x: T, lo: T, hi: T) -> T {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

fn line_grid<T: Real>(res: &[T], slope: &[T], tau: T, lo: T, hi: T, n: usize) -> Option<T> {
    if slope.iter().all(|a| *a == T::zero()) {
        return None;
    }
    if !lo.is_finite() || !hi.is_finite() || n < 2 {
        return line_argmin(res, slope, tau, lo, hi);
    }
    let eval = |s: T| -> T { res.iter().zip(slope).map(|(&r, &a)| rho(r - s * a, tau)).sum() };
    let mut best = (eval(T::zero()), T::zero());
    let step = (hi - lo) / T::count(n - 1);
    for i in 0..n {
        let s = lo + step * T::count(i);
        let v = eval(s);
        if v < best.0 {
            best = (v, s);
        }
    }
    Some(best.1)
}

fn line_solve<T: Real>(solver: LineSolver, res: &[T], slope: &[T], tau: T, lo: T, hi: T) -> Option<T> {
    match solver {
        LineSolver::Exact => line_argmin(res, slope, tau, lo, hi),
        LineSolver::Grid(n) => line_grid(res, slope, tau, lo, hi, n),
    }
}

/// `argmin_{l in [lower, upper]} sum_t rho_tau(z_t - l f_t)` for positive
/// weights `f`: the clamped, `f`-weighted `(1 - tau)`-quantile of `z_t / f_t`.
pub fn solve_scale_qr<T: Real>(z: &[T], f: &[T], tau: T, lower: T, upper: T) -> Result<T> {
    if z.len() != f.len() || z.is_empty() {
        return Err(Error::arg("z and f must be non-empty and of equal length"));
    }
    if let Some((t, v)) = f.iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
        return Err(Error::arg(format!("weights must be positive, f[{t}] = {v}")));
    }
    if !(lower < upper) {
        return Err(Error::arg(format!("need lower < upper, got [{lower}, {upper}]")));
    }
    check_tau(tau)?;
    Ok(line_argmin(z, f, tau, lower, upper).expect("positive weights give a non-flat objective"))
}

fn check_tau<T: Real>(tau: T) -> Result<()> {
    if tau > T::zero() && tau < T::one() {
        Ok(())
    } else {
        Err(Error::arg(format!("tail level must lie in (0,1), got {tau}")))
    }
}

/// Closed bounds `lower <= v^T x_t <= upper` on every fitted value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitBounds<T> {
    pub lower: T,
    pub upper: T,
}

impl<T: Real> FitBounds<T> {
    pub fn unbounded() -> Self {
        Self { lower: T::neg_infinity(), upper: T::infinity() }
    }

    fn slack(&self, y: T) -> T {
        let tol = T::lit(1e-9) * (T::one() + y.abs());
        if y < self.lower - tol || y > self.upper + tol {
            -T::one()
        } else {
            T::one()
        }
    }
}

/// Result of a vector check-loss regression.
#[derive(Debug, Clone)]
pub struct VectorQrOutcome<T> {
    pub coef: Array1<T>,
    pub loss: T,
    pub cycles: usize,
}

/// Settings for [`solve_vector_qr`].
#[derive(Debug, Clone, Copy)]
pub struct VectorQrOptions {
    pub max_cycles: usize,
    pub rel_tol: f64,
    pub line: LineSolver,
    /// Also search along edges of the active set (directions keeping `r - 1`
    /// kink/bound cells fixed). Coordinate moves alone stall at non-smooth
    /// points that are not minima.
    pub edge_moves: bool,
}

impl Default for VectorQrOptions {
    fn default() -> Self {
        Self { max_cycles: 50, rel_tol: 1e-9, line: LineSolver::Exact, edge_moves: true }
    }
}

/// Sum of `rho_tau(z_t - v^T x_t)`; `x` is `r x T`.
pub fn vector_loss<T: Real>(z: &[T], x: ArrayView2<'_, T>, v: &[T], tau: T) -> T {
    (0..z.len())
        .map(|t| {
            let fit: T = (0..v.len()).map(|j| v[j] * x[[j, t]]).sum();
            rho(z[t] - fit, tau)
        })
        .sum()
}

/// Approximate `argmin_v sum_t rho_tau(z_t - v^T x_t)` subject to
/// `bounds.lower <= v^T x_t <= bounds.upper`, by cyclic coordinate descent
/// (each coordinate solved exactly on its feasible interval) with optional
/// edge moves. Starts from the feasible point `init` and never increases the
/// loss.
pub fn solve_vector_qr<T: Real>(
    z: &[T],
    x: ArrayView2<'_, T>,
    tau: T,
    bounds: FitBounds<T>,
    init: &[T],
    opts: &VectorQrOptions,
) -> Result<VectorQrOutcome<T>> {
    let (r, n) = x.dim();
    if z.len() != n || init.len() != r {
        return Err(Error::arg(format!(
            "shape mismatch: z has {}, x is {r}x{n}, init has {}",
            z.len(),
            init.len()
        )));
    }
    check_tau(tau)?;
    let mut v = init.to_vec();
    let mut fitted: Vec<T> = (0..n).map(|t| (0..r).map(|j| v[j] * x[[j, t]]).sum()).collect();
    if let Some(t) = (0..n).find(|&t| bounds.slack(fitted[t]) < T::zero()) {
        return Err(Error::Infeasible(format!(
            "initial point violates bounds at observation {t}: fitted {} outside [{}, {}]",
            fitted[t], bounds.lower, bounds.upper
        )));
    }
    let mut loss: T = z.iter().zip(&fitted).map(|(&zt, &ft)| rho(zt - ft, tau)).sum();
    let mut res = vec![T::zero(); n];
    let mut slope = vec![T::zero(); n];
    let mut cycles = 0;
    let rel_tol = T::lit(opts.rel_tol);
    let mut dir = vec![T::zero(); r];

    for _ in 0..opts.max_cycles {
        cycles += 1;
        let start = loss;
        for j in 0..r {
            dir.iter_mut().for_each(|d| *d = T::zero());
            dir[j] = T::one();
            try_direction(z, x, tau, bounds, opts.line, &dir, &mut v, &mut fitted, &mut loss, &mut res, &mut slope);
        }
        if opts.edge_moves && r >= 2 {
            for d in edge_directions(z, x, bounds, &fitted, r) {
                try_direction(z, x, tau, bounds, opts.line, &d, &mut v, &mut fitted, &mut loss, &mut res, &mut slope);
            }
        }
        // One exact line solve is optimal in one dimension.
        if r == 1 || start - loss <= rel_tol * start.max(T::min_positive_value()) {
            break;
        }
    }
    Ok(VectorQrOutcome { coef: Array1::from(v), loss, cycles })
}

#[allow(clippy::too_many_arguments)]
fn try_direction<T: Real>(
    z: &[T],
    x: ArrayView2<'_, T>,
    tau: T,
    bounds: FitBounds<T>,
    line: LineSolver,
    dir: &[T],
    v: &mut [T],
    fitted: &mut [T],
    loss: &mut T,
    res: &mut [T],
    slope: &mut [T],
) {
    let r = v.len();
    let mut s_lo = T::neg_infinity();
    let mut s_hi = T::infinity();
    let (lower, upper) = (bounds.lower, bounds.upper);
    for t in 0..z.len() {
        let mut a = T::zero();
        let mut mag = T::zero();
        for j in 0..r {
            let p = dir[j] * x[[j, t]];
            a += p;
            mag += p.abs();
        }
        // Directions built to keep a cell fixed leave rounding noise here.
        if a.abs() <= T::lit(1e-10) * mag {
            a = T::zero();
        }
        slope[t] = a;
        res[t] = z[t] - fitted[t];
        if a > T::zero() {
            s_lo = s_lo.max((lower - fitted[t]) / a);
            s_hi = s_hi.min((upper - fitted[t]) / a);
        } else if a < T::zero() {
            s_lo = s_lo.max((upper - fitted[t]) / a);
            s_hi = s_hi.min((lower - fitted[t]) / a);
        }
    }
    // The current point is feasible up to rounding.
    s_lo = s_lo.min(T::zero());
    s_hi = s_hi.max(T::zero());
    let Some(s) = line_solve(line, res, slope, tau, s_lo, s_hi) else {
        return;
    };
    if s == T::zero() || !s.is_finite() {
        return;
    }
    let cand: Vec<T> = (0..r).map(|j| v[j] + s * dir[j]).collect();
    let mut cand_fit = vec![T::zero(); z.len()];
    let mut cand_loss = T::zero();
    for t in 0..z.len() {
        let f: T = (0..r).map(|j| cand[j] * x[[j, t]]).sum();
        cand_fit[t] = f;
        cand_loss += rho(z[t] - f, tau);
    }
    if cand_loss < *loss {
        v.copy_from_slice(&cand);
        fitted.copy_from_slice(&cand_fit);
        *loss = cand_loss;
    }
}

/// Directions along which `r - 1` "active" observations (zero residual or a
/// binding bound) keep their fitted values.
fn edge_directions<T: Real>(z: &[T], x: ArrayView2<'_, T>, bounds: FitBounds<T>, fitted: &[T], r: usize) -> Vec<Vec<T>> {
    // The nearest cells are used even when not exactly active: coordinate
    // moves approach a vertex only geometrically, so a strict tolerance
    // leaves the last cells just outside it.
    let mut active: Vec<(T, usize)> = (0..z.len())
        .map(|t| {
            let kink = (z[t] - fitted[t]).abs();
            let lo = (fitted[t] - bounds.lower).abs();
            let hi = (bounds.upper - fitted[t]).abs();
            (kink.min(lo).min(hi) / (T::one() + fitted[t].abs()), t)
        })
        .collect();
    active.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    active.truncate(r + 1);
    let cells: Vec<usize> = active.into_iter().map(|(_, t)| t).collect();
    // Keep as many active cells fixed as possible (at most r - 1) and move
    // within the remaining null space.
    let size = cells.len().min(r - 1);
    let mut out = Vec::new();
    if size == 0 {
        return out;
    }
    for subset in combinations(cells.len(), size) {
        let rows: Vec<Vec<T>> = subset.iter().map(|&c| (0..r).map(|j| x[[j, cells[c]]]).collect()).collect();
        out.extend(null_basis(&rows, r));
    }
    out
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in (i + 1)..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Orthonormal basis of the complement of the span of `rows`.
fn null_basis<T: Real>(rows: &[Vec<T>], r: usize) -> Vec<Vec<T>> {
    let mut basis: Vec<Vec<T>> = Vec::new();
    let push = |basis: &mut Vec<Vec<T>>, mut w: Vec<T>| -> bool {
        let n0: T = w.iter().map(|a| *a * *a).sum::<T>().sqrt();
        // Two Gram-Schmidt passes keep the result orthogonal to working precision.
        for _ in 0..2 {
            for b in basis.iter() {
                let p: T = w.iter().zip(b).map(|(a, c)| *a * *c).sum();
                w.iter_mut().zip(b).for_each(|(a, c)| *a -= p * *c);
            }
        }
        let n: T = w.iter().map(|a| *a * *a).sum::<T>().sqrt();
        if n > T::lit(1e-10) * n0.max(T::min_positive_value()) && n > T::zero() {
            basis.push(w.into_iter().map(|a| a / n).collect());
            true
        } else {
            false
        }
    };
    for row in rows {
        push(&mut basis, row.clone());
    }
    let fixed = basis.len();
    for j in 0..r {
        if basis.len() == r {
            break;
        }
        let mut e = vec![T::zero(); r];
        e[j] = T::one();
        push(&mut basis, e);
    }
    basis.split_off(fixed)
}
