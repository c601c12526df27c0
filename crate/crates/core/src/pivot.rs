//! Pivot moves that escape stalls of the alternating solver.
//!
//! At a cell `(i, t)` the move `l_i <- l_i / s`, `f_t <- f_t * s` keeps
//! `l_i^T f_t` and rescales the rest of row `i` by `1/s` and of column `t` by
//! `s`. Neither block update can make this move, so the alternation can stop
//! where it still pays off. Between breakpoints the objective along the move
//! is `c0 + c1 s + c2 / s`, so the best `s` is found exactly.

use ndarray::Array2;

use crate::model::FactorModel;
use crate::panel::rho;
use crate::qr::FitBounds;
use crate::scalar::Real;

/// A fitted value that moves to `v * s`, or to `v / s` when `inverse`.
#[derive(Debug, Clone, Copy)]
struct Term<T> {
    z: T,
    v: T,
    inverse: bool,
}

impl<T: Real> Term<T> {
    fn fitted(&self, s: T) -> T {
        if self.inverse {
            self.v / s
        } else {
            self.v * s
        }
    }

    fn residual(&self, s: T) -> T {
        self.z - self.fitted(s)
    }

    /// The scale at which the residual changes sign, if any.
    fn breakpoint(&self) -> Option<T> {
        let s = if self.inverse { self.v / self.z } else { self.z / self.v };
        (s > T::zero() && s.is_finite()).then_some(s)
    }

    /// Interval of `s > 0` keeping the fitted value inside the bounds.
    fn interval(&self, bounds: FitBounds<T>) -> (T, T) {
        // Bounds on `x` in `v * x`, with `x = s` or `x = 1 / s`.
        let (mut lo, mut hi) = (T::zero(), T::infinity());
        let (lb, ub) = (bounds.lower, bounds.upper);
        if self.v > T::zero() {
            lo = lo.max(lb / self.v);
            hi = hi.min(ub / self.v);
        } else if self.v < T::zero() {
            lo = lo.max(ub / self.v);
            hi = hi.min(lb / self.v);
        } else if lb > T::zero() || ub < T::zero() {
            return (T::one(), T::zero());
        }
        if self.inverse {
            (T::one() / hi, T::one() / lo)
        } else {
            (lo, hi)
        }
    }
}

fn weight<T: Real>(residual: T, tau: T) -> T {
    if residual > T::zero() {
        T::one() - tau
    } else {
        -tau
    }
}

fn direct_loss<T: Real>(terms: &[Term<T>], s: T, tau: T) -> T {
    terms.iter().map(|term| rho(term.residual(s), tau)).sum()
}

/// Best scale for the terms and its gain over `s = 1`, if it improves.
fn best_scale<T: Real>(terms: &[Term<T>], tau: T, bounds: FitBounds<T>) -> Option<(T, T)> {
    let (mut lo, mut hi) = (T::zero(), T::infinity());
    for term in terms {
        let (a, b) = term.interval(bounds);
        lo = lo.max(a);
        hi = hi.min(b);
    }
    if !(lo <= hi) {
        return None;
    }
    let mut breaks: Vec<(T, usize)> =
        terms.iter().enumerate().filter_map(|(j, term)| term.breakpoint().map(|s| (s, j))).filter(|(s, _)| *s > lo && *s < hi).collect();
    breaks.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite breakpoints"));

    let mut edges = vec![lo];
    for (s, _) in &breaks {
        if *s > *edges.last().expect("non-empty") {
            edges.push(*s);
        }
    }
    edges.push(hi);
    let two = T::lit(2.0);
    let probe = |a: T, b: T| -> T {
        match (a > T::zero(), b.is_finite()) {
            (_, true) if a < b => (a + b) / two,
            (true, false) => a * two,
            (false, false) => T::one(),
            _ => a,
        }
    };

    // Coefficients of c0 + c1 s + c2 / s on the first segment.
    let first = probe(edges[0], edges[1]);
    let mut w: Vec<T> = terms.iter().map(|term| weight(term.residual(first), tau)).collect();
    let (mut c1, mut c2) = (T::zero(), T::zero());
    for (term, wj) in terms.iter().zip(&w) {
        if term.inverse {
            c2 -= *wj * term.v;
        } else {
            c1 -= *wj * term.v;
        }
    }
    let mut c0: T = terms.iter().zip(&w).map(|(term, wj)| *wj * term.z).sum();

    let mut best: Option<(T, T)> = None;
    let mut consider = |s: T, c0: T, c1: T, c2: T| {
        if s > T::zero() && s.is_finite() && s >= lo && s <= hi {
            let h = c0 + c1 * s + c2 / s;
            if best.is_none_or(|b| h < b.1) {
                best = Some((s, h));
            }
        }
    };
    let mut next = 0;
    for seg in 0..edges.len() - 1 {
        let (a, b) = (edges[seg], edges[seg + 1]);
        if seg > 0 {
            // Terms whose residual changes sign at `a`.
            let inside = probe(a, b);
            while next < breaks.len() && breaks[next].0 <= a {
                let j = breaks[next].1;
                let term = terms[j];
                let new_w = weight(term.residual(inside), tau);
                let dw = new_w - w[j];
                c0 += dw * term.z;
                if term.inverse {
                    c2 -= dw * term.v;
                } else {
                    c1 -= dw * term.v;
                }
                w[j] = new_w;
                next += 1;
            }
        }
        consider(a, c0, c1, c2);
        consider(b, c0, c1, c2);
        if c1 > T::zero() && c2 > T::zero() {
            let s = (c2 / c1).sqrt();
            if s > a && s < b {
                consider(s, c0, c1, c2);
            }
        }
    }

    let (s, _) = best?;
    let here = direct_loss(terms, T::one(), tau);
    let there = direct_loss(terms, s, tau);
    let tol = T::epsilon() * T::lit(64.0) * (T::one() + here.abs());
    (there < here - tol).then_some((s, here - there))
}

/// Scales the rows in `rows` by `1/s` and the columns in `cols` by `s`
/// when some `s` improves the objective; returns the gain.
#[allow(clippy::too_many_arguments)]
fn try_move<T: Real>(
    z: &Array2<T>,
    p: &mut Array2<T>,
    model: &mut FactorModel<T>,
    tau: T,
    bounds: FitBounds<T>,
    rows: &[usize],
    cols: &[usize],
    in_set: &[bool],
    terms: &mut Vec<Term<T>>,
) -> T {
    let (n, t_len) = z.dim();
    terms.clear();
    for &i in rows {
        terms.extend((0..t_len).filter(|&t| !in_set[n + t]).map(|t| Term { z: z[[i, t]], v: p[[i, t]], inverse: true }));
    }
    for &t in cols {
        terms.extend((0..n).filter(|&i| !in_set[i]).map(|i| Term { z: z[[i, t]], v: p[[i, t]], inverse: false }));
    }
    let Some((s, g)) = best_scale(terms, tau, bounds) else {
        return T::zero();
    };
    for &i in rows {
        model.loadings.column_mut(i).mapv_inplace(|v| v / s);
        for t in (0..t_len).filter(|&t| !in_set[n + t]) {
            p[[i, t]] = p[[i, t]] / s;
        }
    }
    for &t in cols {
        model.factors.column_mut(t).mapv_inplace(|v| v * s);
        for i in (0..n).filter(|&i| !in_set[i]) {
            p[[i, t]] = p[[i, t]] * s;
        }
    }
    g
}

/// Node sets of the graph on rows `0..n` and columns `n..` whose edges are
/// the tight cells: every connected component, and for every bridge the side
/// it separates.
fn candidate_sets(nodes: usize, adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut sets = Vec::new();
    let mut tin = vec![usize::MAX; nodes];
    let mut low = vec![0; nodes];
    let mut order = Vec::with_capacity(nodes);
    let mut timer = 0;
    for root in 0..nodes {
        if tin[root] != usize::MAX || adj[root].is_empty() {
            continue;
        }
        let first = order.len();
        // Iterative DFS: (node, parent, next neighbour index).
        let mut stack = vec![(root, usize::MAX, 0usize)];
        tin[root] = timer;
        low[root] = timer;
        timer += 1;
        order.push(root);
        let mut subtree_end = vec![];
        while let Some(&mut (v, parent, ref mut next)) = stack.last_mut() {
            if *next < adj[v].len() {
                let u = adj[v][*next];
                *next += 1;
                if u == parent {
                    continue;
                }
                if tin[u] == usize::MAX {
                    tin[u] = timer;
                    low[u] = timer;
                    timer += 1;
                    order.push(u);
                    stack.push((u, v, 0));
                } else {
                    low[v] = low[v].min(tin[u]);
                }
            } else {
                stack.pop();
                if let Some(&(w, _, _)) = stack.last() {
                    low[w] = low[w].min(low[v]);
                    if low[v] > tin[w] {
                        // Bridge w-v: the subtree of v is one side.
                        subtree_end.push((v, timer));
                    }
                }
            }
        }
        let component: Vec<usize> = order[first..].to_vec();
        for (v, end) in subtree_end {
            let side: Vec<usize> = component.iter().copied().filter(|u| tin[*u] >= tin[v] && tin[*u] < end).collect();
            sets.push(side);
        }
        sets.push(component);
    }
    sets
}

/// One pass of pivot moves over the cells that are interpolated or sit on a
/// bound. Returns the total decrease of the objective.
pub(crate) fn pivot_sweep<T: Real>(z: &Array2<T>, model: &mut FactorModel<T>, tau: T, bounds: FitBounds<T>) -> T {
    let (n, t_len) = z.dim();
    let mut p = model.surface();
    let tol = T::epsilon().sqrt();
    let tight = |i: usize, t: usize| {
        let (zi, pi) = (z[[i, t]], p[[i, t]]);
        (zi - pi).abs() <= tol * (T::one() + zi.abs())
            || (bounds.upper.is_finite() && (pi - bounds.upper).abs() <= tol * (T::one() + bounds.upper.abs()))
            || (bounds.lower.is_finite() && (pi - bounds.lower).abs() <= tol * (T::one() + bounds.lower.abs()))
    };
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..t_len).map(move |t| (i, t))).filter(|&(i, t)| tight(i, t)).collect();

    let nodes = n + t_len;
    let mut adj = vec![Vec::new(); nodes];
    for &(i, t) in &cells {
        adj[i].push(n + t);
        adj[n + t].push(i);
    }
    let mut sets = candidate_sets(nodes, &adj);
    // Moving every node is a gauge change, and a lone node is a block update.
    sets.retain(|s| s.len() > 1 && s.len() < nodes);
    sets.extend(cells.iter().map(|&(i, t)| vec![i, n + t]));

    let mut gain = T::zero();
    let mut terms = Vec::with_capacity(nodes);
    let mut in_set = vec![false; nodes];
    for set in sets {
        let rows: Vec<usize> = set.iter().copied().filter(|v| *v < n).collect();
        let cols: Vec<usize> = set.iter().copied().filter(|v| *v >= n).map(|v| v - n).collect();
        for &v in &set {
            in_set[v] = true;
        }
        gain += try_move(z, &mut p, model, tau, bounds, &rows, &cols, &in_set, &mut terms);
        for &v in &set {
            in_set[v] = false;
        }
    }
    gain
}
