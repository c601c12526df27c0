//! Seeded data generating processes.
//!
//! DGP1-3 draw `Y = l_i^T f_t * u_it * b_it` with Pareto innovations
//! (`u = V^(-1/lambda)`, `V` uniform) and Rademacher signs. DGP4 adds an
//! interactive location `a_i b_t`, DGP5 a covariate location `x_it^T beta_i`;
//! both use Student-t innovations with `lambda` degrees of freedom.
//!
//! Every component draws from its own ChaCha stream keyed by the seed, so
//! changing one part of a generator never shifts the random numbers of another.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::distr::OpenClosed01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};
use tailfactor_core::linalg::truncated_svd;
use tailfactor_core::{Error, PanelData, Result};

/// Autoregressive factors start at their stationary mean and run this many
/// steps before the first kept period.
pub const BURN_IN: usize = 200;

/// Lower and upper limits on `l_i^T f_t` imposed by the DGP3 program.
pub const DGP3_BOUNDS: (f64, f64) = (0.1, 5.0);

const STREAM_LOADINGS: u64 = 1;
const STREAM_FACTORS: u64 = 2;
const STREAM_INNOVATIONS: u64 = 3;
const STREAM_SIGNS: u64 = 4;
const STREAM_LOCATION_UNIT: u64 = 5;
const STREAM_LOCATION_TIME: u64 = 6;
const STREAM_COVARIATES: u64 = 7;
const STREAM_COEFFICIENTS: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub dgp: u8,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// Pareto tail index or Student-t degrees of freedom; `gamma = 1 / lambda`.
    pub lambda: f64,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(dgp: u8, n: usize, t: usize, lambda: f64, seed: u64) -> Self {
        Self { dgp, n, t, lambda, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.dgp) {
            return Err(Error::arg(format!("dgp must be one of 1..=5, got {}", self.dgp)));
        }
        if self.n < 1 || self.t < 1 {
            return Err(Error::arg(format!("N and T must be positive, got {}x{}", self.n, self.t)));
        }
        if self.dgp == 3 && (self.n < 2 || self.t < 2) {
            return Err(Error::arg(format!("dgp 3 needs N, T >= 2, got {}x{}", self.n, self.t)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::arg(format!("lambda must be positive and finite, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Number of factors in the volatility surface.
    pub fn true_r(&self) -> usize {
        match self.dgp {
            2 | 3 => 2,
            _ => 1,
        }
    }

    /// Same process, different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// One generated panel with everything needed to rebuild it and score fits.
#[derive(Debug, Clone)]
pub struct DgpSample {
    pub spec: DgpSpec,
    pub panel: PanelData<f64>,
    /// r x N.
    pub true_loadings: Array2<f64>,
    /// r x T.
    pub true_factors: Array2<f64>,
    /// Median surface of the location part (DGP4 and DGP5).
    pub true_threshold: Option<Array2<f64>>,
    /// N x T x 2 (DGP5).
    pub covariates: Option<Array3<f64>>,
    /// Unit coefficients, N x 2 (DGP5).
    pub coefficients: Option<Array2<f64>>,
    /// Pareto or Student-t draws, N x T.
    pub innovations: Array2<f64>,
    /// Rademacher signs (DGP1-3).
    pub signs: Option<Array2<f64>>,
    /// `{mean((l_i^T f_t)^lambda)}^(1/lambda)` of this sample.
    pub c_ref: f64,
}

impl DgpSample {
    /// `l_i^T f_t`, N x T.
    pub fn volatility(&self) -> Array2<f64> {
        self.true_loadings.t().dot(&self.true_factors)
    }
}

/// Independent generator for one component of one sample.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Inverse transform for the Pareto law with tail quantile `x^(1/lambda)`.
pub fn pareto_from_uniform(v: f64, lambda: f64) -> f64 {
    v.powf(-1.0 / lambda)
}

fn pareto_draws(rng: &mut ChaCha8Rng, n: usize, t: usize, lambda: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, t), || pareto_from_uniform(rng.sample(OpenClosed01), lambda))
}

fn sign_draws(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, t), || if rng.random::<bool>() { 1.0 } else { -1.0 })
}

fn beta(a: f64, b: f64) -> Beta<f64> {
    Beta::new(a, b).expect("valid beta parameters")
}

/// `f_t = phi * f_{t-1} + e_t + shift` per coordinate, started at the
/// stationary mean and burned in.
fn shifted_ar<D: Distribution<f64>>(
    rng: &mut ChaCha8Rng,
    phi: &[f64],
    shift: &[f64],
    innovation: &D,
    innovation_mean: f64,
    t_len: usize,
) -> Array2<f64> {
    let r = phi.len();
    let mut state: Vec<f64> = (0..r).map(|j| (innovation_mean + shift[j]) / (1.0 - phi[j])).collect();
    let mut out = Array2::zeros((r, t_len));
    for step in 0..(BURN_IN + t_len) {
        for j in 0..r {
            state[j] = phi[j] * state[j] + innovation.sample(rng) + shift[j];
        }
        if step >= BURN_IN {
            for j in 0..r {
                out[[j, step - BURN_IN]] = state[j];
            }
        }
    }
    out
}

fn dgp1_components(spec: &DgpSpec) -> (Array2<f64>, Array2<f64>) {
    let b11 = beta(1.0, 1.0);
    let mut rl = stream(spec.seed, STREAM_LOADINGS);
    let loadings = Array2::from_shape_simple_fn((1, spec.n), || 0.5 + b11.sample(&mut rl));
    let mut rf = stream(spec.seed, STREAM_FACTORS);
    let factors = shifted_ar(&mut rf, &[0.4], &[0.3], &b11, 0.5, spec.t);
    (loadings, factors)
}

fn dgp2_components(spec: &DgpSpec) -> (Array2<f64>, Array2<f64>) {
    let b = beta(0.5, 0.5);
    let mut rl = stream(spec.seed, STREAM_LOADINGS);
    let loadings = Array2::from_shape_simple_fn((2, spec.n), || 0.5 + b.sample(&mut rl));
    let mut rf = stream(spec.seed, STREAM_FACTORS);
    let factors = shifted_ar(&mut rf, &[0.4, 0.2], &[0.3, 0.4], &b, 0.5, spec.t);
    (loadings, factors)
}

fn dgp3_components(spec: &DgpSpec) -> Result<(Array2<f64>, Array2<f64>)> {
    let b = beta(0.5, 0.5);
    let mut rl = stream(spec.seed, STREAM_LOADINGS);
    let e_unit = Array2::from_shape_simple_fn((2, spec.n), || b.sample(&mut rl));
    let mut rf = stream(spec.seed, STREAM_FACTORS);
    let e_time = Array2::from_shape_simple_fn((2, spec.t), || b.sample(&mut rf));
    let base = e_unit.t().dot(&e_time).mapv(|x| x + 0.5);
    let (u, _, v) = truncated_svd(&base, 2)?;
    let mut vv = u.t().to_owned();
    let mut ww = v.t().to_owned();
    // The leading pair of a positive matrix can be taken positive.
    if vv.row(0).sum() < 0.0 {
        vv.row_mut(0).mapv_inplace(|x| -x);
        ww.row_mut(0).mapv_inplace(|x| -x);
    }
    let (s1, s2) = dgp3_lp(vv.view(), ww.view())?;
    let root_t = (spec.t as f64).sqrt();
    let scale = [s1, s2];
    let loadings = Array2::from_shape_fn((2, spec.n), |(j, i)| vv[[j, i]] * scale[j] / root_t);
    let factors = ww.mapv(|x| x * root_t);
    Ok((loadings, factors))
}

/// Loadings and factors of the volatility surface.
pub fn volatility_components(spec: &DgpSpec) -> Result<(Array2<f64>, Array2<f64>)> {
    spec.validate()?;
    match spec.dgp {
        2 => Ok(dgp2_components(spec)),
        3 => dgp3_components(spec),
        _ => Ok(dgp1_components(spec)),
    }
}

/// `{mean((l_i^T f_t)^lambda)}^(1/lambda)`.
pub fn power_mean(volatility: &Array2<f64>, lambda: f64) -> f64 {
    let n = volatility.len() as f64;
    (volatility.iter().map(|v| v.powf(lambda)).sum::<f64>() / n).powf(1.0 / lambda)
}

pub fn generate(spec: &DgpSpec) -> Result<DgpSample> {
    let (loadings, factors) = volatility_components(spec)?;
    let (n, t_len) = (spec.n, spec.t);
    let vol = loadings.t().dot(&factors);
    let c_ref = power_mean(&vol, spec.lambda);
    let mut threshold = None;
    let mut covariates = None;
    let mut coefficients = None;
    let mut signs = None;
    let (values, innovations) = match spec.dgp {
        1..=3 => {
            let u = pareto_draws(&mut stream(spec.seed, STREAM_INNOVATIONS), n, t_len, spec.lambda);
            let b = sign_draws(&mut stream(spec.seed, STREAM_SIGNS), n, t_len);
            let y = &vol * &u * &b;
            signs = Some(b);
            (y, u)
        }
        _ => {
            let student = StudentT::new(spec.lambda).map_err(|e| Error::arg(format!("student-t: {e}")))?;
            let mut ru = stream(spec.seed, STREAM_INNOVATIONS);
            let u = Array2::from_shape_simple_fn((n, t_len), || student.sample(&mut ru));
            let h = if spec.dgp == 4 { dgp4_location(spec) } else {
                let (x, beta_i) = dgp5_covariates(spec, &loadings, &factors);
                let h = Array2::from_shape_fn((n, t_len), |(i, t)| x[[i, t, 0]] * beta_i[[i, 0]] + x[[i, t, 1]] * beta_i[[i, 1]]);
                covariates = Some(x);
                coefficients = Some(beta_i);
                h
            };
            let y = &h + &(&vol * &u);
            threshold = Some(h);
            (y, u)
        }
    };
    Ok(DgpSample {
        spec: *spec,
        panel: PanelData::from_values(values)?,
        true_loadings: loadings,
        true_factors: factors,
        true_threshold: threshold,
        covariates,
        coefficients,
        innovations,
        signs,
        c_ref,
    })
}

/// `a_i b_t` with `a_i ~ N(1,1)` and `b_t = 0.6 b_{t-1} + eta_t`, `eta_t ~ N(1,1)`.
fn dgp4_location(spec: &DgpSpec) -> Array2<f64> {
    let normal = Normal::new(1.0, 1.0).expect("valid normal");
    let mut ra = stream(spec.seed, STREAM_LOCATION_UNIT);
    let a = Array1::from_shape_simple_fn(spec.n, || normal.sample(&mut ra));
    let mut rb = stream(spec.seed, STREAM_LOCATION_TIME);
    let b = shifted_ar(&mut rb, &[0.6], &[0.0], &normal, 1.0, spec.t);
    Array2::from_shape_fn((spec.n, spec.t), |(i, t)| a[i] * b[[0, t]])
}

/// `x_it = (eta1 + 0.2 f_t^2 + 0.8 l_i^2, eta2)` and `beta_i = -0.5 + Beta(1,1)`.
fn dgp5_covariates(spec: &DgpSpec, loadings: &Array2<f64>, factors: &Array2<f64>) -> (Array3<f64>, Array2<f64>) {
    let normal = Normal::new(1.0, 1.0).expect("valid normal");
    let mut rx = stream(spec.seed, STREAM_COVARIATES);
    let mut x = Array3::zeros((spec.n, spec.t, 2));
    for i in 0..spec.n {
        for t in 0..spec.t {
            let (e1, e2) = (normal.sample(&mut rx), normal.sample(&mut rx));
            x[[i, t, 0]] = e1 + 0.2 * factors[[0, t]].powi(2) + 0.8 * loadings[[0, i]].powi(2);
            x[[i, t, 1]] = e2;
        }
    }
    let b11 = beta(1.0, 1.0);
    let mut rc = stream(spec.seed, STREAM_COEFFICIENTS);
    let coefs = Array2::from_shape_simple_fn((spec.n, 2), || b11.sample(&mut rc) - 0.5);
    (x, coefs)
}

/// A panel of symmetrized Pareto draws with unit volatility everywhere: the
/// common-quantile hypothesis holds exactly.
pub fn symmetric_pareto_panel(n: usize, t: usize, lambda: f64, seed: u64) -> Result<PanelData<f64>> {
    if !(lambda > 0.0) || n == 0 || t == 0 {
        return Err(Error::arg("need positive lambda and a non-empty shape"));
    }
    let u = pareto_draws(&mut stream(seed, STREAM_INNOVATIONS), n, t, lambda);
    let b = sign_draws(&mut stream(seed, STREAM_SIGNS), n, t);
    PanelData::from_values(&u * &b)
}

/// Feasible interval for `s1` given `s2`, as (lower, upper, lower_id, upper_id).
/// Ids name the binding constraint: `usize::MAX` is `s1 >= s2`, `2c` the
/// lower and `2c + 1` the upper bound of cell `c`.
fn s1_interval(a: &[f64], b: &[f64], s2: f64) -> (f64, f64, usize, usize) {
    let (lo_b, hi_b) = DGP3_BOUNDS;
    let (mut lo, mut hi) = (s2, f64::INFINITY);
    let (mut lo_id, mut hi_id) = (usize::MAX, usize::MAX);
    for c in 0..a.len() {
        let rest = s2 * b[c];
        if a[c] > 0.0 {
            let (l, h) = ((lo_b - rest) / a[c], (hi_b - rest) / a[c]);
            if l > lo {
                lo = l;
                lo_id = 2 * c;
            }
            if h < hi {
                hi = h;
                hi_id = 2 * c + 1;
            }
        } else if a[c] < 0.0 {
            let (l, h) = ((hi_b - rest) / a[c], (lo_b - rest) / a[c]);
            if l > lo {
                lo = l;
                lo_id = 2 * c + 1;
            }
            if h < hi {
                hi = h;
                hi_id = 2 * c;
            }
        } else if rest < lo_b || rest > hi_b {
            return (f64::INFINITY, f64::NEG_INFINITY, 2 * c, 2 * c + 1);
        }
    }
    (lo, hi, lo_id, hi_id)
}

fn describe(id: usize, n_times: usize) -> String {
    if id == usize::MAX {
        "s1 >= s2".to_string()
    } else {
        let c = id / 2;
        let side = if id % 2 == 0 { "lower" } else { "upper" };
        format!("{side} bound at cell ({}, {})", c / n_times, c % n_times)
    }
}

/// `max s2` subject to `s1 >= s2 >= 0` and
/// `0.1 <= s1 v1_i w1_t + s2 v2_i w2_t <= 5` for all cells; ties go to the
/// smallest `s1`.
///
/// The slack `g(s2) = upper(s2) - lower(s2)` of the feasible `s1` interval
/// is concave, so its maximizer is found by golden section and the largest
/// feasible `s2` by bisection to full precision.
pub fn dgp3_lp(v: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
    if v.nrows() != 2 || w.nrows() != 2 {
        return Err(Error::arg(format!("dgp3_lp needs 2 x N and 2 x T inputs, got {}x{} and {}x{}", v.nrows(), v.ncols(), w.nrows(), w.ncols())));
    }
    let (n, t_len) = (v.ncols(), w.ncols());
    let mut a = Vec::with_capacity(n * t_len);
    let mut b = Vec::with_capacity(n * t_len);
    for i in 0..n {
        for t in 0..t_len {
            a.push(v[[0, i]] * w[[0, t]]);
            b.push(v[[1, i]] * w[[1, t]]);
        }
    }
    let slack = |s2: f64| {
        let (lo, hi, _, _) = s1_interval(&a, &b, s2);
        hi - lo
    };

    // Bracket the peak of the concave slack.
    let mut top = 1.0;
    while top < 1e15 && slack(2.0 * top) >= slack(top) {
        top *= 2.0;
    }
    let (mut x0, mut x1) = (0.0, 2.0 * top);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let m1 = x1 - ratio * (x1 - x0);
        let m2 = x0 + ratio * (x1 - x0);
        if slack(m1) < slack(m2) {
            x0 = m1;
        } else {
            x1 = m2;
        }
    }
    let mut best = if slack(0.0) >= slack(x0) { 0.0 } else { x0 };
    if !(slack(best) >= 0.0) {
        let (_, _, lo_id, hi_id) = s1_interval(&a, &b, best);
        return Err(Error::Infeasible(format!(
            "dgp3 program has no feasible point; binding constraints: {} and {}",
            describe(lo_id, t_len),
            describe(hi_id, t_len)
        )));
    }
    // Largest feasible s2.
    let mut far = best.max(1.0);
    while slack(far) >= 0.0 {
        best = far;
        far *= 2.0;
        if far > 1e300 {
            return Err(Error::Infeasible("dgp3 program is unbounded".to_string()));
        }
    }
    for _ in 0..2000 {
        let mid = 0.5 * (best + far);
        if mid <= best || mid >= far {
            break;
        }
        if slack(mid) >= 0.0 {
            best = mid;
        } else {
            far = mid;
        }
    }
    let (lo, _, _, _) = s1_interval(&a, &b, best);
    Ok((lo, best))
}

/// Monte Carlo estimate of the reference constant `c`: the mean over `reps`
/// independent surfaces of their power mean, with its standard error.
pub fn reference_constant(spec: &DgpSpec, reps: usize) -> Result<(f64, f64)> {
    spec.validate()?;
    if reps < 1 {
        return Err(Error::arg("reference constant needs reps >= 1"));
    }
    let mut values = Vec::with_capacity(reps);
    for rep in 0..reps {
        let s = spec.with_seed(replication_seed(spec.seed, rep as u64));
        let (l, f) = volatility_components(&s)?;
        values.push(power_mean(&l.t().dot(&f), spec.lambda));
    }
    let (mean, se) = mean_and_se(&values);
    Ok((mean, se))
}

/// Mean and standard error of the mean (zero for a single value).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Seed of replication `rep`: a SplitMix64 mix of the base seed and the index,
/// so a longer run repeats every replication of a shorter one.
pub fn replication_seed(seed: u64, rep: u64) -> u64 {
    let mut z = seed ^ rep.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Factor strengths of the surface relative to `c`: the eigenvalues of
/// `(L L^T / N)(F F^T / T)` divided by `c^2`, in decreasing order.
pub fn factor_strengths(loadings: &Array2<f64>, factors: &Array2<f64>, c: f64) -> Vec<f64> {
    let n = loadings.ncols() as f64;
    let t = factors.ncols() as f64;
    let ll = loadings.dot(&loadings.t()) / n;
    let ff = factors.dot(&factors.t()) / t;
    // Symmetric form: ff^(1/2) ll ff^(1/2) has the same eigenvalues.
    let (fe, fv) = tailfactor_core::linalg::symmetric_eigen(&ff);
    let root = fv.dot(&Array2::from_diag(&fe.mapv(|x| x.max(0.0).sqrt()))).dot(&fv.t());
    let (ev, _) = tailfactor_core::linalg::symmetric_eigen(&root.dot(&ll).dot(&root));
    ev.iter().map(|x| x / (c * c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    #[test]
    fn pareto_inverse_transform() {
        assert_eq!(pareto_from_uniform(0.25, 1.0), 4.0);
        assert_eq!(pareto_from_uniform(1.0, 3.0), 1.0);
        assert!((pareto_from_uniform(0.25, 2.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn dgp1_ranges_and_positivity() {
        let s = generate(&DgpSpec::new(1, 40, 30, 2.0, 5)).unwrap();
        assert!(s.true_loadings.iter().all(|l| (0.5..=1.5).contains(l)));
        assert!(s.volatility().iter().all(|v| *v > 0.0));
        // Stationary AR(1) with Beta(1,1) innovations stays in [0.5, 4/3 + ...].
        assert!(s.true_factors.iter().all(|f| *f >= 0.5 && *f <= 1.3 / 0.6));
        assert_eq!(s.spec.true_r(), 1);
    }

    #[test]
    fn dgp2_positive_two_factor() {
        let s = generate(&DgpSpec::new(2, 30, 40, 1.0, 9)).unwrap();
        assert_eq!(s.true_loadings.dim(), (2, 30));
        assert!(s.volatility().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn values_rebuild_from_components() {
        for dgp in 1..=5u8 {
            let s = generate(&DgpSpec::new(dgp, 12, 9, 2.5, 77)).unwrap();
            let vol = s.volatility();
            let y = s.panel.values();
            for i in 0..12 {
                for t in 0..9 {
                    let scale = vol[[i, t]] * s.innovations[[i, t]];
                    let want = match dgp {
                        1..=3 => scale * s.signs.as_ref().unwrap()[[i, t]],
                        _ => s.true_threshold.as_ref().unwrap()[[i, t]] + scale,
                    };
                    assert_eq!(y[[i, t]], want, "dgp {dgp} cell ({i},{t})");
                }
            }
            if dgp == 5 {
                let x = s.covariates.as_ref().unwrap();
                let b = s.coefficients.as_ref().unwrap();
                let h = s.true_threshold.as_ref().unwrap();
                assert!((h[[3, 4]] - x[[3, 4, 0]] * b[[3, 0]] - x[[3, 4, 1]] * b[[3, 1]]).abs() < 1e-15);
                assert!(b.iter().all(|v| (-0.5..=0.5).contains(v)));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DgpSpec::new(3, 15, 20, 3.0, 123);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.panel, b.panel);
        assert_eq!(a.true_loadings, b.true_loadings);
        let c = generate(&spec.with_seed(124)).unwrap();
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn streams_are_independent() {
        // The loadings of DGP1 and DGP4 share a stream and so coincide.
        let a = generate(&DgpSpec::new(1, 10, 10, 2.0, 4)).unwrap();
        let b = generate(&DgpSpec::new(4, 10, 10, 2.0, 4)).unwrap();
        assert_eq!(a.true_loadings, b.true_loadings);
        assert_eq!(a.true_factors, b.true_factors);
    }

    #[test]
    fn dgp3_respects_bounds() {
        for seed in 0..5 {
            let s = generate(&DgpSpec::new(3, 25, 30, 3.0, seed)).unwrap();
            let vol = s.volatility();
            let min = vol.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vol.iter().copied().fold(0.0, f64::max);
            assert!(min >= 0.1 - 1e-9 && max <= 5.0 + 1e-9, "seed {seed}: [{min}, {max}]");
        }
    }

    #[test]
    fn lp_single_constraint() {
        // s1 + s2 <= 5 with s1 >= s2: the optimum sits at s1 = s2 = 2.5.
        let v = array![[1.0], [1.0]];
        let w = array![[1.0], [1.0]];
        let (s1, s2) = dgp3_lp(v.view(), w.view()).unwrap();
        assert!((s1 - 2.5).abs() < 1e-12 && (s2 - 2.5).abs() < 1e-12, "{s1} {s2}");
    }

    #[test]
    fn lp_boundary_solutions() {
        // Only b = 0: s2 is limited by s1 >= s2 and s1 <= 5.
        let v = array![[1.0, 1.0], [1.0, -1.0]];
        let w = array![[1.0], [0.0]];
        let (s1, s2) = dgp3_lp(v.view(), w.view()).unwrap();
        assert!((s1 - 5.0).abs() < 1e-12 && (s2 - 5.0).abs() < 1e-12);
        // s1 + 2 s2 <= 5 and s1 - 2 s2 >= 0.1 meet at s2 = 1.225, s1 = 2.55.
        let v = array![[1.0, 1.0], [2.0, -2.0]];
        let w = array![[1.0], [1.0]];
        let (s1, s2) = dgp3_lp(v.view(), w.view()).unwrap();
        assert!((s2 - 1.225).abs() < 1e-9 && (s1 - 2.55).abs() < 1e-9, "{s1} {s2}");
        // s1 >= 0.1 and s1 + s2 <= 0.1 leave only s2 = 0.
        let v = array![[1.0, 50.0], [0.0, 50.0]];
        let w = array![[1.0], [1.0]];
        let (s1, s2) = dgp3_lp(v.view(), w.view()).unwrap();
        assert!(s2.abs() < 1e-15, "{s2}");
        assert!((s1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn lp_infeasible() {
        // Ratio of 100 between cells cannot fit inside [0.1, 5] with s2 unused.
        let v = array![[1.0, 100.0], [0.0, 0.0]];
        let w = array![[1.0], [0.0]];
        match dgp3_lp(v.view(), w.view()) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("bound at cell"), "{msg}"),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    /// Largest feasible s2 over a grid of s1 values on [0, 10], each solved
    /// exactly in s2.
    fn lp_grid_oracle(a: &[f64], b: &[f64], steps: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for g in 0..=steps {
            let s1 = 10.0 * g as f64 / steps as f64;
            let (mut lo, mut hi) = (0.0f64, s1);
            for (x, y) in a.iter().zip(b) {
                let rest = s1 * x;
                if *y > 0.0 {
                    lo = lo.max((0.1 - rest) / y);
                    hi = hi.min((5.0 - rest) / y);
                } else if *y < 0.0 {
                    lo = lo.max((5.0 - rest) / y);
                    hi = hi.min((0.1 - rest) / y);
                } else if !(0.1..=5.0).contains(&rest) {
                    hi = f64::NEG_INFINITY;
                }
            }
            if lo <= hi {
                best = best.max(hi);
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn lp_matches_grid_oracle(seed in 0u64..10_000) {
            let mut rng = stream(seed, 99);
            let v = Array2::from_shape_fn((2, 5), |(j, _)| if j == 0 { rng.random_range(1.0..2.0) } else { rng.random_range(-0.7..0.7) });
            let w = Array2::from_shape_fn((2, 5), |(j, _)| if j == 0 { rng.random_range(1.0..2.0) } else { rng.random_range(-0.7..0.7) });
            let (s1, s2) = dgp3_lp(v.view(), w.view()).unwrap();
            let mut a = vec![];
            let mut b = vec![];
            for i in 0..5 { for t in 0..5 { a.push(v[[0, i]] * w[[0, t]]); b.push(v[[1, i]] * w[[1, t]]); } }
            for (x, y) in a.iter().zip(&b) {
                let f = s1 * x + s2 * y;
                prop_assert!(f >= 0.1 - 1e-9 && f <= 5.0 + 1e-9);
            }
            prop_assert!(s1 >= s2 - 1e-12);
            let grid = lp_grid_oracle(&a, &b, 1_000_000);
            prop_assert!((s2 - grid).abs() <= 1e-4, "{s2} vs grid {grid}");
            prop_assert!(s2 >= grid - 1e-12);
        }
    }

    #[test]
    fn reference_constant_of_constant_surface() {
        let flat = Array2::from_elem((4, 5), 1.0);
        assert_eq!(power_mean(&flat, 3.0), 1.0);
        let a = Array2::from_elem((4, 5), 2.5);
        assert!((power_mean(&a, 2.0) - 2.5).abs() < 1e-15);
        assert!((power_mean(&a, 0.7) - 2.5).abs() < 1e-14);
    }

    #[test]
    fn replication_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|r| replication_seed(42, r)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(replication_seed(1, 0), replication_seed(2, 0));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&DgpSpec::new(6, 5, 5, 2.0, 0)).is_err());
        assert!(generate(&DgpSpec::new(1, 5, 5, 0.0, 0)).is_err());
        assert!(generate(&DgpSpec::new(3, 1, 5, 2.0, 0)).is_err());
        assert!(reference_constant(&DgpSpec::new(1, 5, 5, 2.0, 0), 0).is_err());
    }
}
