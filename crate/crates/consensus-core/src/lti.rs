//! Continuous-time LTI state-space blocks used as dynamic uncertainties:
//! frequency response, H-infinity norm, time-domain co-simulation, and
//! norm-bounded random generation.

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Real parts of uncertainty-block eigenvalues must sit strictly left of
/// this margin; anything closer to the axis counts as unstable.
pub const STABILITY_MARGIN: f64 = -1e-9;

#[derive(Debug, Error)]
pub enum LtiError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("system is not strictly stable: max Re(eig A) = {max_real:e}")]
    UnstableSystem { max_real: f64 },
    #[error("resolvent (jwI - A) is singular at omega = {omega}")]
    SingularResolvent { omega: f64 },
}

/// State-space system (A, B, C, D); order zero means a static gain D.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawStateSpace", into = "RawStateSpace")]
pub struct StateSpaceSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

/// Config-file form: row-major nested arrays under keys A, B, C, D.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawStateSpace {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
}

fn rows_to_matrix(rows: &[Vec<f64>], cols_hint: usize) -> Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = if nrows == 0 { cols_hint } else { rows[0].len() };
    for r in rows {
        if r.len() != ncols {
            return Err(format!("ragged rows: expected {ncols} columns, found {}", r.len()));
        }
    }
    let mut m = DMatrix::zeros(nrows, ncols);
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

impl TryFrom<RawStateSpace> for StateSpaceSystem {
    type Error = LtiError;
    fn try_from(raw: RawStateSpace) -> Result<Self, LtiError> {
        let wrap = |field: &str, e: String| LtiError::DimensionMismatch(format!("{field}: {e}"));
        let d = rows_to_matrix(&raw.d, 0).map_err(|e| wrap("D", e))?;
        if d.nrows() == 0 || d.ncols() == 0 {
            return Err(LtiError::DimensionMismatch("D must be a non-empty matrix".into()));
        }
        let a = rows_to_matrix(&raw.a, 0).map_err(|e| wrap("A", e))?;
        let b = rows_to_matrix(&raw.b, d.ncols()).map_err(|e| wrap("B", e))?;
        let c = rows_to_matrix(&raw.c, a.nrows()).map_err(|e| wrap("C", e))?;
        StateSpaceSystem::new(a, b, c, d)
    }
}

impl From<StateSpaceSystem> for RawStateSpace {
    fn from(sys: StateSpaceSystem) -> Self {
        let to_rows = |m: &DMatrix<f64>| {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        RawStateSpace { a: to_rows(&sys.a), b: to_rows(&sys.b), c: to_rows(&sys.c), d: to_rows(&sys.d) }
    }
}

impl StateSpaceSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
    ) -> Result<Self, LtiError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LtiError::DimensionMismatch(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let (q, p) = (d.nrows(), d.ncols());
        if b.nrows() != n || b.ncols() != p {
            return Err(LtiError::DimensionMismatch(format!(
                "B must be {n}x{p}, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if c.nrows() != q || c.ncols() != n {
            return Err(LtiError::DimensionMismatch(format!(
                "C must be {q}x{n}, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        Ok(StateSpaceSystem { a, b, c, d })
    }

    /// Pure static gain: order zero, response identically D.
    pub fn static_gain(d: DMatrix<f64>) -> Self {
        let n = 0;
        StateSpaceSystem {
            a: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, d.ncols()),
            c: DMatrix::zeros(d.nrows(), n),
            d,
        }
    }

    /// SISO block from plain slices; rows of A concatenated row-major.
    pub fn siso(a: &[f64], b: &[f64], c: &[f64], d: f64) -> Self {
        let n = b.len();
        StateSpaceSystem {
            a: DMatrix::from_row_slice(n, n, a),
            b: DMatrix::from_column_slice(n, 1, b),
            c: DMatrix::from_row_slice(1, n, c),
            d: DMatrix::from_element(1, 1, d),
        }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.d.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.d.nrows()
    }

    /// Largest real part over the eigenvalues of A; -inf for order zero.
    pub fn max_real_eigenvalue(&self) -> f64 {
        if self.order() == 0 {
            return f64::NEG_INFINITY;
        }
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|e| e.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Strict stability as required of uncertainty blocks.
    pub fn is_strictly_stable(&self) -> bool {
        self.max_real_eigenvalue() < STABILITY_MARGIN
    }
}

/// Ascending frequency grid in rad/s.
#[derive(Debug, Clone)]
pub struct FrequencyGrid {
    pub omegas: Vec<f64>,
}

impl FrequencyGrid {
    /// Grid must be strictly ascending and non-negative.
    pub fn new(omegas: Vec<f64>) -> Result<Self, String> {
        if omegas.is_empty() {
            return Err("frequency grid is empty".into());
        }
        if omegas[0] < 0.0 {
            return Err("frequencies must be non-negative".into());
        }
        if omegas.windows(2).any(|w| w[0] >= w[1]) {
            return Err("frequencies must be strictly ascending".into());
        }
        Ok(FrequencyGrid { omegas })
    }

    /// `count` log-spaced points over [lo, hi], without zero.
    pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Self {
        assert!(lo > 0.0 && hi > lo && count >= 2);
        let (llo, lhi) = (lo.ln(), hi.ln());
        let omegas = (0..count)
            .map(|k| (llo + (lhi - llo) * k as f64 / (count - 1) as f64).exp())
            .collect();
        FrequencyGrid { omegas }
    }

    /// Default grid for condition evaluation: omega = 0 plus 400 log-spaced
    /// points over [1e-4, 1e4] rad/s.
    pub fn default_condition_grid() -> Self {
        let mut omegas = vec![0.0];
        omegas.extend(Self::log_spaced(1e-4, 1e4, 400).omegas);
        FrequencyGrid { omegas }
    }
}

/// Transfer matrix G(jw) = C (jwI - A)^-1 B + D via a complex LU solve.
pub fn freq_response(
    sys: &StateSpaceSystem,
    omega: f64,
) -> Result<DMatrix<Complex<f64>>, LtiError> {
    let n = sys.order();
    let d_c = sys.d.map(|v| Complex::new(v, 0.0));
    if n == 0 {
        return Ok(d_c);
    }
    let mut m = sys.a.map(|v| Complex::new(-v, 0.0));
    for i in 0..n {
        m[(i, i)] += Complex::new(0.0, omega);
    }
    let b_c = sys.b.map(|v| Complex::new(v, 0.0));
    let x = m
        .lu()
        .solve(&b_c)
        .ok_or(LtiError::SingularResolvent { omega })?;
    Ok(sys.c.map(|v| Complex::new(v, 0.0)) * x + d_c)
}

fn sigma_max(m: &DMatrix<Complex<f64>>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].norm();
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0, |acc, &s| acc.max(s))
}

/// Largest singular value of the response at one frequency.
pub fn gain_at(sys: &StateSpaceSystem, omega: f64) -> Result<f64, LtiError> {
    Ok(sigma_max(&freq_response(sys, omega)?))
}

enum AxisTest {
    Crossing,
    NoCrossing,
    Ambiguous,
}

/// Purely-imaginary-eigenvalue test: gamma is exceeded by the norm somewhere
/// on the frequency axis iff the Hamiltonian-type matrix for gamma has an
/// eigenvalue on the imaginary axis.
fn hamiltonian_axis_test(sys: &StateSpaceSystem, gamma: f64) -> AxisTest {
    let n = sys.order();
    let p = sys.inputs();
    let r = DMatrix::identity(p, p) * (gamma * gamma) - sys.d.transpose() * &sys.d;
    let Some(r_inv) = r.try_inverse() else {
        return AxisTest::Ambiguous;
    };
    let a_cl = &sys.a + &sys.b * &r_inv * sys.d.transpose() * &sys.c;
    let h12 = &sys.b * &r_inv * sys.b.transpose();
    let h21 = -(sys.c.transpose() * &sys.c)
        - sys.c.transpose() * &sys.d * &r_inv * sys.d.transpose() * &sys.c;
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&a_cl);
    h.view_mut((0, n), (n, n)).copy_from(&h12);
    h.view_mut((n, 0), (n, n)).copy_from(&h21);
    h.view_mut((n, n), (n, n)).copy_from(&(-a_cl.transpose()));

    let eigs = h.complex_eigenvalues();
    let mut ambiguous = false;
    for e in eigs.iter() {
        let scale = e.norm().max(1.0);
        let dist = e.re.abs();
        if dist <= 1e-8 * scale {
            return AxisTest::Crossing;
        }
        if dist <= 1e-7 * scale {
            ambiguous = true;
        }
    }
    if ambiguous {
        AxisTest::Ambiguous
    } else {
        AxisTest::NoCrossing
    }
}

/// Coarse frequency candidates: zero, a log sweep, and the natural
/// frequencies of A (peaks of lightly damped modes sit near |Im(eig)|).
fn candidate_frequencies(sys: &StateSpaceSystem, sweep_points: usize) -> Vec<f64> {
    let mut omegas = vec![0.0];
    omegas.extend(FrequencyGrid::log_spaced(1e-6, 1e6, sweep_points).omegas);
    if sys.order() > 0 {
        for e in sys.a.complex_eigenvalues().iter() {
            if e.im.abs() > 1e-12 {
                omegas.push(e.im.abs());
            }
            let mag = e.norm();
            if mag > 1e-12 {
                omegas.push(mag);
            }
        }
    }
    omegas.sort_by(f64::total_cmp);
    omegas.dedup();
    omegas
}

fn sweep_max(sys: &StateSpaceSystem, omegas: &[f64]) -> Result<(f64, usize), LtiError> {
    let mut best = (0.0f64, 0usize);
    for (k, &w) in omegas.iter().enumerate() {
        let g = gain_at(sys, w)?;
        if g > best.0 {
            best = (g, k);
        }
    }
    Ok(best)
}

/// Dense-sweep fallback with golden-section refinement around the argmax.
/// Used when the Hamiltonian eigenvalue test is numerically ambiguous.
fn sweep_fallback(sys: &StateSpaceSystem) -> Result<f64, LtiError> {
    sweep_fallback_with(sys, 100_000)
}

fn sweep_fallback_with(sys: &StateSpaceSystem, points: usize) -> Result<f64, LtiError> {
    let omegas = candidate_frequencies(sys, points);
    let (peak, k) = sweep_max(sys, &omegas)?;
    let lo = if k == 0 { omegas[0] } else { omegas[k - 1] };
    let hi = if k + 1 < omegas.len() { omegas[k + 1] } else { omegas[k] };
    Ok(peak.max(golden_max(|w| gain_at(sys, w).unwrap_or(0.0), lo, hi, 100)))
}

/// Golden-section maximization of a unimodal-near-peak function on [lo, hi].
pub(crate) fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, iters: usize) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iters {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        }
        if b - a <= 1e-15 * b.abs().max(1.0) {
            break;
        }
    }
    f1.max(f2)
}

/// H-infinity norm sup_w sigma_max(G(jw)) within relative tolerance `tol`.
///
/// Bisection on gamma with the Hamiltonian imaginary-axis test, initialized
/// from a coarse log sweep; falls back to a dense sweep with golden-section
/// refinement if the eigenvalue test is ambiguous (eigenvalue within 1e-7 of
/// the axis without a clear crossing). Order zero returns sigma_max(D)
/// exactly.
pub fn hinf_norm(sys: &StateSpaceSystem, tol: f64) -> Result<f64, LtiError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let sigma_d = sigma_max(&sys.d.map(|v| Complex::new(v, 0.0)));
    if sys.order() == 0 {
        return Ok(sigma_d);
    }
    let max_real = sys.max_real_eigenvalue();
    if max_real >= STABILITY_MARGIN {
        return Err(LtiError::UnstableSystem { max_real });
    }

    let omegas = candidate_frequencies(sys, 256);
    let (sweep_peak, _) = sweep_max(sys, &omegas)?;
    let mut lo = sweep_peak.max(sigma_d);
    if lo == 0.0 {
        return Ok(0.0);
    }

    // Find an upper bound with no axis crossing.
    let mut hi = lo * 1.05;
    let mut guard = 0;
    loop {
        match hamiltonian_axis_test(sys, hi) {
            AxisTest::NoCrossing => break,
            AxisTest::Crossing => {
                lo = hi;
                hi *= 2.0;
            }
            AxisTest::Ambiguous => return sweep_fallback(sys),
        }
        guard += 1;
        if guard > 100 {
            return sweep_fallback(sys);
        }
    }

    let mut iters = 0;
    while hi - lo > tol * lo {
        let mid = 0.5 * (lo + hi);
        match hamiltonian_axis_test(sys, mid) {
            AxisTest::Crossing => lo = mid,
            AxisTest::NoCrossing => hi = mid,
            AxisTest::Ambiguous => return sweep_fallback(sys),
        }
        iters += 1;
        if iters > 200 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One co-simulation step: derivative = A x + B u, output = C x + D u.
/// The simulation engine calls this shape inside its RK4 stages.
pub fn co_simulate_step(
    sys: &StateSpaceSystem,
    state: &DVector<f64>,
    input: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let derivative = &sys.a * state + &sys.b * input;
    let output = &sys.c * state + &sys.d * input;
    (derivative, output)
}

/// Random stable SISO block with hinf_norm <= bound, deterministic in `seed`.
///
/// A is a random matrix shifted left of the axis by its largest symmetric
/// eigenvalue plus one; B, C, D are random; C and D are then rescaled so the
/// resulting norm lands at bound/1.01.
pub fn random_norm_bounded(seed: u64, order: usize, bound: f64) -> StateSpaceSystem {
    assert!(order >= 1, "order must be at least 1");
    assert!(bound > 0.0, "norm bound must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Row-major draws keep the layout independent of matrix storage order.
    let mut draw = |count: usize| -> Vec<f64> {
        (0..count).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let g = DMatrix::from_row_slice(order, order, &draw(order * order));
    let sym = (&g + g.transpose()) * 0.5;
    let shift = sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |a, &v| a.max(v))
        + 1.0;
    let a = g - DMatrix::identity(order, order) * shift;
    let b = DMatrix::from_column_slice(order, 1, &draw(order));
    let c = DMatrix::from_row_slice(1, order, &draw(order));
    let d = DMatrix::from_element(1, 1, rng.random_range(-0.5..0.5));

    let unscaled = StateSpaceSystem { a, b, c, d };
    let norm = hinf_norm(&unscaled, 1e-6).expect("shifted system is stable by construction");
    if norm < 1e-300 {
        return unscaled;
    }
    let scale = bound / (norm * 1.01);
    StateSpaceSystem {
        c: &unscaled.c * scale,
        d: &unscaled.d * scale,
        ..unscaled
    }
}
