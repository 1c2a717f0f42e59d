//! Deterministic flows: RK4 integration of the limiting ODEs, fundamental
//! matrices of frozen-coefficient linearizations, local flow integrals for
//! martingale weights, exponential-decay envelope fits, and a
//! variation-of-constants identity check.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::problem::ProblemInstance;

/// Default integrator step; small enough that RK4's O(dt^4) global error sits
/// well below every tolerance used by the verification layers.
pub const DEFAULT_DT: f64 = 1e-3;

/// Gauss-Legendre 4-point nodes/weights on [-1, 1], ascending.
const GL4_NODES: [f64; 4] = [
    -0.8611363115940526,
    -0.3399810435848563,
    0.3399810435848563,
    0.8611363115940526,
];
const GL4_WEIGHTS: [f64; 4] = [
    0.3478548451374538,
    0.6521451548625461,
    0.6521451548625461,
    0.3478548451374538,
];

/// Quadrature panels never exceed this width, keeping the 4-point rule deep
/// in its super-convergent regime for the generators in play.
const PANEL_MAX: f64 = 0.05;

struct VecRk4 {
    k1: DVector<f64>,
    k2: DVector<f64>,
    k3: DVector<f64>,
    k4: DVector<f64>,
    tmp: DVector<f64>,
}

impl VecRk4 {
    fn new(dim: usize) -> VecRk4 {
        VecRk4 {
            k1: DVector::zeros(dim),
            k2: DVector::zeros(dim),
            k3: DVector::zeros(dim),
            k4: DVector::zeros(dim),
            tmp: DVector::zeros(dim),
        }
    }

    fn step<F>(&mut self, f: &mut F, t: f64, y: &mut DVector<f64>, h: f64)
    where
        F: FnMut(f64, &DVector<f64>, &mut DVector<f64>),
    {
        f(t, y, &mut self.k1);
        self.tmp.copy_from(y);
        self.tmp.axpy(h / 2.0, &self.k1, 1.0);
        f(t + h / 2.0, &self.tmp, &mut self.k2);
        self.tmp.copy_from(y);
        self.tmp.axpy(h / 2.0, &self.k2, 1.0);
        f(t + h / 2.0, &self.tmp, &mut self.k3);
        self.tmp.copy_from(y);
        self.tmp.axpy(h, &self.k3, 1.0);
        f(t + h, &self.tmp, &mut self.k4);
        y.axpy(h / 6.0, &self.k1, 1.0);
        y.axpy(h / 3.0, &self.k2, 1.0);
        y.axpy(h / 3.0, &self.k3, 1.0);
        y.axpy(h / 6.0, &self.k4, 1.0);
    }
}

/// RK4 with fixed step `dt` and a shortened final step; rejects the first
/// non-finite state it produces.
pub fn integrate_ode<F>(
    mut f: F,
    t0: f64,
    y0: &DVector<f64>,
    t1: f64,
    dt: f64,
) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>, &mut DVector<f64>),
{
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::ParameterOutOfRange(format!("dt must be positive, got {dt}")));
    }
    if t1 < t0 {
        return Err(Error::ParameterOutOfRange(format!(
            "integration span reversed: [{t0}, {t1}]"
        )));
    }
    let mut y = y0.clone();
    let mut scratch = VecRk4::new(y0.len());
    let mut t = t0;
    // Step count fixed up front so accumulated t-drift cannot add steps.
    let n_full = ((t1 - t0) / dt).floor() as usize;
    for k in 0..n_full {
        scratch.step(&mut f, t, &mut y, dt);
        t = t0 + (k + 1) as f64 * dt;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { t });
        }
    }
    let rem = t1 - t;
    if rem > 0.0 {
        scratch.step(&mut f, t, &mut y, rem);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { t: t1 });
        }
    }
    Ok(y)
}

/// Integrates through an ascending knot sequence, returning the state at
/// every knot; `path[0]` is `y0` at `knots[0]`.
pub fn integrate_path<F>(
    mut f: F,
    knots: &[f64],
    y0: &DVector<f64>,
    dt: f64,
) -> Result<Vec<DVector<f64>>>
where
    F: FnMut(f64, &DVector<f64>, &mut DVector<f64>),
{
    if knots.is_empty() {
        return Ok(Vec::new());
    }
    let mut path = Vec::with_capacity(knots.len());
    path.push(y0.clone());
    let mut y = y0.clone();
    for w in knots.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi < lo {
            return Err(Error::ParameterOutOfRange(format!(
                "knots must be non-decreasing: {lo} then {hi}"
            )));
        }
        y = integrate_ode(&mut f, lo, &y, hi, dt)?;
        path.push(y.clone());
    }
    Ok(path)
}

/// Fast flow at frozen slow variable: x' = h(x, y_frozen).
pub fn integrate_fast_ode(
    p: &ProblemInstance,
    y_frozen: &DVector<f64>,
    x0: &DVector<f64>,
    span: f64,
    dt: f64,
) -> Result<DVector<f64>> {
    integrate_ode(|_t, x: &DVector<f64>, out: &mut DVector<f64>| p.h_into(x, y_frozen, out), 0.0, x0, span, dt)
}

/// Reduced slow flow on the equilibrium manifold: y' = g(lambda(y), y).
pub fn integrate_slow_ode(
    p: &ProblemInstance,
    y0: &DVector<f64>,
    span: f64,
    dt: f64,
) -> Result<DVector<f64>> {
    let mut z = DVector::zeros(p.d);
    integrate_ode(
        |_t, y: &DVector<f64>, out: &mut DVector<f64>| {
            p.lambda_into(y, &mut z);
            p.g_into(&z, y, out);
        },
        0.0,
        y0,
        span,
        dt,
    )
}

/// Reduced slow flow sampled at every knot of an ascending time grid.
pub fn integrate_slow_path(
    p: &ProblemInstance,
    y0: &DVector<f64>,
    knots: &[f64],
    dt: f64,
) -> Result<Vec<DVector<f64>>> {
    let mut z = DVector::zeros(p.d);
    integrate_path(
        |_t, y: &DVector<f64>, out: &mut DVector<f64>| {
            p.lambda_into(y, &mut z);
            p.g_into(&z, y, out);
        },
        knots,
        y0,
        dt,
    )
}

/// Degree-4 Taylor polynomial of the exponential: I + A + ... + A^4/24.
/// One RK4 step of size h on Y' = DY multiplies by exactly `taylor4(h D)`.
pub fn taylor4(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut acc = DMatrix::<f64>::identity(n, n);
    for j in 1..=4u32 {
        term = (&term * a) / j as f64;
        acc += &term;
    }
    acc
}

/// Fundamental matrix of Y' = D Y over a span `tau >= 0`, discretized as RK4
/// with step `dt` (full steps then one shortened step).
pub fn phi_tau(d: &DMatrix<f64>, tau: f64, dt: f64) -> Result<DMatrix<f64>> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::ParameterOutOfRange(format!("phi span must be >= 0, got {tau}")));
    }
    if !(dt > 0.0) {
        return Err(Error::ParameterOutOfRange(format!("dt must be positive, got {dt}")));
    }
    let n = d.nrows();
    let mut acc = DMatrix::<f64>::identity(n, n);
    if tau == 0.0 {
        return Ok(acc);
    }
    let n_full = (tau / dt).floor() as usize;
    if n_full > 0 {
        let step = taylor4(&(d * dt));
        for _ in 0..n_full {
            acc = &step * acc;
        }
    }
    let rem = tau - n_full as f64 * dt;
    if rem > 0.0 {
        acc = taylor4(&(d * rem)) * acc;
    }
    Ok(acc)
}

/// Local flow integral `int_0^h Phi(v) dv` for Y' = D Y, by composite 4-point
/// Gauss-Legendre quadrature with the flow itself advanced incrementally
/// between nodes (so the discretization matches `phi_tau` exactly).
pub fn integrate_phi_weight(d: &DMatrix<f64>, h: f64, dt: f64) -> Result<DMatrix<f64>> {
    if !(h >= 0.0) || !h.is_finite() {
        return Err(Error::ParameterOutOfRange(format!("weight span must be >= 0, got {h}")));
    }
    let n = d.nrows();
    let mut acc = DMatrix::<f64>::zeros(n, n);
    if h == 0.0 {
        return Ok(acc);
    }
    let n_panels = (h / PANEL_MAX).ceil().max(1.0) as usize;
    let w = h / n_panels as f64;
    let mut cur = DMatrix::<f64>::identity(n, n);
    let mut v_cur = 0.0;
    for j in 0..n_panels {
        let lo = j as f64 * w;
        for (xi, wt) in GL4_NODES.iter().zip(GL4_WEIGHTS) {
            let v = lo + 0.5 * w * (1.0 + xi);
            cur = phi_tau(d, v - v_cur, dt)? * cur;
            v_cur = v;
            let coeff = wt * 0.5 * w;
            acc.zip_apply(&cur, |a, c| *a += coeff * c);
        }
    }
    Ok(acc)
}

/// Fundamental matrices of a frozen-coefficient linearization: the generator
/// is held constant, so transition matrices depend only on elapsed time.
pub trait FundamentalMatrixProvider {
    fn dim(&self) -> usize;
    /// Transition over elapsed time `tau >= 0`.
    fn transition(&self, tau: f64) -> Result<DMatrix<f64>>;
}

#[derive(Debug, Clone)]
pub struct PhiFlow {
    generator: DMatrix<f64>,
    dt: f64,
}

impl PhiFlow {
    pub fn from_generator(generator: DMatrix<f64>, dt: f64) -> Result<PhiFlow> {
        if generator.nrows() != generator.ncols() {
            return Err(Error::ParameterOutOfRange("generator must be square".into()));
        }
        if !generator.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput("flow generator"));
        }
        Ok(PhiFlow { generator, dt })
    }

    /// Fast linearization anchored on the equilibrium manifold at slow value
    /// `y`: generator is the x-Jacobian of h at (lambda(y), y).
    pub fn fast_at_anchor(p: &ProblemInstance, y: &DVector<f64>, dt: f64) -> Result<PhiFlow> {
        let z = p.eval_lambda(y)?;
        PhiFlow::from_generator(p.eval_jac_h_x(&z, y), dt)
    }

    /// Slow linearization frozen at the equilibrium y*: generator is the
    /// Jacobian of the reduced field y -> g(lambda(y), y) at y*.
    pub fn slow_at_equilibrium(p: &ProblemInstance, dt: f64) -> Result<PhiFlow> {
        let y_star = p.y_star.clone();
        PhiFlow::from_generator(p.eval_jac_g_reduced(&y_star), dt)
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `int_0^h Phi(v) dv` under this flow's discretization.
    pub fn local_weight(&self, h: f64) -> Result<DMatrix<f64>> {
        integrate_phi_weight(&self.generator, h, self.dt)
    }
}

impl FundamentalMatrixProvider for PhiFlow {
    fn dim(&self) -> usize {
        self.generator.nrows()
    }

    fn transition(&self, tau: f64) -> Result<DMatrix<f64>> {
        phi_tau(&self.generator, tau, self.dt)
    }
}

/// Exponential envelope `||Phi(tau)|| <= k_coeff * exp(-kappa * tau)`.
#[derive(Debug, Clone, Copy)]
pub struct DecayEnvelope {
    pub kappa: f64,
    pub k_coeff: f64,
}

impl DecayEnvelope {
    pub fn bound(&self, tau: f64) -> f64 {
        self.k_coeff * (-self.kappa * tau).exp()
    }
}

/// Fits a decay envelope from spectral norms of the flow on a uniform grid
/// over [0, t_max]: kappa is the least-squares slope of log||Phi|| over the
/// tail half of the grid, and k_coeff is lifted so the envelope covers every
/// grid sample (with a 1e-6 relative margin). Non-decaying flows are a fit
/// failure, not a fabricated bound.
pub fn fit_decay_envelope(
    flow: &dyn FundamentalMatrixProvider,
    t_max: f64,
    n_grid: usize,
) -> Result<DecayEnvelope> {
    if n_grid < 4 || !(t_max > 0.0) {
        return Err(Error::ParameterOutOfRange(
            "envelope fit needs t_max > 0 and at least 4 grid points".into(),
        ));
    }
    let dt_grid = t_max / (n_grid - 1) as f64;
    let mut taus = Vec::with_capacity(n_grid);
    let mut lognorms = Vec::with_capacity(n_grid);
    let step = flow.transition(dt_grid)?;
    let mut cur = DMatrix::<f64>::identity(flow.dim(), flow.dim());
    for i in 0..n_grid {
        if i > 0 {
            cur = &step * &cur;
        }
        let norm = spectral_norm(&cur);
        if !norm.is_finite() {
            return Err(Error::FitFailed(format!(
                "flow norm is non-finite at tau = {}",
                i as f64 * dt_grid
            )));
        }
        taus.push(i as f64 * dt_grid);
        // Underflowed norms carry no slope information; floor them.
        lognorms.push(norm.max(1e-300).ln());
    }

    let lo = n_grid / 2;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    let m = (n_grid - lo) as f64;
    for i in lo..n_grid {
        sx += taus[i];
        sy += lognorms[i];
        sxx += taus[i] * taus[i];
        sxy += taus[i] * lognorms[i];
    }
    let denom = m * sxx - sx * sx;
    if denom <= 0.0 {
        return Err(Error::FitFailed("degenerate envelope grid".into()));
    }
    let slope = (m * sxy - sx * sy) / denom;
    if !(slope < 0.0) {
        return Err(Error::FitFailed(format!(
            "flow does not decay: fitted log-slope {slope:.3e} >= 0"
        )));
    }
    let kappa = -slope;
    let mut k_log = f64::NEG_INFINITY;
    for i in 0..n_grid {
        k_log = k_log.max(lognorms[i] + kappa * taus[i]);
    }
    Ok(DecayEnvelope { kappa, k_coeff: k_log.exp() * (1.0 + 1e-6) })
}

/// A nominal field with Jacobian plus a perturbation, for checking the
/// variation-of-constants identity
/// `p(t) = u(t; t0, u0) + Phi(t, t0)(p0 - u0) + int Phi(t, s; p(s)) g(s, p(s)) ds`.
pub struct AlekseevProblem {
    pub dim: usize,
    pub f: Box<dyn Fn(&DVector<f64>, &mut DVector<f64>) + Send + Sync>,
    pub df: Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    pub g: Box<dyn Fn(f64, &DVector<f64>, &mut DVector<f64>) + Send + Sync>,
}

#[derive(Debug, Clone)]
pub struct AlekseevRow {
    pub t: f64,
    pub direct: DVector<f64>,
    pub reconstructed: DVector<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct AlekseevReport {
    pub rows: Vec<AlekseevRow>,
    pub max_residual: f64,
}

/// Integrates the coupled pair (u, Phi) of the nominal flow and its
/// linearization from `(s, u_s)` to time `t`, returning `(u(t), Phi(t, s))`.
fn nominal_with_transition(
    prob: &AlekseevProblem,
    s: f64,
    u_s: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = prob.dim;
    let mut state = DVector::zeros(d + d * d);
    state.rows_mut(0, d).copy_from(u_s);
    for i in 0..d {
        state[d + i * d + i] = 1.0;
    }
    let mut fu = DVector::zeros(d);
    let out = integrate_ode(
        |_t, st: &DVector<f64>, deriv: &mut DVector<f64>| {
            let u = st.rows(0, d);
            (prob.f)(&u.into_owned(), &mut fu);
            deriv.rows_mut(0, d).copy_from(&fu);
            let jac = (prob.df)(&st.rows(0, d).into_owned());
            // Column-major layout: columns of Phi evolve independently.
            for c in 0..d {
                let col = st.rows(d + c * d, d).into_owned();
                let dcol = &jac * col;
                deriv.rows_mut(d + c * d, d).copy_from(&dcol);
            }
        },
        s,
        &state,
        t,
        dt,
    )?;
    let u_t = out.rows(0, d).into_owned();
    let mut phi = DMatrix::zeros(d, d);
    for c in 0..d {
        phi.set_column(c, &out.rows(d + c * d, d).into_owned());
    }
    Ok((u_t, phi))
}

/// Checks the variation-of-constants identity at `n_check` evenly spaced
/// times: the left side integrates the perturbed dynamics directly, the
/// right side rebuilds it from the nominal flow, the transition matrix
/// applied to the initial offset, and a Gauss-Legendre panel quadrature of
/// transition-weighted perturbations along the perturbed path.
pub fn verify_alekseev(
    prob: &AlekseevProblem,
    t0: f64,
    t1: f64,
    u0: &DVector<f64>,
    p0: &DVector<f64>,
    dt: f64,
    n_check: usize,
) -> Result<AlekseevReport> {
    if n_check == 0 || t1 <= t0 {
        return Err(Error::ParameterOutOfRange(
            "identity check needs t1 > t0 and at least one checkpoint".into(),
        ));
    }
    let d = prob.dim;
    let mut gbuf = DVector::zeros(d);
    let mut gq = DVector::zeros(d);
    let mut rows = Vec::with_capacity(n_check);
    let mut perturbed = |t: f64, st: &DVector<f64>, deriv: &mut DVector<f64>| {
        (prob.f)(st, deriv);
        (prob.g)(t, st, &mut gbuf);
        *deriv += &gbuf;
    };

    for i in 1..=n_check {
        let t = t0 + (t1 - t0) * i as f64 / n_check as f64;
        let direct = integrate_ode(&mut perturbed, t0, p0, t, dt)?;

        let (u_t, phi_t0) = nominal_with_transition(prob, t0, u0, t, dt)?;
        let mut rhs = u_t + phi_t0 * (p0 - u0);

        let n_panels = ((t - t0) / PANEL_MAX).ceil().max(1.0) as usize;
        let w = (t - t0) / n_panels as f64;
        // March the perturbed path through the ascending node sequence.
        let mut p_cur = p0.clone();
        let mut s_cur = t0;
        for j in 0..n_panels {
            let lo = t0 + j as f64 * w;
            for (xi, wt) in GL4_NODES.iter().zip(GL4_WEIGHTS) {
                let s = lo + 0.5 * w * (1.0 + xi);
                p_cur = integrate_ode(&mut perturbed, s_cur, &p_cur, s, dt)?;
                s_cur = s;
                let (_, phi) = nominal_with_transition(prob, s, &p_cur, t, dt)?;
                (prob.g)(s, &p_cur, &mut gq);
                rhs.axpy(wt * 0.5 * w, &(phi * &gq), 1.0);
            }
        }

        let residual = (&direct - &rhs).norm();
        rows.push(AlekseevRow { t, direct, reconstructed: rhs, residual });
    }
    let max_residual = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    Ok(AlekseevReport { rows, max_residual })
}

/// Linear demo: nominal u' = -u, constant perturbation 0.3, offset start.
/// The identity is exact here (the transition matrix is anchor-free), so the
/// residual isolates integrator plus quadrature error.
pub fn alekseev_linear_demo() -> (AlekseevProblem, f64, f64, DVector<f64>, DVector<f64>) {
    let prob = AlekseevProblem {
        dim: 1,
        f: Box::new(|u, out| out[0] = -u[0]),
        df: Box::new(|_| DMatrix::from_element(1, 1, -1.0)),
        g: Box::new(|_t, _p, out| out[0] = 0.3),
    };
    (prob, 0.0, 2.0, DVector::from_element(1, 1.0), DVector::from_element(1, 1.2))
}

/// Nonlinear demo: nominal u' = -u^3 - u with matching starts, constant
/// perturbation 0.1.
pub fn alekseev_nonlinear_demo() -> (AlekseevProblem, f64, f64, DVector<f64>, DVector<f64>) {
    let prob = AlekseevProblem {
        dim: 1,
        f: Box::new(|u, out| out[0] = -u[0] * u[0] * u[0] - u[0]),
        df: Box::new(|u| DMatrix::from_element(1, 1, -3.0 * u[0] * u[0] - 1.0)),
        g: Box::new(|_t, _p, out| out[0] = 0.1),
    };
    (prob, 0.0, 2.0, DVector::from_element(1, 1.0), DVector::from_element(1, 1.0))
}
