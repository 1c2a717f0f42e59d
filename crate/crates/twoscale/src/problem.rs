//! Problem instances: the coupled fields `h` (fast) and `g` (slow), the fast
//! equilibrium map `lambda`, the slow equilibrium `y*`, and the constants the
//! bound evaluation needs (Lipschitz moduli, the saturation bound on `g`,
//! Lyapunov level sets).
//!
//! Conventions: `h(lambda(y), y) = 0` for every `y`, and the reduced slow
//! field `g(lambda(y), y)` vanishes at `y*`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::noise::RngStream;
use rand::Rng;

pub type FieldFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>, &mut DVector<f64>) + Send + Sync>;
pub type MapFn = Box<dyn Fn(&DVector<f64>, &mut DVector<f64>) + Send + Sync>;
pub type JacXyFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type JacYFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type ScalarFn = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Euclidean projection onto the ball of radius `bound`: `v <- v min(1, bound/|v|)`.
/// 1-Lipschitz, so wrapping a field in it never raises the field's modulus.
pub fn saturate(v: &mut DVector<f64>, bound: f64) {
    let n = v.norm();
    if n > bound {
        *v *= bound / n;
    }
}

pub struct ProblemInstance {
    pub name: String,
    /// Fast dimension (of `x`).
    pub d: usize,
    /// Slow dimension (of `y`).
    pub s: usize,
    h: FieldFn,
    g: FieldFn,
    lambda: MapFn,
    pub y_star: DVector<f64>,
    jac_h_x: Option<JacXyFn>,
    jac_g_reduced: Option<JacYFn>,
    grad_lambda: Option<JacYFn>,
    /// True when `jac_h_x(lambda(y), y)` does not depend on `y`; lets the
    /// martingale-weight recurrences reuse one propagator per step.
    pub jac_h_x_constant: bool,
    pub l_h: f64,
    pub l_g: f64,
    pub l_lambda: f64,
    /// Saturation bound: `|g| <= b_g` everywhere.
    pub b_g: f64,
    /// Outer Lyapunov level (the excursion event checks `V <= level_r`).
    pub level_r: f64,
    /// Inner level used when reporting how deep trajectories settle.
    pub level_r0: f64,
    v_slow_fn: Option<ScalarFn>,
    v_fast_fn: Option<ScalarFn>,
}

impl std::fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("s", &self.s)
            .field("y_star", &self.y_star)
            .finish()
    }
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl ProblemInstance {
    /// Assembles a user instance. Closed-form Jacobians are optional; central
    /// differences fill in when absent. `jac_h_x_constant` must only be set
    /// when the fast Jacobian along `(lambda(y), y)` is state-independent.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        d: usize,
        s: usize,
        h: FieldFn,
        g: FieldFn,
        lambda: MapFn,
        y_star: DVector<f64>,
        l_h: f64,
        l_g: f64,
        l_lambda: f64,
        b_g: f64,
    ) -> Self {
        ProblemInstance {
            name: name.into(),
            d,
            s,
            h,
            g,
            lambda,
            y_star,
            jac_h_x: None,
            jac_g_reduced: None,
            grad_lambda: None,
            jac_h_x_constant: false,
            l_h,
            l_g,
            l_lambda,
            b_g,
            level_r: 4.0,
            level_r0: 1.0,
            v_slow_fn: None,
            v_fast_fn: None,
        }
    }

    pub fn with_jac_h_x(mut self, j: JacXyFn, constant: bool) -> Self {
        self.jac_h_x = Some(j);
        self.jac_h_x_constant = constant;
        self
    }

    pub fn with_jac_g_reduced(mut self, j: JacYFn) -> Self {
        self.jac_g_reduced = Some(j);
        self
    }

    pub fn with_grad_lambda(mut self, j: JacYFn) -> Self {
        self.grad_lambda = Some(j);
        self
    }

    /// Raw field evaluation without finiteness checks; hot-loop entry point.
    pub fn h_into(&self, x: &DVector<f64>, y: &DVector<f64>, out: &mut DVector<f64>) {
        (self.h)(x, y, out);
    }

    pub fn g_into(&self, x: &DVector<f64>, y: &DVector<f64>, out: &mut DVector<f64>) {
        (self.g)(x, y, out);
    }

    pub fn lambda_into(&self, y: &DVector<f64>, out: &mut DVector<f64>) {
        (self.lambda)(y, out);
    }

    pub fn eval_h(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        assert_eq!(x.len(), self.d);
        assert_eq!(y.len(), self.s);
        if !all_finite(x) || !all_finite(y) {
            return Err(Error::NonFiniteInput("eval_h"));
        }
        let mut out = DVector::zeros(self.d);
        self.h_into(x, y, &mut out);
        Ok(out)
    }

    pub fn eval_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        assert_eq!(x.len(), self.d);
        assert_eq!(y.len(), self.s);
        if !all_finite(x) || !all_finite(y) {
            return Err(Error::NonFiniteInput("eval_g"));
        }
        let mut out = DVector::zeros(self.s);
        self.g_into(x, y, &mut out);
        Ok(out)
    }

    pub fn eval_lambda(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        assert_eq!(y.len(), self.s);
        if !all_finite(y) {
            return Err(Error::NonFiniteInput("eval_lambda"));
        }
        let mut out = DVector::zeros(self.d);
        self.lambda_into(y, &mut out);
        Ok(out)
    }

    /// Reduced slow field `g(lambda(y), y)`.
    pub fn eval_g_reduced(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.eval_lambda(y)?;
        self.eval_g(&z, y)
    }

    /// Jacobian of `h` in its first argument; closed form if supplied,
    /// otherwise central differences with step `1e-6 (1 + |x|)`.
    pub fn eval_jac_h_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac_h_x {
            Some(j) => j(x, y),
            None => fd_jac_h_x(self, x, y),
        }
    }

    /// Jacobian of the reduced slow field at `y`.
    pub fn eval_jac_g_reduced(&self, y: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac_g_reduced {
            Some(j) => j(y),
            None => fd_jac_g_reduced(self, y),
        }
    }

    /// Jacobian of `lambda` (d x s).
    pub fn eval_grad_lambda(&self, y: &DVector<f64>) -> DMatrix<f64> {
        match &self.grad_lambda {
            Some(j) => j(y),
            None => fd_grad_lambda(self, y),
        }
    }

    /// Slow Lyapunov function, default `|y - y*|^2`.
    pub fn v_slow(&self, y: &DVector<f64>) -> f64 {
        match &self.v_slow_fn {
            Some(f) => f(y),
            None => (y - &self.y_star).norm_squared(),
        }
    }

    /// Fast Lyapunov function at `(x, y)`, default `|x - lambda(y)|^2`.
    pub fn v_fast(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        match &self.v_fast_fn {
            Some(f) => {
                let mut xy = DVector::zeros(self.d + self.s);
                xy.rows_mut(0, self.d).copy_from(x);
                xy.rows_mut(self.d, self.s).copy_from(y);
                f(&xy)
            }
            None => {
                let mut z = DVector::zeros(self.d);
                self.lambda_into(y, &mut z);
                (x - z).norm_squared()
            }
        }
    }
}

fn fd_step(arg_norm: f64) -> f64 {
    1e-6 * (1.0 + arg_norm)
}

pub fn fd_jac_h_x(p: &ProblemInstance, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    let h = fd_step(x.norm());
    let mut jac = DMatrix::zeros(p.d, p.d);
    let mut xp = x.clone();
    let mut fp = DVector::zeros(p.d);
    let mut fm = DVector::zeros(p.d);
    for j in 0..p.d {
        xp[j] = x[j] + h;
        p.h_into(&xp, y, &mut fp);
        xp[j] = x[j] - h;
        p.h_into(&xp, y, &mut fm);
        xp[j] = x[j];
        for i in 0..p.d {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

pub fn fd_jac_g_reduced(p: &ProblemInstance, y: &DVector<f64>) -> DMatrix<f64> {
    let h = fd_step(y.norm());
    let mut jac = DMatrix::zeros(p.s, p.s);
    let mut yp = y.clone();
    let mut z = DVector::zeros(p.d);
    let mut fp = DVector::zeros(p.s);
    let mut fm = DVector::zeros(p.s);
    for j in 0..p.s {
        yp[j] = y[j] + h;
        p.lambda_into(&yp, &mut z);
        p.g_into(&z, &yp, &mut fp);
        yp[j] = y[j] - h;
        p.lambda_into(&yp, &mut z);
        p.g_into(&z, &yp, &mut fm);
        yp[j] = y[j];
        for i in 0..p.s {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

pub fn fd_grad_lambda(p: &ProblemInstance, y: &DVector<f64>) -> DMatrix<f64> {
    let h = fd_step(y.norm());
    let mut jac = DMatrix::zeros(p.d, p.s);
    let mut yp = y.clone();
    let mut fp = DVector::zeros(p.d);
    let mut fm = DVector::zeros(p.d);
    for j in 0..p.s {
        yp[j] = y[j] + h;
        p.lambda_into(&yp, &mut fp);
        yp[j] = y[j] - h;
        p.lambda_into(&yp, &mut fm);
        yp[j] = y[j];
        for i in 0..p.d {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Fast relaxation toward a moving target: `h = -(x - y)`, `lambda = id`,
/// slow drift `g = sat_2(-tanh(y) + 0.5 (x - y))`, equilibrium `y* = 0`.
pub fn linear1d() -> ProblemInstance {
    scaled_linear1d("LINEAR1D", 1.0)
}

/// LINEAR1D with the fast field scaled by 10; stresses time-scale separation.
pub fn stiff() -> ProblemInstance {
    scaled_linear1d("STIFF", 10.0)
}

/// Deliberately divergent diagnostic: the fast field repels (`+10 (x - y)`).
/// Fails the stability validator and blows up under iteration; not part of
/// the builtin catalog.
pub fn unstable() -> ProblemInstance {
    scaled_linear1d("UNSTABLE", -10.0)
}

fn scaled_linear1d(name: &str, c: f64) -> ProblemInstance {
    let b_g = 2.0;
    ProblemInstance::new(
        name,
        1,
        1,
        Box::new(move |x, y, out| out[0] = -c * (x[0] - y[0])),
        Box::new(move |x, y, out| {
            out[0] = -y[0].tanh() + 0.5 * (x[0] - y[0]);
            saturate(out, b_g);
        }),
        Box::new(|y, out| out[0] = y[0]),
        DVector::zeros(1),
        c.abs() * std::f64::consts::SQRT_2,
        2.5_f64.sqrt(),
        1.0,
        b_g,
    )
    .with_jac_h_x(Box::new(move |_, _| DMatrix::from_element(1, 1, -c)), true)
    .with_jac_g_reduced(Box::new(|y| {
        let t = y[0].tanh();
        DMatrix::from_element(1, 1, -(1.0 - t * t))
    }))
    .with_grad_lambda(Box::new(|_| DMatrix::from_element(1, 1, 1.0)))
}

/// Planar fast rotation into a curved equilibrium manifold:
/// `h = A (x - lambda(y))` with `A = [[-1, 2], [-2, -1]]`,
/// `lambda(y) = (y, tanh y)`, slow drift `g = sat_2(-y + 0.3 (x_1 - y))`.
pub fn rot2d() -> ProblemInstance {
    let b_g = 2.0;
    ProblemInstance::new(
        "ROT2D",
        2,
        1,
        Box::new(|x, y, out| {
            let e0 = x[0] - y[0];
            let e1 = x[1] - y[0].tanh();
            out[0] = -e0 + 2.0 * e1;
            out[1] = -2.0 * e0 - e1;
        }),
        Box::new(move |x, y, out| {
            out[0] = -y[0] + 0.3 * (x[0] - y[0]);
            saturate(out, b_g);
        }),
        Box::new(|y, out| {
            out[0] = y[0];
            out[1] = y[0].tanh();
        }),
        DVector::zeros(1),
        15.0_f64.sqrt(),
        1.78_f64.sqrt(),
        std::f64::consts::SQRT_2,
        b_g,
    )
    .with_jac_h_x(
        Box::new(|_, _| DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, -2.0, -1.0])),
        true,
    )
    .with_jac_g_reduced(Box::new(|y| {
        // Reduced field is sat_2(-y); flat where the saturation is active.
        DMatrix::from_element(1, 1, if y[0].abs() <= 2.0 { -1.0 } else { 0.0 })
    }))
    .with_grad_lambda(Box::new(|y| {
        let t = y[0].tanh();
        DMatrix::from_row_slice(2, 1, &[1.0, 1.0 - t * t])
    }))
}

pub const BUILTIN_NAMES: [&str; 3] = ["LINEAR1D", "ROT2D", "STIFF"];

/// Catalog lookup. Every catalog entry passes `check_instance`; the
/// divergence diagnostic `UNSTABLE` is resolvable here but excluded from
/// [`BUILTIN_NAMES`].
pub fn instance_by_name(name: &str) -> Result<ProblemInstance> {
    match name {
        "LINEAR1D" => Ok(linear1d()),
        "ROT2D" => Ok(rot2d()),
        "STIFF" => Ok(stiff()),
        "UNSTABLE" => Ok(unstable()),
        other => Err(Error::ParameterOutOfRange(format!(
            "unknown problem `{other}`; expected one of LINEAR1D, ROT2D, STIFF, UNSTABLE"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct InstanceReport {
    pub name: String,
    /// max over probes of `|h(lambda(y), y)|`.
    pub equilibrium_residual_fast: f64,
    /// `|g(lambda(y*), y*)|`.
    pub equilibrium_residual_slow: f64,
    pub lipschitz_h_est: f64,
    pub lipschitz_g_est: f64,
    pub lipschitz_lambda_est: f64,
    /// max over probes of the largest real part of `jac_h_x` eigenvalues.
    pub spectral_abscissa_max: f64,
    /// min over in-level probes of `-<grad V, g_red> / |y - y*|^2`.
    pub lyapunov_descent_c: f64,
    pub g_norm_max: f64,
    pub probes: usize,
}

impl InstanceReport {
    pub fn checks(&self, p: &ProblemInstance) -> Vec<(&'static str, bool, String)> {
        let slack = 1.0 + 1e-6;
        vec![
            (
                "fast equilibrium residual",
                self.equilibrium_residual_fast <= 1e-10,
                format!("{:.3e}", self.equilibrium_residual_fast),
            ),
            (
                "slow equilibrium residual",
                self.equilibrium_residual_slow <= 1e-10,
                format!("{:.3e}", self.equilibrium_residual_slow),
            ),
            (
                "declared L_h dominates",
                self.lipschitz_h_est <= p.l_h * slack,
                format!("est {:.6} vs {:.6}", self.lipschitz_h_est, p.l_h),
            ),
            (
                "declared L_g dominates",
                self.lipschitz_g_est <= p.l_g * slack,
                format!("est {:.6} vs {:.6}", self.lipschitz_g_est, p.l_g),
            ),
            (
                "declared L_lambda dominates",
                self.lipschitz_lambda_est <= p.l_lambda * slack,
                format!("est {:.6} vs {:.6}", self.lipschitz_lambda_est, p.l_lambda),
            ),
            (
                "fast Jacobian uniformly stable",
                self.spectral_abscissa_max < 0.0,
                format!("max Re eig {:.6}", self.spectral_abscissa_max),
            ),
            (
                "Lyapunov descent",
                self.lyapunov_descent_c > 0.0,
                format!("c >= {:.6}", self.lyapunov_descent_c),
            ),
            (
                "g respects saturation bound",
                self.g_norm_max <= p.b_g * slack,
                format!("max |g| {:.6} vs B_g {:.6}", self.g_norm_max, p.b_g),
            ),
        ]
    }

    pub fn ok(&self, p: &ProblemInstance) -> bool {
        self.checks(p).iter().all(|(_, ok, _)| *ok)
    }

    pub fn summary(&self, p: &ProblemInstance) -> String {
        self.checks(p)
            .iter()
            .map(|(name, ok, ev)| format!("{name}: {} ({ev})", if *ok { "pass" } else { "FAIL" }))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Probes the instance on seeded points in a box of radius 3 around the
/// equilibrium: equilibrium-map residuals, difference-quotient estimates of
/// the Lipschitz moduli, the spectral abscissa of the fast Jacobian along the
/// equilibrium manifold, and Lyapunov descent of the reduced slow field.
pub fn check_instance(p: &ProblemInstance, probes: usize, seed: u64) -> InstanceReport {
    const BOX_RADIUS: f64 = 3.0;
    let mut rng = RngStream::new(seed, 0);
    fn draw(rng: &mut RngStream, dim: usize, center: &DVector<f64>, radius: f64) -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        for i in 0..dim {
            v[i] = center[i] + radius * (2.0 * rng.rng().random::<f64>() - 1.0);
        }
        v
    }

    let x_center = p.eval_lambda(&p.y_star).expect("lambda at y*");
    let y_center = p.y_star.clone();

    let mut resid_fast = 0.0_f64;
    let mut l_h = 0.0_f64;
    let mut l_g = 0.0_f64;
    let mut l_lam = 0.0_f64;
    let mut abscissa: f64 = f64::NEG_INFINITY;
    let mut descent_c = f64::INFINITY;
    let mut g_max = 0.0_f64;

    let joint = |x: &DVector<f64>, y: &DVector<f64>| {
        let mut v = DVector::zeros(x.len() + y.len());
        v.rows_mut(0, x.len()).copy_from(x);
        v.rows_mut(x.len(), y.len()).copy_from(y);
        v
    };

    for _ in 0..probes {
        let x1 = draw(&mut rng, p.d, &x_center, BOX_RADIUS);
        let y1 = draw(&mut rng, p.s, &y_center, BOX_RADIUS);
        let x2 = draw(&mut rng, p.d, &x_center, BOX_RADIUS);
        let y2 = draw(&mut rng, p.s, &y_center, BOX_RADIUS);
        // A nearby pair sharpens the local quotient estimate.
        let x3 = draw(&mut rng, p.d, &x1, 1e-3);
        let y3 = draw(&mut rng, p.s, &y1, 1e-3);

        let z1 = p.eval_lambda(&y1).unwrap();
        resid_fast = resid_fast.max(p.eval_h(&z1, &y1).unwrap().norm());

        for ((xa, ya), (xb, yb)) in [((&x1, &y1), (&x2, &y2)), ((&x1, &y1), (&x3, &y3))] {
            let dp = (joint(xa, ya) - joint(xb, yb)).norm();
            if dp > 1e-12 {
                let dh = (p.eval_h(xa, ya).unwrap() - p.eval_h(xb, yb).unwrap()).norm();
                let dg = (p.eval_g(xa, ya).unwrap() - p.eval_g(xb, yb).unwrap()).norm();
                l_h = l_h.max(dh / dp);
                l_g = l_g.max(dg / dp);
            }
            let dy = (ya - yb).norm();
            if dy > 1e-12 {
                let dl = (p.eval_lambda(ya).unwrap() - p.eval_lambda(yb).unwrap()).norm();
                l_lam = l_lam.max(dl / dy);
            }
        }

        let jac = p.eval_jac_h_x(&z1, &y1);
        for ev in jac.complex_eigenvalues().iter() {
            abscissa = abscissa.max(ev.re);
        }

        g_max = g_max.max(p.eval_g(&x1, &y1).unwrap().norm());

        let dy_star = &y1 - &p.y_star;
        let dist_sq = dy_star.norm_squared();
        if dist_sq > 1e-12 && p.v_slow(&y1) <= p.level_r {
            let g_red = p.eval_g_reduced(&y1).unwrap();
            let grad_v = match &p.v_slow_fn {
                Some(f) => fd_grad_scalar(f, &y1),
                None => 2.0 * dy_star,
            };
            descent_c = descent_c.min(-grad_v.dot(&g_red) / dist_sq);
        }
    }

    let resid_slow = p.eval_g_reduced(&p.y_star).unwrap().norm();

    InstanceReport {
        name: p.name.clone(),
        equilibrium_residual_fast: resid_fast,
        equilibrium_residual_slow: resid_slow,
        lipschitz_h_est: l_h,
        lipschitz_g_est: l_g,
        lipschitz_lambda_est: l_lam,
        spectral_abscissa_max: abscissa,
        lyapunov_descent_c: descent_c,
        g_norm_max: g_max,
        probes,
    }
}

fn fd_grad_scalar(f: &ScalarFn, y: &DVector<f64>) -> DVector<f64> {
    let h = fd_step(y.norm());
    let mut grad = DVector::zeros(y.len());
    let mut yp = y.clone();
    for j in 0..y.len() {
        yp[j] = y[j] + h;
        let fp = f(&yp);
        yp[j] = y[j] - h;
        let fm = f(&yp);
        yp[j] = y[j];
        grad[j] = (fp - fm) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn linear1d_fields_match_closed_forms() {
        let p = linear1d();
        assert_relative_eq!(p.eval_h(&v1(3.0), &v1(1.0)).unwrap()[0], -2.0, max_relative = 1e-15);
        // Inner field -tanh(10) + 0.5 (0 - 10) ~ -6 saturates to -B_g.
        assert_relative_eq!(p.eval_g(&v1(0.0), &v1(10.0)).unwrap()[0], -2.0, max_relative = 1e-15);
        // Inside the ball the saturation is inactive.
        let inner = -0.5_f64.tanh() + 0.5 * (1.0 - 0.5);
        assert_relative_eq!(p.eval_g(&v1(1.0), &v1(0.5)).unwrap()[0], inner, max_relative = 1e-15);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let p = linear1d();
        assert!(matches!(p.eval_h(&v1(f64::NAN), &v1(0.0)), Err(Error::NonFiniteInput(_))));
        assert!(matches!(p.eval_g(&v1(0.0), &v1(f64::INFINITY)), Err(Error::NonFiniteInput(_))));
        assert!(matches!(p.eval_lambda(&v1(f64::NAN)), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn saturation_projects_onto_ball() {
        let mut v = DVector::from_vec(vec![3.0, 4.0]);
        saturate(&mut v, 2.0);
        assert_relative_eq!(v.norm(), 2.0, max_relative = 1e-14);
        assert_relative_eq!(v[0] / v[1], 0.75, max_relative = 1e-14);
        let mut w = DVector::from_vec(vec![0.3, 0.4]);
        saturate(&mut w, 2.0);
        assert_eq!(w, DVector::from_vec(vec![0.3, 0.4]));
    }

    #[test]
    fn builtins_pass_instance_checks() {
        for name in BUILTIN_NAMES {
            let p = instance_by_name(name).unwrap();
            let report = check_instance(&p, 200, 7);
            assert!(report.ok(&p), "{name}:\n{}", report.summary(&p));
            assert!(report.equilibrium_residual_fast <= 1e-10);
            assert!(report.equilibrium_residual_slow <= 1e-10);
        }
    }

    #[test]
    fn unstable_diagnostic_fails_stability_check() {
        let p = unstable();
        let report = check_instance(&p, 100, 7);
        assert!(report.spectral_abscissa_max > 0.0);
        assert!(!report.ok(&p));
    }

    #[test]
    fn check_instance_is_deterministic() {
        let p = rot2d();
        let r1 = check_instance(&p, 100, 42);
        let r2 = check_instance(&p, 100, 42);
        assert_eq!(r1.lipschitz_h_est, r2.lipschitz_h_est);
        assert_eq!(r1.lyapunov_descent_c, r2.lyapunov_descent_c);
    }

    #[test]
    fn finite_differences_match_closed_form_jacobians() {
        let p = rot2d();
        let y = v1(0.37);
        let x = p.eval_lambda(&y).unwrap();
        let closed = p.eval_jac_h_x(&x, &y);
        let fd = fd_jac_h_x(&p, &x, &y);
        assert!((closed - fd).norm() <= 1e-6);

        let closed_l = p.eval_grad_lambda(&y);
        let fd_l = fd_grad_lambda(&p, &y);
        assert!((closed_l - fd_l).norm() <= 1e-6);

        let closed_g = p.eval_jac_g_reduced(&y);
        let fd_g = fd_jac_g_reduced(&p, &y);
        assert!((closed_g - fd_g).norm() <= 1e-6);
    }

    #[test]
    fn rot2d_equilibrium_map_kills_fast_field() {
        let p = rot2d();
        for yv in [-1.5, -0.2, 0.0, 0.8, 2.5] {
            let y = v1(yv);
            let z = p.eval_lambda(&y).unwrap();
            assert!(p.eval_h(&z, &y).unwrap().norm() <= 1e-14);
        }
    }

    #[test]
    fn catalog_rejects_unknown_names() {
        assert!(matches!(instance_by_name("NOPE"), Err(Error::ParameterOutOfRange(_))));
    }
}
