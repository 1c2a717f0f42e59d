//! The coupled stochastic iteration and everything derived from a single
//! realized path: interpolants on both clocks, deviations from the limiting
//! flows, level-set occupation flags, and the flow-weighted martingale sums
//! the concentration analysis is built on.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::noise::{NoiseModel, RngStream};
use crate::odeflow::{self, integrate_slow_path, PhiFlow};
use crate::problem::ProblemInstance;
use crate::schedule::StepSchedule;

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Index where conditioning, deviation tracking, and level-set flags
    /// start; earlier indices are burn-in.
    pub n0: usize,
    /// Step for the ODE solves backing the slow reference path.
    pub dt: f64,
    /// Skip the reference-path solve and flag computation when false (the
    /// iterates themselves are always recorded).
    pub track_deviations: bool,
}

impl Default for SimOptions {
    fn default() -> SimOptions {
        SimOptions { n0: 0, dt: odeflow::DEFAULT_DT, track_deviations: true }
    }
}

/// One realized path, stored flat: row k holds iterate k; noise row k holds
/// the increment applied between iterates k and k+1.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub d: usize,
    pub s: usize,
    pub n_max: usize,
    pub n0: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
    m1: Vec<f64>,
    m2: Vec<f64>,
    /// ||x_k - lambda(y_k)||, every index.
    pub dev_fast: Vec<f64>,
    /// ||y_k - reference(t_slow_k)|| for k >= n0, zero before.
    pub dev_slow: Vec<f64>,
    /// Fast level-set occupation from n0 onward; monotone once false.
    pub g_fast: Vec<bool>,
    /// Slow level-set occupation from n0 onward.
    pub g_slow: Vec<bool>,
}

impl TrajectoryRecord {
    pub fn x_slice(&self, k: usize) -> &[f64] {
        &self.xs[k * self.d..(k + 1) * self.d]
    }

    pub fn y_slice(&self, k: usize) -> &[f64] {
        &self.ys[k * self.s..(k + 1) * self.s]
    }

    pub fn z_slice(&self, k: usize) -> &[f64] {
        &self.zs[k * self.d..(k + 1) * self.d]
    }

    /// Noise on the fast channel applied between k and k+1 (k < n_max).
    pub fn m1_slice(&self, k: usize) -> &[f64] {
        &self.m1[k * self.d..(k + 1) * self.d]
    }

    pub fn m2_slice(&self, k: usize) -> &[f64] {
        &self.m2[k * self.s..(k + 1) * self.s]
    }

    pub fn x_at(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.x_slice(k))
    }

    pub fn y_at(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.y_slice(k))
    }

    pub fn z_at(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.z_slice(k))
    }

    pub fn m1_at(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.m1_slice(k))
    }

    pub fn m2_at(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.m2_slice(k))
    }

    /// Largest fast-channel noise norm over steps [lo, hi).
    pub fn sup_m1_norm(&self, lo: usize, hi: usize) -> f64 {
        (lo..hi.min(self.n_max))
            .map(|k| crate::linalg::norm2(self.m1_slice(k)))
            .fold(0.0, f64::max)
    }

    pub fn sup_m2_norm(&self, lo: usize, hi: usize) -> f64 {
        (lo..hi.min(self.n_max))
            .map(|k| crate::linalg::norm2(self.m2_slice(k)))
            .fold(0.0, f64::max)
    }
}

/// Runs the coupled iteration
/// `x_{k+1} = x_k + a_k (h(x_k, y_k) + M1)`,
/// `y_{k+1} = y_k + b_k (g(x_k, y_k) + M2)`
/// over the whole schedule. The noise channels draw from streams
/// `2 * replication` and `2 * replication + 1` under `seed`, so replications
/// are independent and each is reproducible in isolation.
pub fn run(
    problem: &ProblemInstance,
    schedule: &StepSchedule,
    noise_fast: &NoiseModel,
    noise_slow: &NoiseModel,
    x0: &DVector<f64>,
    y0: &DVector<f64>,
    seed: u64,
    replication: u64,
    opts: &SimOptions,
) -> Result<TrajectoryRecord> {
    let fast = RngStream::new(seed, replication * 2);
    let slow = RngStream::new(seed, replication * 2 + 1);
    run_with_streams(problem, schedule, noise_fast, noise_slow, x0, y0, fast, slow, opts)
}

#[allow(clippy::too_many_arguments)]
pub fn run_with_streams(
    problem: &ProblemInstance,
    schedule: &StepSchedule,
    noise_fast: &NoiseModel,
    noise_slow: &NoiseModel,
    x0: &DVector<f64>,
    y0: &DVector<f64>,
    mut stream_fast: RngStream,
    mut stream_slow: RngStream,
    opts: &SimOptions,
) -> Result<TrajectoryRecord> {
    let (d, s) = (problem.d, problem.s);
    if x0.len() != d || y0.len() != s {
        return Err(Error::ParameterOutOfRange(format!(
            "start dims ({}, {}) do not match instance ({d}, {s})",
            x0.len(),
            y0.len()
        )));
    }
    if noise_fast.dim != d || noise_slow.dim != s {
        return Err(Error::ParameterOutOfRange(format!(
            "noise dims ({}, {}) do not match instance ({d}, {s})",
            noise_fast.dim, noise_slow.dim
        )));
    }
    if !x0.iter().chain(y0.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput("initial condition"));
    }
    let n_max = schedule.n_max();
    if opts.n0 > n_max {
        return Err(Error::IndexBeyondHorizon { index: opts.n0, horizon: n_max });
    }

    let mut rec = TrajectoryRecord {
        d,
        s,
        n_max,
        n0: opts.n0,
        xs: Vec::with_capacity((n_max + 1) * d),
        ys: Vec::with_capacity((n_max + 1) * s),
        zs: Vec::with_capacity((n_max + 1) * d),
        m1: Vec::with_capacity(n_max * d),
        m2: Vec::with_capacity(n_max * s),
        dev_fast: Vec::with_capacity(n_max + 1),
        dev_slow: vec![0.0; n_max + 1],
        g_fast: Vec::new(),
        g_slow: Vec::new(),
    };

    let mut x = x0.clone();
    let mut y = y0.clone();
    let mut z = DVector::zeros(d);
    let mut hbuf = DVector::zeros(d);
    let mut gbuf = DVector::zeros(s);
    let mut n1 = DVector::zeros(d);
    let mut n2 = DVector::zeros(s);

    problem.lambda_into(&y, &mut z);
    rec.xs.extend_from_slice(x.as_slice());
    rec.ys.extend_from_slice(y.as_slice());
    rec.zs.extend_from_slice(z.as_slice());
    rec.dev_fast.push((&x - &z).norm());

    let a = schedule.a();
    let b = schedule.b();
    for k in 0..n_max {
        noise_fast.sample_into(&mut stream_fast, &mut n1);
        noise_slow.sample_into(&mut stream_slow, &mut n2);
        problem.h_into(&x, &y, &mut hbuf);
        problem.g_into(&x, &y, &mut gbuf);
        x.zip_zip_apply(&hbuf, &n1, |xi, hi, mi| *xi += a[k] * (hi + mi));
        y.zip_zip_apply(&gbuf, &n2, |yi, gi, mi| *yi += b[k] * (gi + mi));
        problem.lambda_into(&y, &mut z);
        let dev = (&x - &z).norm();
        // The norm catches entry overflow long before the entries themselves
        // leave f64 range (the squared sum saturates first); the entry check
        // still matters when a saturating map hides a NaN behind finite output.
        if !dev.is_finite() || !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteIterate { index: k + 1 });
        }
        rec.xs.extend_from_slice(x.as_slice());
        rec.ys.extend_from_slice(y.as_slice());
        rec.zs.extend_from_slice(z.as_slice());
        rec.m1.extend_from_slice(n1.as_slice());
        rec.m2.extend_from_slice(n2.as_slice());
        rec.dev_fast.push(dev);
    }

    if opts.track_deviations {
        rec.dev_slow = slow_deviation_from(&rec, problem, schedule, opts.n0, opts.dt)?;
        let (gf, gs) = g_flags_from(&rec, problem, opts.n0);
        rec.g_fast = gf;
        rec.g_slow = gs;
    } else {
        rec.g_fast = vec![true; n_max + 1];
        rec.g_slow = vec![true; n_max + 1];
    }
    Ok(rec)
}

/// Distance from the realized slow iterates to the reduced-flow reference
/// started at iterate `n0`, measured on the slow clock's knots. Recomputable
/// for any window start without re-simulating.
pub fn slow_deviation_from(
    rec: &TrajectoryRecord,
    problem: &ProblemInstance,
    schedule: &StepSchedule,
    n0: usize,
    dt: f64,
) -> Result<Vec<f64>> {
    let n_max = rec.n_max;
    if n0 > n_max {
        return Err(Error::IndexBeyondHorizon { index: n0, horizon: n_max });
    }
    let knots = &schedule.clock_slow()[n0..=n_max];
    let path = integrate_slow_path(problem, &rec.y_at(n0), knots, dt)?;
    let mut dev = vec![0.0; n_max + 1];
    for (i, reference) in path.iter().enumerate() {
        let k = n0 + i;
        let mut acc = 0.0;
        for (j, r) in reference.iter().enumerate() {
            let diff = rec.y_slice(k)[j] - r;
            acc += diff * diff;
        }
        dev[k] = acc.sqrt();
    }
    Ok(dev)
}

/// Level-set occupation flags from `n0` onward, checked at knots and segment
/// midpoints of the linear interpolant; true (vacuously) before `n0`, and
/// monotone false afterwards. Fast flag watches ||x - lambda(y)||^2, slow
/// flag watches ||y - y*||^2, both against the instance's outer level.
pub fn g_flags_from(
    rec: &TrajectoryRecord,
    problem: &ProblemInstance,
    n0: usize,
) -> (Vec<bool>, Vec<bool>) {
    let n_max = rec.n_max;
    let r = problem.level_r;
    let mut g_fast = vec![true; n_max + 1];
    let mut g_slow = vec![true; n_max + 1];
    if n0 > n_max {
        return (g_fast, g_slow);
    }

    let v_fast = |x: &[f64], y: &[f64]| -> f64 {
        let yv = DVector::from_column_slice(y);
        let mut z = DVector::zeros(problem.d);
        problem.lambda_into(&yv, &mut z);
        x.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let v_slow = |y: &[f64]| -> f64 {
        y.iter().zip(problem.y_star.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    };

    g_fast[n0] = v_fast(rec.x_slice(n0), rec.y_slice(n0)) <= r;
    g_slow[n0] = v_slow(rec.y_slice(n0)) <= r;
    let mut xm = vec![0.0; rec.d];
    let mut ym = vec![0.0; rec.s];
    for k in (n0 + 1)..=n_max {
        for (i, m) in xm.iter_mut().enumerate() {
            *m = 0.5 * (rec.x_slice(k - 1)[i] + rec.x_slice(k)[i]);
        }
        for (i, m) in ym.iter_mut().enumerate() {
            *m = 0.5 * (rec.y_slice(k - 1)[i] + rec.y_slice(k)[i]);
        }
        g_fast[k] = g_fast[k - 1]
            && v_fast(&xm, &ym) <= r
            && v_fast(rec.x_slice(k), rec.y_slice(k)) <= r;
        g_slow[k] = g_slow[k - 1] && v_slow(&ym) <= r && v_slow(rec.y_slice(k)) <= r;
    }
    (g_fast, g_slow)
}

fn interpolate_on(flat: &[f64], dim: usize, n_max: usize, clock: &[f64], t: f64) -> Result<DVector<f64>> {
    let hi_t = clock[n_max];
    if !(t >= 0.0 && t <= hi_t) {
        return Err(Error::ClockOutOfRange { t, lo: 0.0, hi: hi_t });
    }
    let row = |k: usize| &flat[k * dim..(k + 1) * dim];
    // partition_point gives the first knot strictly beyond t.
    let j = clock.partition_point(|&c| c <= t);
    if j > n_max {
        // t equals the final knot exactly.
        return Ok(DVector::from_column_slice(row(n_max)));
    }
    let (lo, hi) = (clock[j - 1], clock[j]);
    let theta = if hi > lo { (t - lo) / (hi - lo) } else { 0.0 };
    let (rl, rh) = (row(j - 1), row(j));
    Ok(DVector::from_fn(dim, |i, _| (1.0 - theta) * rl[i] + theta * rh[i]))
}

/// Piecewise-linear fast-clock interpolant of the x iterates.
pub fn interpolate_fast(
    rec: &TrajectoryRecord,
    schedule: &StepSchedule,
    t: f64,
) -> Result<DVector<f64>> {
    interpolate_on(&rec.xs, rec.d, rec.n_max, schedule.clock_fast(), t)
}

/// Piecewise-linear slow-clock interpolant of the y iterates.
pub fn interpolate_slow(
    rec: &TrajectoryRecord,
    schedule: &StepSchedule,
    t: f64,
) -> Result<DVector<f64>> {
    interpolate_on(&rec.ys, rec.s, rec.n_max, schedule.clock_slow(), t)
}

/// Largest observed ratio `||z_{k+1} - z_k|| / (b_k (B_g + ||M2_{k+1}||))`:
/// the equilibrium-map iterates move no faster than the slow iterates do,
/// so this fitted modulus must not exceed the map's Lipschitz constant.
pub fn z_iteration_residual(
    rec: &TrajectoryRecord,
    problem: &ProblemInstance,
    schedule: &StepSchedule,
) -> f64 {
    let b = schedule.b();
    let mut worst = 0.0_f64;
    for k in 0..rec.n_max {
        let dz: f64 = rec
            .z_slice(k + 1)
            .iter()
            .zip(rec.z_slice(k))
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            .sqrt();
        let m2 = crate::linalg::norm2(rec.m2_slice(k));
        let denom = b[k] * (problem.b_g + m2);
        if denom > 0.0 {
            worst = worst.max(dz / denom);
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Fast,
    Slow,
}

/// Flow-transition step and local weight matrices for every schedule index,
/// under frozen generators. Depends only on (problem, schedule, dt), so one
/// cache serves every replication of an experiment.
pub struct PhiOpCache {
    pub step_fast: Vec<DMatrix<f64>>,
    pub weight_fast: Vec<DMatrix<f64>>,
    pub step_slow: Vec<DMatrix<f64>>,
    pub weight_slow: Vec<DMatrix<f64>>,
}

/// Builds the cache. The fast part freezes the x-Jacobian at the equilibrium
/// (valid verbatim when the instance declares that Jacobian constant); the
/// slow part freezes the reduced Jacobian at y*, which the analysis does in
/// all cases.
pub fn build_phi_op_cache(
    problem: &ProblemInstance,
    schedule: &StepSchedule,
    dt: f64,
) -> Result<PhiOpCache> {
    let flow_fast = PhiFlow::fast_at_anchor(problem, &problem.y_star, dt)?;
    let flow_slow = PhiFlow::slow_at_equilibrium(problem, dt)?;
    let n = schedule.n_max();
    let mut cache = PhiOpCache {
        step_fast: Vec::with_capacity(n),
        weight_fast: Vec::with_capacity(n),
        step_slow: Vec::with_capacity(n),
        weight_slow: Vec::with_capacity(n),
    };
    for k in 0..n {
        let a = schedule.a()[k];
        let b = schedule.b()[k];
        cache.step_fast.push(odeflow::phi_tau(flow_fast.generator(), a, dt)?);
        cache.weight_fast.push(odeflow::integrate_phi_weight(flow_fast.generator(), a, dt)?);
        cache.step_slow.push(odeflow::phi_tau(flow_slow.generator(), b, dt)?);
        cache.weight_slow.push(odeflow::integrate_phi_weight(flow_slow.generator(), b, dt)?);
    }
    Ok(cache)
}

/// Flow-weighted martingale sums on both channels for every n in
/// [n0, n_max], stored flat; entry i is the sum at n = n0 + i.
pub struct MartingaleSeries {
    pub d: usize,
    pub s: usize,
    pub n0: usize,
    pub len: usize,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl MartingaleSeries {
    pub fn s1_slice(&self, n: usize) -> &[f64] {
        let i = n - self.n0;
        &self.s1[i * self.d..(i + 1) * self.d]
    }

    pub fn s2_slice(&self, n: usize) -> &[f64] {
        let i = n - self.n0;
        &self.s2[i * self.s..(i + 1) * self.s]
    }

    pub fn s1_norm(&self, n: usize) -> f64 {
        crate::linalg::norm2(self.s1_slice(n))
    }

    pub fn s2_norm(&self, n: usize) -> f64 {
        crate::linalg::norm2(self.s2_slice(n))
    }

    /// sup of ||S1|| over [n0, n].
    pub fn s1_sup(&self, n: usize) -> f64 {
        (self.n0..=n).map(|k| self.s1_norm(k)).fold(0.0, f64::max)
    }
}

/// Computes both series by the exact one-step recurrence
/// `S_{n+1} = Phi(step_n) S_n + W_n M_{n+1}`, which telescopes to the full
/// flow-weighted sum because the frozen generators make transitions depend
/// only on elapsed time.
pub fn martingale_series(
    rec: &TrajectoryRecord,
    cache: &PhiOpCache,
    n0: usize,
) -> Result<MartingaleSeries> {
    if n0 > rec.n_max {
        return Err(Error::IndexBeyondHorizon { index: n0, horizon: rec.n_max });
    }
    let (d, s) = (rec.d, rec.s);
    let len = rec.n_max - n0 + 1;
    let mut out = MartingaleSeries {
        d,
        s,
        n0,
        len,
        s1: Vec::with_capacity(len * d),
        s2: Vec::with_capacity(len * s),
    };
    let mut s1 = DVector::<f64>::zeros(d);
    let mut s2 = DVector::<f64>::zeros(s);
    out.s1.extend_from_slice(s1.as_slice());
    out.s2.extend_from_slice(s2.as_slice());
    for k in n0..rec.n_max {
        s1 = &cache.step_fast[k] * s1 + &cache.weight_fast[k] * rec.m1_at(k);
        s2 = &cache.step_slow[k] * s2 + &cache.weight_slow[k] * rec.m2_at(k);
        out.s1.extend_from_slice(s1.as_slice());
        out.s2.extend_from_slice(s2.as_slice());
    }
    Ok(out)
}

/// Direct evaluation of one flow-weighted sum at a single n, composing
/// per-step transitions right-to-left. Handles state-dependent fast
/// generators (re-linearized at each anchor) and serves as the independent
/// cross-check for the recurrence.
pub fn martingale_sum_direct(
    rec: &TrajectoryRecord,
    problem: &ProblemInstance,
    schedule: &StepSchedule,
    channel: Channel,
    n0: usize,
    n: usize,
    dt: f64,
) -> Result<DVector<f64>> {
    if n > rec.n_max || n0 > n {
        return Err(Error::IndexBeyondHorizon { index: n.max(n0), horizon: rec.n_max });
    }
    let dim = match channel {
        Channel::Fast => rec.d,
        Channel::Slow => rec.s,
    };
    let slow_flow = PhiFlow::slow_at_equilibrium(problem, dt)?;
    let mut acc = DVector::<f64>::zeros(dim);
    let mut suffix = DMatrix::<f64>::identity(dim, dim);
    // Walk k downward keeping suffix = Phi(t_n <- t_{k+1}).
    for k in (n0..n).rev() {
        let (step_len, generator) = match channel {
            Channel::Fast => {
                let z = rec.z_at(k);
                let y = rec.y_at(k);
                (schedule.a()[k], problem.eval_jac_h_x(&z, &y))
            }
            Channel::Slow => (schedule.b()[k], slow_flow.generator().clone()),
        };
        let w = odeflow::integrate_phi_weight(&generator, step_len, dt)?;
        let m = match channel {
            Channel::Fast => rec.m1_at(k),
            Channel::Slow => rec.m2_at(k),
        };
        acc += &suffix * (w * m);
        suffix = suffix * odeflow::phi_tau(&generator, step_len, dt)?;
    }
    Ok(acc)
}

/// Writes the per-iterate table: index, both clocks, iterates, equilibrium
/// map, flow deviations, and the fast occupation flag.
pub fn write_trajectory_csv<W: Write>(
    w: &mut W,
    rec: &TrajectoryRecord,
    schedule: &StepSchedule,
    config_hash: u64,
) -> io::Result<()> {
    writeln!(w, "# config_hash={config_hash:016x}")?;
    let mut header = String::from("k,t_fast,t_slow");
    for label in [("x", rec.d), ("y", rec.s), ("z", rec.d)] {
        if label.1 == 1 {
            header.push_str(&format!(",{}", label.0));
        } else {
            for i in 0..label.1 {
                header.push_str(&format!(",{}{}", label.0, i));
            }
        }
    }
    header.push_str(",dev_fast,dev_slow,G");
    writeln!(w, "{header}")?;
    let tf = schedule.clock_fast();
    let ts = schedule.clock_slow();
    for k in 0..=rec.n_max {
        let mut line = format!("{k},{},{}", tf[k], ts[k]);
        for v in rec.x_slice(k).iter().chain(rec.y_slice(k)).chain(rec.z_slice(k)) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push_str(&format!(
            ",{},{},{}",
            rec.dev_fast[k],
            rec.dev_slow[k],
            u8::from(rec.g_fast[k])
        ));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseKind;
    use crate::problem;
    use crate::schedule::make_constant_schedule;
    use crate::schedule::make_polynomial_schedule;
    use approx::assert_relative_eq;

    fn small_setup() -> (ProblemInstance, StepSchedule, NoiseModel, NoiseModel) {
        let p = problem::linear1d();
        let sched = make_constant_schedule(0.5, 0.25, 20).unwrap();
        let nf = NoiseModel::new(NoiseKind::Laplace, 0.3, 1).unwrap();
        let ns = NoiseModel::new(NoiseKind::Laplace, 0.3, 1).unwrap();
        (p, sched, nf, ns)
    }

    #[test]
    fn first_step_matches_hand_iteration() {
        let (p, sched, nf, ns) = small_setup();
        let x0 = DVector::from_element(1, 2.0);
        let y0 = DVector::from_element(1, 0.0);
        let rec =
            run(&p, &sched, &nf, &ns, &x0, &y0, 9, 0, &SimOptions::default()).unwrap();

        // Replay the same streams by hand: h(2, 0) = -2 and
        // g(2, 0) = -tanh(0) + 0.5 * 2 = 1 (inside the saturation ball).
        let mut sf = RngStream::new(9, 0);
        let mut ss = RngStream::new(9, 1);
        let m1 = nf.sample(&mut sf);
        let m2 = ns.sample(&mut ss);
        let x1 = 2.0 + 0.5 * (-2.0 + m1[0]);
        let y1 = 0.0 + 0.25 * (1.0 + m2[0]);
        assert_eq!(rec.x_slice(1)[0], x1);
        assert_eq!(rec.y_slice(1)[0], y1);
        assert_eq!(rec.m1_slice(0)[0], m1[0]);
        assert_eq!(rec.m2_slice(0)[0], m2[0]);
        assert_eq!(rec.z_slice(1)[0], y1, "equilibrium map is the identity here");
        assert_eq!(rec.dev_fast[1], (x1 - y1).abs());
    }

    #[test]
    fn runs_reproduce_and_replications_differ() {
        let (p, sched, nf, ns) = small_setup();
        let x0 = DVector::from_element(1, 1.0);
        let y0 = DVector::from_element(1, 0.5);
        let o = SimOptions::default();
        let r1 = run(&p, &sched, &nf, &ns, &x0, &y0, 4, 2, &o).unwrap();
        let r2 = run(&p, &sched, &nf, &ns, &x0, &y0, 4, 2, &o).unwrap();
        assert_eq!(r1, r2);
        let r3 = run(&p, &sched, &nf, &ns, &x0, &y0, 4, 3, &o).unwrap();
        assert_ne!(r1, r3);
    }

    #[test]
    fn noiseless_run_tracks_equilibrium_manifold() {
        let p = problem::rot2d();
        let sched = make_polynomial_schedule(0.5, 0.6, 0.2, 0.9, 4000).unwrap();
        let nf = NoiseModel::new(NoiseKind::Laplace, 0.0, 2).unwrap();
        let ns = NoiseModel::new(NoiseKind::Laplace, 0.0, 1).unwrap();
        let y0 = DVector::from_element(1, 1.0);
        let x0 = p.eval_lambda(&y0).unwrap();
        let rec = run(&p, &sched, &nf, &ns, &x0, &y0, 0, 0, &SimOptions::default()).unwrap();
        assert!(rec.dev_fast[4000] < 1e-2, "tracking error {}", rec.dev_fast[4000]);
        // Slow iterate heads for the equilibrium y* = 0.
        assert!(rec.y_slice(4000)[0].abs() < 0.15);
        assert!(rec.g_fast.iter().all(|&g| g));
        assert!(rec.g_slow.iter().all(|&g| g));
    }

    #[test]
    fn unstable_instance_reports_divergence_index() {
        let p = problem::instance_by_name("UNSTABLE").unwrap();
        let sched = make_constant_schedule(0.9, 0.5, 500).unwrap();
        let nf = NoiseModel::new(NoiseKind::Laplace, 0.1, 1).unwrap();
        let ns = NoiseModel::new(NoiseKind::Laplace, 0.1, 1).unwrap();
        let x0 = DVector::from_element(1, 1.0);
        let y0 = DVector::from_element(1, -1.0);
        match run(&p, &sched, &nf, &ns, &x0, &y0, 1, 0, &SimOptions::default()) {
            Err(Error::NonFiniteIterate { index }) => assert!(index > 0 && index <= 500),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn slow_deviation_shrinks_with_time_scale_separation() {
        // Noiseless: the deviation from the reduced flow combines slow-step
        // discretization with the fast iterate's tracking lag, both of order
        // b at fixed a, so shrinking b by 10 should shrink the worst
        // deviation by nearly as much (same slow horizon both times).
        let p = problem::linear1d();
        let nf = NoiseModel::new(NoiseKind::Laplace, 0.0, 1).unwrap();
        let ns = NoiseModel::new(NoiseKind::Laplace, 0.0, 1).unwrap();
        let y0 = DVector::from_element(1, 1.0);
        let x0 = DVector::from_element(1, 1.0);
        let coarse = make_constant_schedule(0.1, 0.01, 2000).unwrap();
        let fine = make_constant_schedule(0.1, 0.001, 20_000).unwrap();
        let o = SimOptions::default();
        let dc = run(&p, &coarse, &nf, &ns, &x0, &y0, 0, 0, &o).unwrap();
        let df = run(&p, &fine, &nf, &ns, &x0, &y0, 0, 0, &o).unwrap();
        let worst_c = dc.dev_slow.iter().copied().fold(0.0, f64::max);
        let worst_f = df.dev_slow.iter().copied().fold(0.0, f64::max);
        assert!(worst_c < 0.1, "coarse deviation {worst_c}");
        assert!(worst_f < worst_c / 5.0, "{worst_f} vs {worst_c}");
    }

    #[test]
    fn interpolants_hit_knots_and_midpoints() {
        let (p, sched, nf, ns) = small_setup();
        let x0 = DVector::from_element(1, 1.0);
        let y0 = DVector::from_element(1, 0.0);
        let rec = run(&p, &sched, &nf, &ns, &x0, &y0, 7, 0, &SimOptions::default()).unwrap();
        let tf = sched.clock_fast();
        let x3 = interpolate_fast(&rec, &sched, tf[3]).unwrap();
        assert_eq!(x3[0], rec.x_slice(3)[0]);
        let mid = interpolate_fast(&rec, &sched, 0.5 * (tf[3] + tf[4])).unwrap();
        assert_relative_eq!(
            mid[0],
            0.5 * (rec.x_slice(3)[0] + rec.x_slice(4)[0]),
            max_relative = 1e-12
        );
        let t_end = tf[rec.n_max];
        let x_end = interpolate_fast(&rec, &sched, t_end).unwrap();
        assert_eq!(x_end[0], rec.x_slice(rec.n_max)[0]);
        assert!(matches!(
            interpolate_fast(&rec, &sched, t_end + 0.1),
            Err(Error::ClockOutOfRange { .. })
        ));
        let y_end = interpolate_slow(&rec, &sched, sched.clock_slow()[rec.n_max]).unwrap();
        assert_eq!(y_end[0], rec.y_slice(rec.n_max)[0]);
    }

    #[test]
    fn occupation_flags_are_monotone_and_fail_under_huge_noise() {
        let p = problem::linear1d();
        let sched = make_constant_schedule(0.5, 0.25, 200).unwrap();
        let nf = NoiseModel::new(NoiseKind::Laplace, 25.0, 1).unwrap();
        let ns = NoiseModel::new(NoiseKind::Laplace, 25.0, 1).unwrap();
        let x0 = DVector::from_element(1, 0.0);
        let y0 = DVector::from_element(1, 0.0);
        let rec = run(&p, &sched, &nf, &ns, &x0, &y0, 21, 0, &SimOptions::default()).unwrap();
        assert!(!rec.g_fast[rec.n_max], "level set should be left under this noise");
        let mut seen_false = false;
        for &g in &rec.g_fast {
            if seen_false {
                assert!(!g, "flag recovered after failing");
            }
            seen_false |= !g;
        }
    }

    #[test]
    fn equilibrium_map_moves_no_faster_than_slow_iterates() {
        let p = problem::rot2d();
        let sched = make_polynomial_schedule(0.5, 0.6, 0.3, 0.9, 2000).unwrap();
        let nf = NoiseModel::new(NoiseKind::Laplace, 0.2, 2).unwrap();
        let ns = NoiseModel::new(NoiseKind::Laplace, 0.2, 1).unwrap();
        let y0 = DVector::from_element(1, 0.5);
        let x0 = p.eval_lambda(&y0).unwrap();
        let rec = run(&p, &sched, &nf, &ns, &x0, &y0, 5, 0, &SimOptions::default()).unwrap();
        let fitted = z_iteration_residual(&rec, &p, &sched);
        assert!(fitted > 0.0);
        assert!(
            fitted <= p.l_lambda * (1.0 + 1e-9),
            "fitted modulus {fitted} exceeds declared {}",
            p.l_lambda
        );
    }

    #[test]
    fn recurrence_and_direct_sums_agree() {
        let p = problem::linear1d();
        let sched = make_polynomial_schedule(0.8, 0.7, 0.5, 0.95, 60).unwrap();
        let nf = NoiseModel::new(NoiseKind::Laplace, 0.5, 1).unwrap();
        let ns = NoiseModel::new(NoiseKind::Laplace, 0.5, 1).unwrap();
        let x0 = DVector::from_element(1, 1.0);
        let y0 = DVector::from_element(1, -0.5);
        let rec = run(&p, &sched, &nf, &ns, &x0, &y0, 17, 0, &SimOptions::default()).unwrap();
        let cache = build_phi_op_cache(&p, &sched, 1e-3).unwrap();
        let n0 = 5;
        let series = martingale_series(&rec, &cache, n0).unwrap();
        for n in [n0, n0 + 1, 30, 60] {
            let direct_f =
                martingale_sum_direct(&rec, &p, &sched, Channel::Fast, n0, n, 1e-3).unwrap();
            let direct_s =
                martingale_sum_direct(&rec, &p, &sched, Channel::Slow, n0, n, 1e-3).unwrap();
            let scale_f = direct_f.norm().max(1e-12);
            let scale_s = direct_s.norm().max(1e-12);
            assert!(
                (direct_f[0] - series.s1_slice(n)[0]).abs() <= 1e-10 * scale_f,
                "fast mismatch at n = {n}"
            );
            assert!(
                (direct_s[0] - series.s2_slice(n)[0]).abs() <= 1e-10 * scale_s,
                "slow mismatch at n = {n}"
            );
        }
    }

    #[test]
    fn two_step_martingale_sum_matches_closed_form() {
        // Constant steps, scalar generator -1: the sum at n = 2 is
        // e^{-a} w m1_1 + w m1_2 with w = 1 - e^{-a}, up to integrator error.
        let p = problem::linear1d();
        let sched = make_constant_schedule(0.5, 0.25, 2).unwrap();
        let nf = NoiseModel::new(NoiseKind::Laplace, 1.0, 1).unwrap();
        let ns = NoiseModel::new(NoiseKind::Laplace, 1.0, 1).unwrap();
        let x0 = DVector::from_element(1, 0.0);
        let y0 = DVector::from_element(1, 0.0);
        let rec = run(&p, &sched, &nf, &ns, &x0, &y0, 23, 0, &SimOptions::default()).unwrap();
        let cache = build_phi_op_cache(&p, &sched, 1e-4).unwrap();
        let series = martingale_series(&rec, &cache, 0).unwrap();
        let w = 1.0 - (-0.5_f64).exp();
        let expect = (-0.5_f64).exp() * w * rec.m1_slice(0)[0] + w * rec.m1_slice(1)[0];
        assert_relative_eq!(series.s1_slice(2)[0], expect, max_relative = 1e-8);
    }

    #[test]
    fn zero_noise_gives_zero_martingale_series() {
        let p = problem::linear1d();
        let sched = make_constant_schedule(0.5, 0.25, 10).unwrap();
        let nf = NoiseModel::new(NoiseKind::Laplace, 0.0, 1).unwrap();
        let ns = NoiseModel::new(NoiseKind::Laplace, 0.0, 1).unwrap();
        let x0 = DVector::from_element(1, 1.0);
        let y0 = DVector::from_element(1, 1.0);
        let rec = run(&p, &sched, &nf, &ns, &x0, &y0, 0, 0, &SimOptions::default()).unwrap();
        let cache = build_phi_op_cache(&p, &sched, 1e-3).unwrap();
        let series = martingale_series(&rec, &cache, 0).unwrap();
        assert_eq!(series.s1_norm(10), 0.0);
        assert_eq!(series.s2_norm(10), 0.0);
    }

    #[test]
    fn trajectory_csv_has_hash_header_and_all_rows() {
        let (p, sched, nf, ns) = small_setup();
        let x0 = DVector::from_element(1, 1.0);
        let y0 = DVector::from_element(1, 0.0);
        let rec = run(&p, &sched, &nf, &ns, &x0, &y0, 3, 0, &SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &rec, &sched, 0xdeadbeef).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# config_hash=00000000deadbeef");
        assert_eq!(lines.next().unwrap(), "k,t_fast,t_slow,x,y,z,dev_fast,dev_slow,G");
        assert_eq!(lines.count(), rec.n_max + 1);
    }
}
