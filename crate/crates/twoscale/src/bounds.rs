//! Finite-time concentration bounds: the step-weighted decay maxima that
//! enter the probability series, the series themselves with certified
//! integral tail bounds where the schedule permits, settling times for
//! initial-condition forgetting, and the pathwise deviation brackets the
//! Monte-Carlo layer checks realized paths against.

use statrs::function::gamma::{gamma, gamma_ur};

use crate::engine::{MartingaleSeries, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::noise::NoiseModel;
use crate::odeflow::DecayEnvelope;
use crate::schedule::{ScheduleKind, StepSchedule, STEP_CEIL};

/// Multiplier applied on top of the worst training ratio when calibrating
/// the aggregate bracket constant; absorbs the sampling error of a finite
/// training set, which would otherwise be overrun by held-out paths with
/// probability near one.
pub const K_AGG_SAFETY: f64 = 1.5;

/// The initial-condition term is considered settled once it is below this
/// fraction of the deviation threshold.
pub const SETTLING_FRACTION: f64 = 0.125;

/// Constants feeding the probability series: a sub-exponential tail
/// certificate shared by both noise channels and the decay rates of the two
/// frozen linearizations.
#[derive(Debug, Clone, Copy)]
pub struct BoundConstants {
    pub c1: f64,
    pub c2: f64,
    pub u_l: f64,
    pub kappa_fast: f64,
    pub kappa_slow: f64,
}

impl BoundConstants {
    /// Combines two channel certificates into one that dominates both.
    pub fn from_models(
        noise_fast: &NoiseModel,
        noise_slow: &NoiseModel,
        kappa_fast: f64,
        kappa_slow: f64,
    ) -> BoundConstants {
        let (c1f, c2f, ulf) = noise_fast.tail_constants();
        let (c1s, c2s, uls) = noise_slow.tail_constants();
        BoundConstants {
            c1: c1f.max(c1s).max(1.0),
            c2: c2f.min(c2s),
            u_l: ulf.max(uls),
            kappa_fast,
            kappa_slow,
        }
    }
}

/// `beta[n] = max_{k in [n0, n-1]} a_k exp(-kappa (t_fast_n - t_fast_{k+1}))`
/// via the running recurrence `beta_{n+1} = max(a_n, exp(-kappa a_n) beta_n)`,
/// which reproduces the window maximum exactly because each step discounts
/// every older candidate by the same factor. Entries at or before `n0` are 0.
pub fn compute_beta(schedule: &StepSchedule, kappa_fast: f64, n0: usize) -> Vec<f64> {
    let a = schedule.a();
    let n_max = schedule.n_max();
    let mut beta = vec![0.0; n_max + 1];
    if n0 >= n_max {
        return beta;
    }
    beta[n0 + 1] = a[n0];
    for n in (n0 + 1)..n_max {
        beta[n + 1] = a[n].max((-kappa_fast * a[n]).exp() * beta[n]);
    }
    beta
}

/// Slow-clock analog with the scale-separation ratios as weights:
/// `gamma[n] = max_k eps_k exp(-kappa (t_slow_n - t_slow_{k+1}))`.
pub fn compute_gamma(schedule: &StepSchedule, kappa_slow: f64, n0: usize) -> Vec<f64> {
    let b = schedule.b();
    let eps = schedule.eps();
    let n_max = schedule.n_max();
    let mut gamma = vec![0.0; n_max + 1];
    if n0 >= n_max {
        return gamma;
    }
    gamma[n0 + 1] = eps[n0];
    for n in (n0 + 1)..n_max {
        gamma[n + 1] = eps[n].max((-kappa_slow * b[n]).exp() * gamma[n]);
    }
    gamma
}

/// Smallest `T` such that the decayed initial deviation
/// `envelope.bound(t_fast_{n0+T} - t_fast_{n0}) * h` has fallen to
/// `SETTLING_FRACTION * eps`. Zero when it already has; an error naming the
/// required clock span when the horizon cannot absorb it.
pub fn settling_time(
    schedule: &StepSchedule,
    n0: usize,
    envelope: &DecayEnvelope,
    h: f64,
    eps: f64,
) -> Result<usize> {
    if !(eps > 0.0) || !(h >= 0.0) {
        return Err(Error::ParameterOutOfRange(format!(
            "settling needs eps > 0 and h >= 0, got eps = {eps}, h = {h}"
        )));
    }
    let target = SETTLING_FRACTION * eps;
    let clock = schedule.clock_fast();
    let t0 = clock[n0.min(schedule.n_max())];
    if n0 > schedule.n_max() {
        return Err(Error::IndexBeyondHorizon { index: n0, horizon: schedule.n_max() });
    }
    for t in 0..=(schedule.n_max() - n0) {
        if envelope.bound(clock[n0 + t] - t0) * h <= target {
            return Ok(t);
        }
    }
    // The span the envelope would need: K e^{-kappa s} h = target.
    let needed = ((envelope.k_coeff * h / target).ln() / envelope.kappa).max(0.0);
    Err(Error::HorizonExceeded {
        target: needed,
        available: schedule.n_max() - n0,
    })
}

/// Upper bound on `sum_{n > n_from} c1 exp(-c (n + shift)^q)` by comparison
/// with the integral of the (decreasing) summand:
/// `(c1 / q) c^{-1/q} Gamma(1/q) Q(1/q, c (n_from + shift)^q)`.
/// Degenerate decay (`c = 0`) yields infinity; an infinite decay constant
/// (noiseless certificates) zeroes every summand.
pub fn series_tail_exp_power(c1: f64, c: f64, q: f64, shift: f64, n_from: usize) -> f64 {
    if !(q > 0.0) || c < 0.0 {
        return f64::INFINITY;
    }
    if c == 0.0 {
        return f64::INFINITY;
    }
    if c == f64::INFINITY {
        return 0.0;
    }
    let inv_q = 1.0 / q;
    let v0 = c * (n_from as f64 + shift).powf(q);
    (c1 * inv_q) * c.powf(-inv_q) * gamma(inv_q) * gamma_ur(inv_q, v0)
}

/// One summand of a probability series: the certificate `c1 exp(-c2 u)`
/// evaluated at threshold `u`, capped at one, and widened to the trivial
/// bound wherever the certificate makes no claim (`u <= u_l`).
pub fn tail_term(c: &BoundConstants, u: f64) -> f64 {
    if !(u > c.u_l) {
        return 1.0;
    }
    (c.c1 * (-c.c2 * u).exp()).min(1.0)
}

/// Either a certified bound on the series mass beyond the horizon, or an
/// honest refusal with the reason the certification failed.
#[derive(Debug, Clone)]
pub enum SeriesTail {
    Analytic(f64),
    Truncated(String),
}

impl SeriesTail {
    pub fn analytic(&self) -> Option<f64> {
        match self {
            SeriesTail::Analytic(v) => Some(*v),
            SeriesTail::Truncated(_) => None,
        }
    }
}

/// Probability-series curves for one (n0, eps) pair. `head_*[n]` is the
/// cumulative deducted mass for window indices through n; the fast variant
/// sums the step, separation, and beta series, and the slow variant adds the
/// gamma series on top.
#[derive(Debug, Clone)]
pub struct TheoremCurves {
    pub n0: usize,
    pub eps: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub head_fast: Vec<f64>,
    pub head_slow: Vec<f64>,
    pub tail_fast: SeriesTail,
    pub tail_slow: SeriesTail,
}

impl TheoremCurves {
    /// Guaranteed mass at horizon n using only the summed head.
    pub fn rhs_fast_at(&self, n: usize) -> f64 {
        (1.0 - self.head_fast[n]).max(0.0)
    }

    pub fn rhs_slow_at(&self, n: usize) -> f64 {
        (1.0 - self.head_slow[n]).max(0.0)
    }

    /// Full-series guarantee: `(rhs, certified)`. When the tail is analytic
    /// the whole series is accounted for and `certified` is true; otherwise
    /// the value is the head-only horizon bound, an over-estimate of the
    /// infinite-window guarantee, and `certified` is false.
    pub fn rhs_fast_total(&self) -> (f64, bool) {
        let n = self.head_fast.len() - 1;
        match &self.tail_fast {
            SeriesTail::Analytic(t) => ((1.0 - self.head_fast[n] - t).max(0.0), true),
            SeriesTail::Truncated(_) => (self.rhs_fast_at(n), false),
        }
    }

    pub fn rhs_slow_total(&self) -> (f64, bool) {
        let n = self.head_slow.len() - 1;
        match &self.tail_slow {
            SeriesTail::Analytic(t) => ((1.0 - self.head_slow[n] - t).max(0.0), true),
            SeriesTail::Truncated(_) => (self.rhs_slow_at(n), false),
        }
    }
}

/// Polynomial-law parameters recovered from the schedule when analytic tail
/// certification is possible at all.
struct PolyLaw {
    a0: f64,
    alpha: f64,
    b0: f64,
    beta_exp: f64,
}

fn poly_law(schedule: &StepSchedule) -> std::result::Result<PolyLaw, String> {
    match schedule.kind() {
        ScheduleKind::Polynomial { a0, alpha, b0, beta } => {
            let n = schedule.n_max();
            if schedule.a()[n] >= STEP_CEIL || schedule.b()[n] >= STEP_CEIL {
                return Err("steps still clipped at the horizon".into());
            }
            Ok(PolyLaw { a0: *a0, alpha: *alpha, b0: *b0, beta_exp: *beta })
        }
        ScheduleKind::ConstantTail { .. } => {
            Err("constant steps never decay, so the series has no finite tail".into())
        }
        ScheduleKind::UserTable => {
            Err("tabulated schedules carry no law beyond the horizon".into())
        }
    }
}

/// Certifies `beta[n] <= a_{n-1}` (resp. `gamma[n] <= eps_{n-1}`) for every n
/// beyond the horizon: finds the index from which the decay factor outruns
/// the weight's polynomial decline, then checks that the surviving early
/// candidates have already been damped below the late branch at the first
/// post-horizon index. Both properties are monotone in n for polynomial
/// laws, so the two checks extend to the whole tail.
fn certify_weight_tail(
    weights: &[f64],
    steps: &[f64],
    clock: &[f64],
    kappa: f64,
    weight_exp: f64,
    n0: usize,
    n_max: usize,
) -> std::result::Result<(), String> {
    if !(kappa > 0.0) {
        return Err("nonpositive decay rate".into());
    }
    let mut k_star = None;
    for k in n0..n_max {
        if kappa * steps[k + 1].min(steps[k]) * (k + 1) as f64 >= weight_exp {
            k_star = Some(k);
            break;
        }
    }
    let Some(k_star) = k_star else {
        return Err("decay never outruns the weight decline within the horizon".into());
    };
    // Candidates older than k_star at the first post-horizon index.
    let t_next = clock[n_max] + steps[n_max];
    let mut early = 0.0_f64;
    for k in n0..k_star {
        early = early.max(weights[k] * (-kappa * (t_next - clock[k + 1])).exp());
    }
    if early > weights[n_max] {
        return Err(format!(
            "early candidates ({early:.3e}) still dominate the late branch ({:.3e}) at the horizon",
            weights[n_max]
        ));
    }
    Ok(())
}

/// Builds the probability-series curves for threshold `eps` over the window
/// starting at `n0`. Each summand is a tail certificate evaluated at that
/// index's threshold; sub-unit thresholds use the quadratic regime for the
/// weighted-maximum series.
pub fn theorem_bounds(
    schedule: &StepSchedule,
    n0: usize,
    eps: f64,
    c: &BoundConstants,
) -> Result<TheoremCurves> {
    let n_max = schedule.n_max();
    if n0 >= n_max {
        return Err(Error::IndexBeyondHorizon { index: n0, horizon: n_max });
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::ParameterOutOfRange(format!("threshold must be >= 0, got {eps}")));
    }
    let p = if eps <= 1.0 { 2.0 } else { 1.0 };
    let beta = compute_beta(schedule, c.kappa_fast, n0);
    let gamma = compute_gamma(schedule, c.kappa_slow, n0);
    let a = schedule.a();
    let eps_seq = schedule.eps();

    let u_step = |n: usize| (eps / a[n]).sqrt();
    let u_sep = |n: usize| (eps / eps_seq[n]).sqrt();
    let u_weighted = |w: f64| if w > 0.0 { eps.powf(p) / w } else { f64::INFINITY };

    let mut head_fast = vec![0.0; n_max + 1];
    let mut head_slow = vec![0.0; n_max + 1];
    for n in (n0 + 1)..=n_max {
        let fast_terms =
            tail_term(c, u_step(n)) + tail_term(c, u_sep(n)) + tail_term(c, u_weighted(beta[n]));
        head_fast[n] = head_fast[n - 1] + fast_terms;
        head_slow[n] = head_slow[n - 1] + fast_terms + tail_term(c, u_weighted(gamma[n]));
    }

    let (tail_fast, tail_slow) = match poly_law(schedule) {
        Err(reason) => (
            SeriesTail::Truncated(reason.clone()),
            SeriesTail::Truncated(reason),
        ),
        Ok(law) => {
            if eps == 0.0 {
                // Every certificate is vacuous at threshold zero.
                (SeriesTail::Analytic(f64::INFINITY), SeriesTail::Analytic(f64::INFINITY))
            } else {
                let tail = assemble_polynomial_tails(schedule, n0, eps, p, c, &law);
                match tail {
                    Ok((tf, ts)) => (SeriesTail::Analytic(tf), SeriesTail::Analytic(ts)),
                    Err(reason) => (
                        SeriesTail::Truncated(reason.clone()),
                        SeriesTail::Truncated(reason),
                    ),
                }
            }
        }
    };

    Ok(TheoremCurves { n0, eps, beta, gamma, head_fast, head_slow, tail_fast, tail_slow })
}

fn assemble_polynomial_tails(
    schedule: &StepSchedule,
    n0: usize,
    eps: f64,
    p: f64,
    c: &BoundConstants,
    law: &PolyLaw,
) -> std::result::Result<(f64, f64), String> {
    let n_max = schedule.n_max();
    let eps0 = law.b0 / law.a0;
    let q_sep = (law.beta_exp - law.alpha) / 2.0;

    // Thresholds grow with n; the certificate must already apply at the
    // first tail index for each series.
    let u_checks = [
        (eps / (law.a0 * ((n_max + 2) as f64).powf(-law.alpha))).sqrt(),
        (eps / (eps0 * ((n_max + 2) as f64).powf(-(law.beta_exp - law.alpha)))).sqrt(),
        eps.powf(p) / (law.a0 * ((n_max + 1) as f64).powf(-law.alpha)),
        eps.powf(p) / (eps0 * ((n_max + 1) as f64).powf(-(law.beta_exp - law.alpha))),
    ];
    if u_checks.iter().any(|&u| u <= c.u_l) {
        return Err("tail thresholds start below the certificate floor".into());
    }

    certify_weight_tail(
        schedule.a(),
        schedule.a(),
        schedule.clock_fast(),
        c.kappa_fast,
        law.alpha,
        n0,
        n_max,
    )
    .map_err(|e| format!("fast weighted-maximum series: {e}"))?;
    certify_weight_tail(
        schedule.eps(),
        schedule.b(),
        schedule.clock_slow(),
        c.kappa_slow,
        law.beta_exp - law.alpha,
        n0,
        n_max,
    )
    .map_err(|e| format!("slow weighted-maximum series: {e}"))?;

    let sqrt_eps = eps.sqrt();
    let tail_step = series_tail_exp_power(
        c.c1,
        c.c2 * sqrt_eps / law.a0.sqrt(),
        law.alpha / 2.0,
        1.0,
        n_max,
    );
    let tail_sep =
        series_tail_exp_power(c.c1, c.c2 * sqrt_eps / eps0.sqrt(), q_sep, 1.0, n_max);
    let tail_beta =
        series_tail_exp_power(c.c1, c.c2 * eps.powf(p) / law.a0, law.alpha, 0.0, n_max);
    let tail_gamma = series_tail_exp_power(
        c.c1,
        c.c2 * eps.powf(p) / eps0,
        law.beta_exp - law.alpha,
        0.0,
        n_max,
    );
    let fast = tail_step + tail_sep + tail_beta;
    Ok((fast, fast + tail_gamma))
}

/// Per-index table of the series ingredients and the head-only guarantees:
/// `n,beta_n,gamma_n,eps_n,rhs_fast,rhs_slow` for every window index.
pub fn write_curves_csv<W: std::io::Write>(
    w: &mut W,
    schedule: &StepSchedule,
    curves: &TheoremCurves,
    config_hash: u64,
) -> std::io::Result<()> {
    writeln!(w, "# config_hash={config_hash:016x}")?;
    writeln!(w, "n,beta_n,gamma_n,eps_n,rhs_fast,rhs_slow")?;
    let eps_seq = schedule.eps();
    for n in (curves.n0 + 1)..=schedule.n_max() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            n,
            curves.beta[n],
            curves.gamma[n],
            eps_seq[n],
            curves.rhs_fast_at(n),
            curves.rhs_slow_at(n)
        )?;
    }
    Ok(())
}

/// Realized per-index deviation brackets built from one path: the
/// flow-weighted martingale sums, the decayed initial deviation, and the
/// running step/noise suprema over the window. The aggregate proportionality
/// constant is NOT included; it is calibrated separately and multiplies the
/// whole bracket. Entries before `n0` are infinite (no claim is made there).
#[derive(Debug, Clone)]
pub struct BracketCurves {
    pub n0: usize,
    pub fast: Vec<f64>,
    pub slow: Vec<f64>,
}

pub fn bracket_curves(
    rec: &TrajectoryRecord,
    series: &MartingaleSeries,
    schedule: &StepSchedule,
    env_fast: &DecayEnvelope,
    env_slow: &DecayEnvelope,
    n0: usize,
) -> BracketCurves {
    let n_max = rec.n_max;
    let tf = schedule.clock_fast();
    let ts = schedule.clock_slow();
    let a = schedule.a();
    let eps_seq = schedule.eps();
    let h0 = rec.dev_fast[n0];
    let slow_ref_gap = rec.dev_slow[n0];

    let mut fast = vec![f64::INFINITY; n_max + 1];
    let mut slow = vec![f64::INFINITY; n_max + 1];
    let mut sup_a = 0.0_f64;
    let mut sup_a_m1 = 0.0_f64;
    let mut sup_eps = 0.0_f64;
    let mut sup_eps_m2 = 0.0_f64;
    let mut sup_s1 = series.s1_norm(n0);

    for n in n0..=n_max {
        if n > n0 {
            let k = n - 1;
            let m1 = crate::linalg::norm2(rec.m1_slice(k));
            let m2 = crate::linalg::norm2(rec.m2_slice(k));
            sup_a = sup_a.max(a[k]);
            sup_a_m1 = sup_a_m1.max(a[k] * m1 * m1);
            sup_eps = sup_eps.max(eps_seq[k]);
            sup_eps_m2 = sup_eps_m2.max(eps_seq[k] * m2 * m2);
        }
        sup_s1 = sup_s1.max(series.s1_norm(n));
        let noise_load = sup_a + sup_a_m1 + sup_eps + sup_eps_m2;
        fast[n] = series.s1_norm(n) + env_fast.bound(tf[n] - tf[n0]) * h0 + noise_load;
        slow[n] = series.s2_norm(n)
            + sup_s1
            + noise_load
            + env_slow.bound(ts[n] - ts[n0]) * slow_ref_gap
            + sup_eps * h0;
    }
    BracketCurves { n0, fast, slow }
}

/// Largest deviation-to-bracket ratio over the window. A zero bracket with a
/// zero deviation contributes nothing; a zero bracket against a positive
/// deviation is an infinite ratio.
pub fn sup_ratio(dev: &[f64], bracket: &[f64], n0: usize) -> f64 {
    let mut worst = 0.0_f64;
    for n in n0..dev.len().min(bracket.len()) {
        if bracket[n] > 0.0 {
            worst = worst.max(dev[n] / bracket[n]);
        } else if dev[n] > 0.0 {
            return f64::INFINITY;
        }
    }
    worst
}

/// Aggregate bracket constant from training ratios: the observed maximum
/// widened by `K_AGG_SAFETY`.
pub fn calibrate_k_agg(training_sup_ratios: &[f64]) -> Result<f64> {
    if training_sup_ratios.is_empty() {
        return Err(Error::ParameterOutOfRange("calibration needs at least one ratio".into()));
    }
    let worst = training_sup_ratios.iter().copied().fold(0.0, f64::max);
    if !worst.is_finite() {
        return Err(Error::ParameterOutOfRange(
            "calibration ratios contain a non-finite value".into(),
        ));
    }
    Ok(worst * K_AGG_SAFETY)
}
