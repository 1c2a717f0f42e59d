//! Step-size schedules for the coupled iteration and the two clocks they induce.
//!
//! A schedule fixes sequences `a_n` (fast) and `b_n` (slow) together with the
//! cumulative clocks `t~_n = sum_{k<n} a_k` and `t^_n = sum_{k<n} b_k`. The
//! usable regime needs four conditions: both step sums diverge, the squared
//! step sums converge, the ratio `eps_n = b_n / a_n` tends to zero, and
//! `0 < b_n <= a_n < 1` throughout.

use crate::error::{Error, Result};

/// Steps are clipped strictly below 1 so `1 - a_n` never vanishes.
pub const STEP_CEIL: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockKind {
    Fast,
    Slow,
}

/// How the step sequences were generated. Carried along for validation
/// evidence and for the analytic series tails in the bound evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// `a_n = min(a0 (n+1)^-alpha, ceil)`, `b_n = min(b0 (n+1)^-beta, a_n)`.
    Polynomial { a0: f64, alpha: f64, b0: f64, beta: f64 },
    /// Constant sequences `a_n = a0`, `b_n = b0`.
    ConstantTail { a0: f64, b0: f64 },
    /// Loaded from an explicit table; no generating law is assumed.
    UserTable,
}

#[derive(Debug, Clone)]
pub struct StepSchedule {
    kind: ScheduleKind,
    n_max: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    eps: Vec<f64>,
    t_fast: Vec<f64>,
    t_slow: Vec<f64>,
}

/// Compensated (Kahan) accumulator; keeps clock round-off at O(eps) per entry
/// instead of O(n eps).
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub(crate) fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum
    }
}

fn check_finite_positive(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::ParameterOutOfRange(format!(
            "{name} must be finite and positive, got {v}"
        )));
    }
    Ok(())
}

/// Builds the polynomial schedule used throughout:
/// `a_n = min(a0/(n+1)^alpha, 1-1e-9)`, `b_n = min(b0/(n+1)^beta, a_n)`.
///
/// Requires `alpha` in (0.5, 1], `beta` in (alpha, 1], and the clipped initial
/// steps ordered `b_0 <= a_0`.
pub fn make_polynomial_schedule(
    a0: f64,
    alpha: f64,
    b0: f64,
    beta: f64,
    n_max: usize,
) -> Result<StepSchedule> {
    check_finite_positive("a0", a0)?;
    check_finite_positive("b0", b0)?;
    if !(alpha > 0.5 && alpha <= 1.0) {
        return Err(Error::ParameterOutOfRange(format!(
            "alpha must lie in (0.5, 1], got {alpha}"
        )));
    }
    if !(beta > alpha && beta <= 1.0) {
        return Err(Error::ParameterOutOfRange(format!(
            "beta must lie in (alpha, 1] = ({alpha}, 1], got {beta}"
        )));
    }
    if b0.min(STEP_CEIL) > a0.min(STEP_CEIL) {
        return Err(Error::ParameterOutOfRange(format!(
            "initial slow step {b0} exceeds initial fast step {a0}"
        )));
    }
    StepSchedule::polynomial_raw(a0, alpha, b0, beta, n_max)
}

/// Constant steps `a_n = a`, `b_n = b`. Violates square-summability and
/// `eps_n -> 0` by construction; validation reports that honestly. Useful for
/// closed-form checks of clocks, weights, and the decay recurrences.
pub fn make_constant_schedule(a: f64, b: f64, n_max: usize) -> Result<StepSchedule> {
    check_finite_positive("a", a)?;
    check_finite_positive("b", b)?;
    if a >= 1.0 || b > a {
        return Err(Error::ParameterOutOfRange(format!(
            "constant steps need 0 < b <= a < 1, got a = {a}, b = {b}"
        )));
    }
    if n_max == 0 {
        return Err(Error::ParameterOutOfRange("n_max must be at least 1".into()));
    }
    let a_seq = vec![a; n_max + 1];
    let b_seq = vec![b; n_max + 1];
    Ok(StepSchedule::from_sequences(
        ScheduleKind::ConstantTail { a0: a, b0: b },
        a_seq,
        b_seq,
    ))
}

impl StepSchedule {
    /// Polynomial law without the exponent-range guard. Only positivity is
    /// enforced; exists so validation can be exercised on out-of-regime
    /// exponents (e.g. alpha = 0.4, or alpha = beta). Prefer
    /// [`make_polynomial_schedule`].
    pub fn polynomial_raw(
        a0: f64,
        alpha: f64,
        b0: f64,
        beta: f64,
        n_max: usize,
    ) -> Result<StepSchedule> {
        check_finite_positive("a0", a0)?;
        check_finite_positive("b0", b0)?;
        check_finite_positive("alpha", alpha)?;
        check_finite_positive("beta", beta)?;
        if n_max == 0 {
            return Err(Error::ParameterOutOfRange("n_max must be at least 1".into()));
        }
        let mut a = Vec::with_capacity(n_max + 1);
        let mut b = Vec::with_capacity(n_max + 1);
        for n in 0..=n_max {
            let np1 = (n + 1) as f64;
            let an = (a0 * np1.powf(-alpha)).min(STEP_CEIL);
            let bn = (b0 * np1.powf(-beta)).min(an);
            a.push(an);
            b.push(bn);
        }
        Ok(StepSchedule::from_sequences(
            ScheduleKind::Polynomial { a0, alpha, b0, beta },
            a,
            b,
        ))
    }

    /// Builds a schedule from explicit `(n, a_n, b_n)` rows, indexed
    /// contiguously from 0. Each row must satisfy `0 < b <= a < 1`.
    pub fn from_table(rows: &[(usize, f64, f64)]) -> Result<StepSchedule> {
        if rows.len() < 2 {
            return Err(Error::ParameterOutOfRange(
                "schedule table needs at least rows n = 0 and n = 1".into(),
            ));
        }
        let mut a = Vec::with_capacity(rows.len());
        let mut b = Vec::with_capacity(rows.len());
        for (i, &(n, an, bn)) in rows.iter().enumerate() {
            if n != i {
                return Err(Error::ParameterOutOfRange(format!(
                    "schedule table row {i} has index {n}; indices must be contiguous from 0"
                )));
            }
            if !(an.is_finite() && bn.is_finite() && bn > 0.0 && bn <= an && an < 1.0) {
                return Err(Error::ParameterOutOfRange(format!(
                    "schedule table row {i}: need 0 < b <= a < 1, got a = {an}, b = {bn}"
                )));
            }
            a.push(an);
            b.push(bn);
        }
        Ok(StepSchedule::from_sequences(ScheduleKind::UserTable, a, b))
    }

    /// Parses the CSV table format: header `n,a,b`, then one row per index.
    pub fn from_csv_str(text: &str) -> Result<StepSchedule> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::ParameterOutOfRange("empty schedule CSV".into()))?;
        let normalized: String = header.split(',').map(|f| f.trim()).collect::<Vec<_>>().join(",");
        if normalized != "n,a,b" {
            return Err(Error::ParameterOutOfRange(format!(
                "schedule CSV header must be `n,a,b`, got `{header}`"
            )));
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
            if fields.len() != 3 {
                return Err(Error::ParameterOutOfRange(format!(
                    "schedule CSV line {}: expected 3 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let parse = |what: &str, s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| {
                    Error::ParameterOutOfRange(format!(
                        "schedule CSV line {}: bad {what} value `{s}`",
                        lineno + 2
                    ))
                })
            };
            let n = fields[0].parse::<usize>().map_err(|_| {
                Error::ParameterOutOfRange(format!(
                    "schedule CSV line {}: bad index `{}`",
                    lineno + 2,
                    fields[0]
                ))
            })?;
            rows.push((n, parse("a", fields[1])?, parse("b", fields[2])?));
        }
        StepSchedule::from_table(&rows)
    }

    pub fn from_csv_path(path: &std::path::Path) -> Result<StepSchedule> {
        let text = std::fs::read_to_string(path)?;
        StepSchedule::from_csv_str(&text)
    }

    fn from_sequences(kind: ScheduleKind, a: Vec<f64>, b: Vec<f64>) -> StepSchedule {
        debug_assert_eq!(a.len(), b.len());
        let n_max = a.len() - 1;
        let eps: Vec<f64> = a.iter().zip(&b).map(|(&an, &bn)| bn / an).collect();
        let mut t_fast = Vec::with_capacity(n_max + 1);
        let mut t_slow = Vec::with_capacity(n_max + 1);
        let mut acc_f = KahanSum::default();
        let mut acc_s = KahanSum::default();
        t_fast.push(0.0);
        t_slow.push(0.0);
        for n in 0..n_max {
            acc_f.add(a[n]);
            acc_s.add(b[n]);
            t_fast.push(acc_f.value());
            t_slow.push(acc_s.value());
        }
        StepSchedule { kind, n_max, a, b, eps, t_fast, t_slow }
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    /// Horizon: step sequences are defined for `n <= n_max`, clocks likewise.
    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// `eps_n = b_n / a_n`.
    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    /// Cumulative clock `t~_n` (fast) or `t^_n` (slow) for `n <= n_max`.
    pub fn clock(&self, kind: ClockKind, n: usize) -> Result<f64> {
        if n > self.n_max {
            return Err(Error::IndexBeyondHorizon { index: n, horizon: self.n_max });
        }
        Ok(match kind {
            ClockKind::Fast => self.t_fast[n],
            ClockKind::Slow => self.t_slow[n],
        })
    }

    pub fn clock_fast(&self) -> &[f64] {
        &self.t_fast
    }

    pub fn clock_slow(&self) -> &[f64] {
        &self.t_slow
    }

    /// Smallest fast step over the horizon; flow integrators must resolve it.
    pub fn min_step(&self) -> f64 {
        self.a.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionStatus {
    Pass,
    Fail,
    /// Numeric evidence only; the property concerns the infinite tail and the
    /// generating law is unknown (user tables).
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub name: &'static str,
    pub status: ConditionStatus,
    pub evidence: String,
}

/// Validation verdicts for the four usability conditions.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub conditions: Vec<ConditionReport>,
}

impl ValidationReport {
    pub fn all_satisfied(&self) -> bool {
        self.conditions.iter().all(|c| c.status == ConditionStatus::Pass)
    }

    pub fn summary(&self) -> String {
        self.conditions
            .iter()
            .map(|c| {
                format!(
                    "{}: {} ({})",
                    c.name,
                    match c.status {
                        ConditionStatus::Pass => "pass",
                        ConditionStatus::Fail => "FAIL",
                        ConditionStatus::Inconclusive => "inconclusive",
                    },
                    c.evidence
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Checks the four step-size conditions, analytically where the generating law
/// allows it and numerically otherwise.
pub fn validate_schedule(s: &StepSchedule) -> ValidationReport {
    let n_max = s.n_max();
    let sum_a = s.t_fast[n_max] + s.a[n_max];
    let sum_sq: f64 = s.a.iter().zip(&s.b).map(|(&a, &b)| a * a + b * b).sum();
    let tail_start = n_max - n_max / 10;
    let eps_tail_max = s.eps[tail_start..].iter().copied().fold(0.0_f64, f64::max);

    let (div, sq, eps) = match s.kind {
        ScheduleKind::Polynomial { a0, alpha, b0, beta } => {
            let div = ConditionReport {
                name: "sum a_n diverges",
                status: if alpha <= 1.0 { ConditionStatus::Pass } else { ConditionStatus::Fail },
                evidence: format!("alpha = {alpha} (diverges iff <= 1); partial sum {sum_a:.6}"),
            };
            let sq_ok = 2.0 * alpha > 1.0 && 2.0 * beta > 1.0;
            let sq = ConditionReport {
                name: "sum a_n^2 + b_n^2 converges",
                status: if sq_ok { ConditionStatus::Pass } else { ConditionStatus::Fail },
                evidence: format!(
                    "2*alpha = {}, 2*beta = {} (converges iff both > 1); partial sum {sum_sq:.6}",
                    2.0 * alpha,
                    2.0 * beta
                ),
            };
            let _ = (a0, b0);
            let eps = ConditionReport {
                name: "eps_n -> 0",
                status: if beta > alpha { ConditionStatus::Pass } else { ConditionStatus::Fail },
                evidence: format!(
                    "beta - alpha = {}; max eps over last decile {eps_tail_max:.6}",
                    beta - alpha
                ),
            };
            (div, sq, eps)
        }
        ScheduleKind::ConstantTail { a0, b0 } => {
            let div = ConditionReport {
                name: "sum a_n diverges",
                status: ConditionStatus::Pass,
                evidence: format!("constant step {a0}; partial sum grows linearly ({sum_a:.6})"),
            };
            let sq = ConditionReport {
                name: "sum a_n^2 + b_n^2 converges",
                status: ConditionStatus::Fail,
                evidence: format!("constant terms {a0}^2 + {b0}^2 do not vanish"),
            };
            let eps = ConditionReport {
                name: "eps_n -> 0",
                status: ConditionStatus::Fail,
                evidence: format!("eps_n constant at {:.6}", b0 / a0),
            };
            (div, sq, eps)
        }
        ScheduleKind::UserTable => {
            let div = ConditionReport {
                name: "sum a_n diverges",
                status: ConditionStatus::Inconclusive,
                evidence: format!(
                    "table of {} steps; partial sum {sum_a:.6}, last step {:.3e}",
                    n_max + 1,
                    s.a[n_max]
                ),
            };
            let sq = ConditionReport {
                name: "sum a_n^2 + b_n^2 converges",
                status: ConditionStatus::Inconclusive,
                evidence: format!(
                    "partial sum {sum_sq:.6}, last term {:.3e}",
                    s.a[n_max] * s.a[n_max] + s.b[n_max] * s.b[n_max]
                ),
            };
            let eps = ConditionReport {
                name: "eps_n -> 0",
                status: ConditionStatus::Inconclusive,
                evidence: format!("max eps over last decile {eps_tail_max:.6}"),
            };
            (div, sq, eps)
        }
    };

    let ordering_ok = s
        .a
        .iter()
        .zip(&s.b)
        .all(|(&a, &b)| b > 0.0 && b <= a && a < 1.0);
    let ordering = ConditionReport {
        name: "0 < b_n <= a_n < 1",
        status: if ordering_ok { ConditionStatus::Pass } else { ConditionStatus::Fail },
        evidence: format!(
            "min b {:.3e}, max a {:.9}",
            s.b.iter().copied().fold(f64::INFINITY, f64::min),
            s.a.iter().copied().fold(0.0_f64, f64::max)
        ),
    };

    ValidationReport { conditions: vec![div, sq, eps, ordering] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Double-double accumulation: error-free transform per add keeps ~1e-30
    /// accuracy, an independent high-precision route for clock checks.
    fn dd_sum(terms: impl Iterator<Item = f64>) -> f64 {
        let (mut hi, mut lo) = (0.0_f64, 0.0_f64);
        for x in terms {
            let s = hi + x;
            let bb = s - hi;
            let err = (hi - (s - bb)) + (x - bb);
            hi = s;
            lo += err;
        }
        hi + lo
    }

    #[test]
    fn polynomial_steps_follow_the_law() {
        let s = make_polynomial_schedule(1.0, 0.75, 0.9, 1.0, 100).unwrap();
        let a10 = 11.0_f64.powf(-0.75);
        let b10 = 0.9 / 11.0;
        assert_relative_eq!(s.a()[10], a10, max_relative = 1e-14);
        assert_relative_eq!(s.b()[10], b10, max_relative = 1e-14);
        assert_relative_eq!(s.eps()[10], b10 / a10, max_relative = 1e-14);
        assert!((s.a()[10] - 0.16556).abs() < 5e-5);
        assert!((s.b()[10] - 0.081818).abs() < 5e-6);
        assert!((s.eps()[10] - 0.49419).abs() < 5e-5);
    }

    #[test]
    fn polynomial_rejects_bad_exponents() {
        assert!(matches!(
            make_polynomial_schedule(1.0, 0.8, 1.0, 0.7, 10),
            Err(Error::ParameterOutOfRange(_))
        ));
        assert!(matches!(
            make_polynomial_schedule(1.0, 0.5, 1.0, 0.9, 10),
            Err(Error::ParameterOutOfRange(_))
        ));
        assert!(matches!(
            make_polynomial_schedule(1.0, 0.6, 1.0, 1.2, 10),
            Err(Error::ParameterOutOfRange(_))
        ));
        assert!(matches!(
            make_polynomial_schedule(0.5, 0.6, 0.9, 0.9, 10),
            Err(Error::ParameterOutOfRange(_))
        ));
    }

    #[test]
    fn large_initial_step_is_clipped_below_one() {
        let s = make_polynomial_schedule(5.0, 0.6, 5.0, 0.9, 10).unwrap();
        assert_eq!(s.a()[0], STEP_CEIL);
        assert_eq!(s.b()[0], STEP_CEIL);
        assert!(s.a().iter().all(|&a| a < 1.0));
    }

    #[test]
    fn clock_matches_high_precision_partial_sums() {
        let s = make_polynomial_schedule(1.0, 0.6, 1.0, 0.9, 1000).unwrap();
        let t100 = s.clock(ClockKind::Fast, 100).unwrap();
        // Oracle sums the realized steps (a_0 sits at the ceiling here), so
        // this isolates the accumulation error alone.
        let oracle = dd_sum(s.a()[..100].iter().copied());
        assert!((t100 - oracle).abs() <= 1e-12 * oracle.max(1.0));
        assert!((t100 - 13.853).abs() < 0.01);

        let t_slow = s.clock(ClockKind::Slow, 1000).unwrap();
        let oracle_slow = dd_sum(s.b()[..1000].iter().copied());
        assert!((t_slow - oracle_slow).abs() <= 1e-12 * oracle_slow.max(1.0));
    }

    #[test]
    fn clock_increments_recover_steps() {
        let s = make_polynomial_schedule(1.0, 0.6, 1.0, 0.9, 5000).unwrap();
        for n in [0usize, 1, 7, 99, 1234, 4999] {
            let d = s.clock(ClockKind::Fast, n + 1).unwrap() - s.clock(ClockKind::Fast, n).unwrap();
            let t = s.clock(ClockKind::Fast, n + 1).unwrap();
            assert!((d - s.a()[n]).abs() <= 1e-12 * t.max(1.0), "n = {n}");
        }
    }

    #[test]
    fn clock_rejects_index_beyond_horizon() {
        let s = make_polynomial_schedule(1.0, 0.6, 1.0, 0.9, 50).unwrap();
        assert!(s.clock(ClockKind::Fast, 50).is_ok());
        assert!(matches!(
            s.clock(ClockKind::Fast, 51),
            Err(Error::IndexBeyondHorizon { index: 51, horizon: 50 })
        ));
    }

    #[test]
    fn validation_passes_for_in_regime_polynomial() {
        let s = make_polynomial_schedule(1.0, 0.6, 1.0, 0.9, 10_000).unwrap();
        let report = validate_schedule(&s);
        assert!(report.all_satisfied(), "{}", report.summary());
    }

    #[test]
    fn validation_flags_non_square_summable_steps() {
        let s = StepSchedule::polynomial_raw(1.0, 0.4, 1.0, 0.45, 100).unwrap();
        let report = validate_schedule(&s);
        assert_eq!(report.conditions[1].status, ConditionStatus::Fail);
    }

    #[test]
    fn validation_flags_equal_time_scales() {
        let s = StepSchedule::polynomial_raw(1.0, 1.0, 1.0, 1.0, 100).unwrap();
        let report = validate_schedule(&s);
        assert_eq!(report.conditions[2].status, ConditionStatus::Fail);
        assert!(s.eps().iter().all(|&e| e == 1.0));
    }

    #[test]
    fn validation_reports_constant_schedule_honestly() {
        let s = make_constant_schedule(0.1, 0.05, 100).unwrap();
        let report = validate_schedule(&s);
        assert_eq!(report.conditions[0].status, ConditionStatus::Pass);
        assert_eq!(report.conditions[1].status, ConditionStatus::Fail);
        assert_eq!(report.conditions[2].status, ConditionStatus::Fail);
        assert_eq!(report.conditions[3].status, ConditionStatus::Pass);
    }

    #[test]
    fn csv_table_round_trips() {
        let text = "n,a,b\n0,0.5,0.25\n1,0.4,0.2\n2,0.3,0.15\n";
        let s = StepSchedule::from_csv_str(text).unwrap();
        assert_eq!(s.n_max(), 2);
        assert_eq!(s.a(), &[0.5, 0.4, 0.3]);
        assert_eq!(s.b(), &[0.25, 0.2, 0.15]);
        assert_eq!(s.clock(ClockKind::Fast, 2).unwrap(), 0.9);
        assert!(matches!(validate_schedule(&s).conditions[0].status, ConditionStatus::Inconclusive));
    }

    #[test]
    fn csv_table_rejects_bad_input() {
        assert!(StepSchedule::from_csv_str("x,y,z\n0,0.5,0.25\n").is_err());
        assert!(StepSchedule::from_csv_str("n,a,b\n0,0.5,0.6\n1,0.4,0.2\n").is_err());
        assert!(StepSchedule::from_csv_str("n,a,b\n0,0.5,0.25\n2,0.4,0.2\n").is_err());
        assert!(StepSchedule::from_csv_str("n,a,b\n0,1.5,0.2\n1,0.4,0.2\n").is_err());
    }
}
