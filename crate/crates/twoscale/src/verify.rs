//! Monte-Carlo measurement of the exceedance probabilities the
//! concentration series bound: conditioned replications, windowed deviation
//! suprema for both channels, Wilson intervals, and per-cell verdicts
//! against the computed allowances.

use std::fmt;
use std::io::{self, Write};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::bounds::{self, BoundConstants};
use crate::engine::{self, Channel, SimOptions};
use crate::error::{Error, Result};
use crate::noise::NoiseModel;
use crate::odeflow::{fit_decay_envelope, PhiFlow, DEFAULT_DT};
use crate::problem::ProblemInstance;
use crate::schedule::StepSchedule;

/// Two-sided 95% normal quantile used for the Wilson intervals.
pub const Z_95: f64 = 1.959964;

/// Span and resolution for the decay-envelope fits backing settling times
/// and series constants.
pub const ENVELOPE_SPAN: f64 = 10.0;
pub const ENVELOPE_GRID: usize = 201;

/// Hard ceiling on sweep size; grids are meant for desk-scale tables.
pub const SWEEP_CELL_LIMIT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Consistent,
    Inconclusive,
    Violation,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Consistent => "CONSISTENT",
            Verdict::Inconclusive => "INCONCLUSIVE",
            Verdict::Violation => "VIOLATION",
        })
    }
}

/// Wilson score interval for a binomial proportion; `(0, 1)` when there are
/// no trials.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let den = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / den;
    let half = (z / den) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Start used when a config gives none: the slow variable displaced from its
/// rest point along the diagonal, the fast variable placed on the manifold.
pub fn default_start(p: &ProblemInstance) -> (DVector<f64>, DVector<f64>) {
    let offset = 0.5 / (p.s as f64).sqrt();
    let y0 = DVector::from_fn(p.s, |i, _| p.y_star[i] + offset);
    let mut x0 = DVector::zeros(p.d);
    p.lambda_into(&y0, &mut x0);
    (x0, y0)
}

/// Everything one experiment needs. Replication `r` of a plan always draws
/// from streams `(seed, 2r)` and `(seed, 2r+1)`, so cells and reruns are
/// independently reproducible.
pub struct ExperimentPlan<'a> {
    pub problem: &'a ProblemInstance,
    pub schedule: &'a StepSchedule,
    pub noise_fast: &'a NoiseModel,
    pub noise_slow: &'a NoiseModel,
    pub x0: DVector<f64>,
    pub y0: DVector<f64>,
    pub replications: usize,
    pub eps_grid: Vec<f64>,
    pub n0_grid: Vec<usize>,
    pub seed: u64,
    /// Conditioning-ball radius around the equilibrium pair.
    pub r_b: f64,
    pub dt: f64,
    /// Series constants to test instead of the certificate-derived ones.
    pub constants_override: Option<BoundConstants>,
}

impl<'a> ExperimentPlan<'a> {
    pub fn new(
        problem: &'a ProblemInstance,
        schedule: &'a StepSchedule,
        noise_fast: &'a NoiseModel,
        noise_slow: &'a NoiseModel,
    ) -> ExperimentPlan<'a> {
        let (x0, y0) = default_start(problem);
        ExperimentPlan {
            problem,
            schedule,
            noise_fast,
            noise_slow,
            x0,
            y0,
            replications: 200,
            eps_grid: vec![0.5],
            n0_grid: vec![schedule.n_max() / 10],
            seed: 0,
            r_b: 1.0,
            dt: DEFAULT_DT,
            constants_override: None,
        }
    }
}

/// One channel's aggregate over a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelOutcome {
    pub exceedances: usize,
    pub p_hat: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    /// Guaranteed probability mass; the allowance is its complement.
    pub thm_rhs: f64,
    /// Whether the series tail beyond the horizon was certified; without it
    /// the allowance is an under-estimate and can never ground a violation.
    pub certified: bool,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub eps: f64,
    pub n0: usize,
    pub t_settle: usize,
    /// First index compared: `n0 + t_settle + 1`.
    pub window_start: usize,
    pub replications: usize,
    pub conditioned: usize,
    /// Conditioned replications whose level-set flag failed before the end.
    pub g_lost: usize,
    pub fast: ChannelOutcome,
    pub slow: ChannelOutcome,
}

impl CellReport {
    /// Fraction of conditioned replications still inside the level set at
    /// the horizon.
    pub fn g_survival(&self) -> f64 {
        if self.conditioned == 0 {
            return 0.0;
        }
        1.0 - self.g_lost as f64 / self.conditioned as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub seed: u64,
    pub replications: usize,
    pub cells: Vec<CellReport>,
    /// Per start index: survival fraction of the level-set event at each
    /// step, among conditioned replications.
    pub g_survival: Vec<(usize, Vec<f64>)>,
}

impl ExperimentReport {
    pub fn any_violation(&self) -> bool {
        self.cells
            .iter()
            .any(|c| c.fast.verdict == Verdict::Violation || c.slow.verdict == Verdict::Violation)
    }

    /// Human-readable per-cell table.
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "experiment seed={} replications={}\n",
            self.seed, self.replications
        ));
        for c in &self.cells {
            out.push_str(&format!(
                "cell eps={} n0={} T={} conditioned={}/{} level-set survival={:.3}\n",
                c.eps,
                c.n0,
                c.t_settle,
                c.conditioned,
                c.replications,
                c.g_survival()
            ));
            for (label, ch) in [("fast", &c.fast), ("slow", &c.slow)] {
                out.push_str(&format!(
                    "  {label}: p_hat={:.5} wilson=[{:.5}, {:.5}] rhs={:.5}{} allowance={:.5} -> {}\n",
                    ch.p_hat,
                    ch.wilson_lo,
                    ch.wilson_hi,
                    ch.thm_rhs,
                    if ch.certified { "" } else { " (tail truncated)" },
                    1.0 - ch.thm_rhs,
                    ch.verdict
                ));
            }
        }
        out
    }
}

/// Survival curves stored in the report, keyed by start index.
pub fn g_event_attrition(report: &ExperimentReport) -> &[(usize, Vec<f64>)] {
    &report.g_survival
}

fn channel_verdict(p_hat: f64, wilson_lo: f64, allowance: f64, certified: bool) -> Verdict {
    if p_hat <= allowance {
        Verdict::Consistent
    } else if certified && wilson_lo > allowance {
        Verdict::Violation
    } else {
        Verdict::Inconclusive
    }
}

/// Per-cell constants resolved during plan validation.
struct CellSpec {
    eps: f64,
    n0: usize,
    n0_slot: usize,
    t_settle: usize,
    rhs_fast: f64,
    cert_fast: bool,
    rhs_slow: f64,
    cert_slow: bool,
}

/// Exact integer tallies; merging is associative, so the parallel reduction
/// is deterministic regardless of work order.
#[derive(Clone)]
struct Tally {
    conditioned: Vec<u64>,
    g_lost: Vec<u64>,
    survival: Vec<Vec<u64>>,
    fast_exceed: Vec<u64>,
    slow_exceed: Vec<u64>,
}

impl Tally {
    fn new(n_slots: usize, n_cells: usize, n_len: usize) -> Tally {
        Tally {
            conditioned: vec![0; n_slots],
            g_lost: vec![0; n_slots],
            survival: vec![vec![0; n_len]; n_slots],
            fast_exceed: vec![0; n_cells],
            slow_exceed: vec![0; n_cells],
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for (a, b) in self.conditioned.iter_mut().zip(&other.conditioned) {
            *a += b;
        }
        for (a, b) in self.g_lost.iter_mut().zip(&other.g_lost) {
            *a += b;
        }
        for (row, other_row) in self.survival.iter_mut().zip(&other.survival) {
            for (a, b) in row.iter_mut().zip(other_row) {
                *a += b;
            }
        }
        for (a, b) in self.fast_exceed.iter_mut().zip(&other.fast_exceed) {
            *a += b;
        }
        for (a, b) in self.slow_exceed.iter_mut().zip(&other.slow_exceed) {
            *a += b;
        }
        self
    }
}

fn validate_plan(plan: &ExperimentPlan) -> Result<()> {
    if plan.replications == 0 {
        return Err(Error::PlanInvalid("replication count must be at least 1".into()));
    }
    if plan.eps_grid.is_empty() || plan.n0_grid.is_empty() {
        return Err(Error::PlanInvalid("threshold and start grids must be non-empty".into()));
    }
    if plan.eps_grid.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::PlanInvalid("thresholds must be finite and >= 0".into()));
    }
    if !(plan.r_b > 0.0) || !plan.r_b.is_finite() {
        return Err(Error::PlanInvalid(format!("conditioning radius must be > 0, got {}", plan.r_b)));
    }
    let n_max = plan.schedule.n_max();
    if let Some(&bad) = plan.n0_grid.iter().find(|&&n0| n0 >= n_max) {
        return Err(Error::PlanInvalid(format!(
            "start index {bad} is not before the horizon {n_max}"
        )));
    }
    Ok(())
}

pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    validate_plan(plan)?;
    let p = plan.problem;
    let schedule = plan.schedule;
    let n_max = schedule.n_max();

    let flow_fast = PhiFlow::fast_at_anchor(p, &p.y_star, plan.dt)?;
    let flow_slow = PhiFlow::slow_at_equilibrium(p, plan.dt)?;
    let env_fast = fit_decay_envelope(&flow_fast, ENVELOPE_SPAN, ENVELOPE_GRID)?;
    let env_slow = fit_decay_envelope(&flow_slow, ENVELOPE_SPAN, ENVELOPE_GRID)?;
    let constants = plan
        .constants_override
        .unwrap_or_else(|| BoundConstants::from_models(plan.noise_fast, plan.noise_slow, env_fast.kappa, env_slow.kappa));

    // Worst initial manifold distance over the conditioning ball.
    let h_plan = plan.r_b * (1.0 + p.l_lambda);

    let mut cells = Vec::with_capacity(plan.eps_grid.len() * plan.n0_grid.len());
    for &eps in &plan.eps_grid {
        for (n0_slot, &n0) in plan.n0_grid.iter().enumerate() {
            let t_settle = if eps == 0.0 {
                0
            } else {
                bounds::settling_time(schedule, n0, &env_fast, h_plan, eps).map_err(|e| {
                    Error::PlanInvalid(format!("cell (eps={eps}, n0={n0}): {e}"))
                })?
            };
            if n0 + t_settle + 1 >= n_max {
                return Err(Error::PlanInvalid(format!(
                    "cell (eps={eps}, n0={n0}): settled window starts at {} which is not before the horizon {n_max}",
                    n0 + t_settle + 1
                )));
            }
            let curves = bounds::theorem_bounds(schedule, n0, eps, &constants)?;
            let (rhs_fast, cert_fast) = curves.rhs_fast_total();
            let (rhs_slow, cert_slow) = curves.rhs_slow_total();
            cells.push(CellSpec { eps, n0, n0_slot, t_settle, rhs_fast, cert_fast, rhs_slow, cert_slow });
        }
    }

    let mut x_eq = DVector::zeros(p.d);
    p.lambda_into(&p.y_star, &mut x_eq);
    let opts = SimOptions { n0: 0, dt: plan.dt, track_deviations: false };

    let tally = (0..plan.replications)
        .into_par_iter()
        .map(|rep| -> Result<Tally> {
            let rec = engine::run(
                p,
                schedule,
                plan.noise_fast,
                plan.noise_slow,
                &plan.x0,
                &plan.y0,
                plan.seed,
                rep as u64,
                &opts,
            )?;
            let mut t = Tally::new(plan.n0_grid.len(), cells.len(), n_max + 1);
            let mut dev_slow: Vec<Option<Vec<f64>>> = vec![None; plan.n0_grid.len()];
            let mut flags: Vec<Option<Vec<bool>>> = vec![None; plan.n0_grid.len()];
            for (slot, &n0) in plan.n0_grid.iter().enumerate() {
                let x_gap: f64 = rec
                    .x_slice(n0)
                    .iter()
                    .zip(x_eq.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let y_gap: f64 = rec
                    .y_slice(n0)
                    .iter()
                    .zip(p.y_star.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let conditioned =
                    x_gap.sqrt() <= plan.r_b && y_gap.sqrt() <= plan.r_b;
                if !conditioned {
                    continue;
                }
                t.conditioned[slot] = 1;
                let (g_fast, _) = engine::g_flags_from(&rec, p, n0);
                if !g_fast[n_max] {
                    t.g_lost[slot] = 1;
                }
                for (n, &alive) in g_fast.iter().enumerate() {
                    if alive {
                        t.survival[slot][n] = 1;
                    }
                }
                dev_slow[slot] = Some(engine::slow_deviation_from(&rec, p, schedule, n0, plan.dt)?);
                flags[slot] = Some(g_fast);
            }
            for (i, cell) in cells.iter().enumerate() {
                if flags[cell.n0_slot].is_none() {
                    continue;
                }
                let window = (cell.n0 + cell.t_settle + 1)..=n_max;
                let ds = dev_slow[cell.n0_slot].as_ref().unwrap();
                let mut fast_over = false;
                let mut slow_over = false;
                for n in window {
                    fast_over |= rec.dev_fast[n] > cell.eps;
                    slow_over |= ds[n] > cell.eps;
                }
                t.fast_exceed[i] = fast_over as u64;
                t.slow_exceed[i] = slow_over as u64;
            }
            Ok(t)
        })
        .try_reduce(
            || Tally::new(plan.n0_grid.len(), cells.len(), n_max + 1),
            |a, b| Ok(a.merge(b)),
        )?;

    if tally.conditioned.iter().any(|&c| c == 0) {
        return Err(Error::NoConditionedReplications);
    }

    let mut reports = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let conditioned = tally.conditioned[cell.n0_slot] as usize;
        let outcome = |exceed: usize, rhs: f64, certified: bool| {
            let p_hat = exceed as f64 / conditioned as f64;
            let (lo, hi) = wilson_interval(exceed, conditioned, Z_95);
            let allowance = 1.0 - rhs;
            ChannelOutcome {
                exceedances: exceed,
                p_hat,
                wilson_lo: lo,
                wilson_hi: hi,
                thm_rhs: rhs,
                certified,
                verdict: channel_verdict(p_hat, lo, allowance, certified),
            }
        };
        reports.push(CellReport {
            eps: cell.eps,
            n0: cell.n0,
            t_settle: cell.t_settle,
            window_start: cell.n0 + cell.t_settle + 1,
            replications: plan.replications,
            conditioned,
            g_lost: tally.g_lost[cell.n0_slot] as usize,
            fast: outcome(tally.fast_exceed[i] as usize, cell.rhs_fast, cell.cert_fast),
            slow: outcome(tally.slow_exceed[i] as usize, cell.rhs_slow, cell.cert_slow),
        });
    }

    let g_survival = plan
        .n0_grid
        .iter()
        .enumerate()
        .map(|(slot, &n0)| {
            let denom = tally.conditioned[slot] as f64;
            (n0, tally.survival[slot].iter().map(|&c| c as f64 / denom).collect())
        })
        .collect();

    Ok(ExperimentReport {
        seed: plan.seed,
        replications: plan.replications,
        cells: reports,
        g_survival,
    })
}

/// Runs every (schedule, eps, n0) cell as an independent single-cell
/// experiment with a deterministic seed offset: cell `i` (schedule-major,
/// then threshold, then start index) uses `seed + i`, so any cell can be
/// reproduced in isolation and a 1x1x1 sweep is exactly `run_experiment`.
pub fn sweep<'a>(
    plan: &ExperimentPlan<'a>,
    schedule_variants: &[&'a StepSchedule],
) -> Result<Vec<ExperimentReport>> {
    let schedules: Vec<&StepSchedule> = if schedule_variants.is_empty() {
        vec![plan.schedule]
    } else {
        schedule_variants.to_vec()
    };
    let n_cells = schedules.len() * plan.eps_grid.len() * plan.n0_grid.len();
    if n_cells > SWEEP_CELL_LIMIT {
        return Err(Error::PlanInvalid(format!(
            "sweep has {n_cells} cells, limit is {SWEEP_CELL_LIMIT}"
        )));
    }
    let mut out = Vec::with_capacity(n_cells);
    let mut idx = 0u64;
    for schedule in &schedules {
        for &eps in &plan.eps_grid {
            for &n0 in &plan.n0_grid {
                let sub = ExperimentPlan {
                    problem: plan.problem,
                    schedule: *schedule,
                    noise_fast: plan.noise_fast,
                    noise_slow: plan.noise_slow,
                    x0: plan.x0.clone(),
                    y0: plan.y0.clone(),
                    replications: plan.replications,
                    eps_grid: vec![eps],
                    n0_grid: vec![n0],
                    seed: plan.seed.wrapping_add(idx),
                    r_b: plan.r_b,
                    dt: plan.dt,
                    constants_override: plan.constants_override,
                };
                out.push(run_experiment(&sub)?);
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// One channel's cell table:
/// `eps,n0,T,replications,conditioned,p_hat,wilson_lo,wilson_hi,thm_rhs,verdict`.
pub fn write_report_csv<W: Write>(
    w: &mut W,
    report: &ExperimentReport,
    channel: Channel,
    config_hash: u64,
) -> io::Result<()> {
    writeln!(w, "# config_hash={config_hash:016x}")?;
    writeln!(w, "eps,n0,T,replications,conditioned,p_hat,wilson_lo,wilson_hi,thm_rhs,verdict")?;
    for c in &report.cells {
        let ch = match channel {
            Channel::Fast => &c.fast,
            Channel::Slow => &c.slow,
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            c.eps,
            c.n0,
            c.t_settle,
            c.replications,
            c.conditioned,
            ch.p_hat,
            ch.wilson_lo,
            ch.wilson_hi,
            ch.thm_rhs,
            ch.verdict
        )?;
    }
    Ok(())
}
