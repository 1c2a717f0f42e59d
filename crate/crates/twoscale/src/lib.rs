//! Two-time-scale stochastic approximation: coupled-iterate simulation,
//! limiting ODE flows with fundamental-matrix machinery, finite-time
//! concentration bounds, and Monte-Carlo verification that observed
//! deviations respect those bounds.

pub mod bounds;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod noise;
pub mod odeflow;
pub mod problem;
pub mod schedule;
pub mod verify;

pub use bounds::{BoundConstants, BracketCurves, SeriesTail, TheoremCurves};
pub use engine::{Channel, SimOptions, TrajectoryRecord};
pub use verify::{CellReport, ExperimentPlan, ExperimentReport, Verdict};
pub use error::{Error, Result};
pub use noise::{NoiseKind, NoiseModel, RngStream, TailReport};
pub use odeflow::{AlekseevReport, DecayEnvelope, FundamentalMatrixProvider, PhiFlow};
pub use problem::{InstanceReport, ProblemInstance};
pub use schedule::{ClockKind, ConditionStatus, ScheduleKind, StepSchedule, ValidationReport};
