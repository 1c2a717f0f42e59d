//! Shared fixtures for the criterion benches.

use nalgebra::DVector;
use twoscale::noise::{NoiseKind, NoiseModel};
use twoscale::problem::{instance_by_name, ProblemInstance};
use twoscale::schedule::{make_polynomial_schedule, StepSchedule};

pub fn linear_problem() -> ProblemInstance {
    instance_by_name("LINEAR1D").unwrap()
}

pub fn default_schedule(n_max: usize) -> StepSchedule {
    make_polynomial_schedule(1.0, 0.6, 1.0, 0.9, n_max).unwrap()
}

pub fn laplace_pair(p: &ProblemInstance, scale: f64) -> (NoiseModel, NoiseModel) {
    let kind = NoiseKind::parse("laplace").unwrap();
    (
        NoiseModel::new(kind, scale, p.d).unwrap(),
        NoiseModel::new(kind, scale, p.s).unwrap(),
    )
}

pub fn start(p: &ProblemInstance) -> (DVector<f64>, DVector<f64>) {
    twoscale::verify::default_start(p)
}
