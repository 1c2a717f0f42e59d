//! Flat `key = value` configuration: strict parsing (unknown or duplicate
//! keys are errors), canonical serialization that round-trips losslessly,
//! and an FNV hash of the canonical text stamped into every output file.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DVector;
use twoscale::bounds::BoundConstants;
use twoscale::error::{Error, Result};
use twoscale::noise::{NoiseKind, NoiseModel};
use twoscale::problem::{instance_by_name, ProblemInstance};
use twoscale::schedule::{make_constant_schedule, make_polynomial_schedule, StepSchedule};
use twoscale::verify::default_start;

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleCfg {
    pub kind: String,
    pub a0: f64,
    pub alpha: f64,
    pub b0: f64,
    pub beta: f64,
    pub n_max: usize,
    pub a: f64,
    pub b: f64,
    pub table_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCfg {
    pub kind: String,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsCfg {
    pub mode: String,
    pub c1: f64,
    pub c2: f64,
    pub u_l: f64,
    pub kappa_fast: f64,
    pub kappa_slow: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanCfg {
    pub replications: usize,
    pub eps: Vec<f64>,
    pub n0: Vec<usize>,
    pub r_b: f64,
    pub x0: Option<Vec<f64>>,
    pub y0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub problem: String,
    pub seed: u64,
    pub out_dir: String,
    pub schedule: ScheduleCfg,
    pub noise_fast: NoiseCfg,
    pub noise_slow: NoiseCfg,
    pub flow_dt: f64,
    pub constants: ConstantsCfg,
    pub plan: PlanCfg,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            problem: "LINEAR1D".into(),
            seed: 42,
            out_dir: "out".into(),
            schedule: ScheduleCfg {
                kind: "polynomial".into(),
                a0: 1.0,
                alpha: 0.6,
                b0: 1.0,
                beta: 0.9,
                n_max: 20_000,
                a: 0.1,
                b: 0.05,
                table_path: None,
            },
            noise_fast: NoiseCfg { kind: "laplace".into(), scale: 0.1 },
            noise_slow: NoiseCfg { kind: "laplace".into(), scale: 0.1 },
            flow_dt: 1e-3,
            constants: ConstantsCfg {
                mode: "calibrated".into(),
                c1: 1.0,
                c2: 1.0,
                u_l: 0.0,
                kappa_fast: 1.0,
                kappa_slow: 1.0,
            },
            plan: PlanCfg {
                replications: 200,
                eps: vec![0.5],
                n0: vec![1000],
                r_b: 1.0,
                x0: None,
                y0: None,
            },
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("config key `{key}`: expected {what}, got `{value}`"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>().map_err(|_| bad(key, v, "a number"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse::<u64>().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>().map_err(|_| bad(key, s, "a comma-separated list of numbers"))
        })
        .collect()
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<usize>().map_err(|_| bad(key, s, "a comma-separated list of integers"))
        })
        .collect()
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn join_usize(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate config key `{key}`")));
            }
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "problem" => self.problem = value.to_string(),
            "seed" => self.seed = parse_u64(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "schedule.kind" => self.schedule.kind = value.to_string(),
            "schedule.a0" => self.schedule.a0 = parse_f64(key, value)?,
            "schedule.alpha" => self.schedule.alpha = parse_f64(key, value)?,
            "schedule.b0" => self.schedule.b0 = parse_f64(key, value)?,
            "schedule.beta" => self.schedule.beta = parse_f64(key, value)?,
            "schedule.n_max" => self.schedule.n_max = parse_usize(key, value)?,
            "schedule.a" => self.schedule.a = parse_f64(key, value)?,
            "schedule.b" => self.schedule.b = parse_f64(key, value)?,
            "schedule.table_path" => self.schedule.table_path = Some(value.to_string()),
            "noise.fast.kind" => self.noise_fast.kind = value.to_string(),
            "noise.fast.scale" => self.noise_fast.scale = parse_f64(key, value)?,
            "noise.slow.kind" => self.noise_slow.kind = value.to_string(),
            "noise.slow.scale" => self.noise_slow.scale = parse_f64(key, value)?,
            "flow.dt" => self.flow_dt = parse_f64(key, value)?,
            "constants.mode" => self.constants.mode = value.to_string(),
            "constants.c1" => self.constants.c1 = parse_f64(key, value)?,
            "constants.c2" => self.constants.c2 = parse_f64(key, value)?,
            "constants.u_l" => self.constants.u_l = parse_f64(key, value)?,
            "constants.kappa_fast" => self.constants.kappa_fast = parse_f64(key, value)?,
            "constants.kappa_slow" => self.constants.kappa_slow = parse_f64(key, value)?,
            "plan.replications" => self.plan.replications = parse_usize(key, value)?,
            "plan.eps" => self.plan.eps = parse_f64_list(key, value)?,
            "plan.n0" => self.plan.n0 = parse_usize_list(key, value)?,
            "plan.r_b" => self.plan.r_b = parse_f64(key, value)?,
            "plan.x0" => self.plan.x0 = Some(parse_f64_list(key, value)?),
            "plan.y0" => self.plan.y0 = Some(parse_f64_list(key, value)?),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical text: every key in fixed order, optional keys only when
    /// set. `parse(to_text(c)) == c` for any `c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("problem = {}\n", self.problem));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("out_dir = {}\n", self.out_dir));
        s.push_str(&format!("schedule.kind = {}\n", self.schedule.kind));
        s.push_str(&format!("schedule.a0 = {}\n", self.schedule.a0));
        s.push_str(&format!("schedule.alpha = {}\n", self.schedule.alpha));
        s.push_str(&format!("schedule.b0 = {}\n", self.schedule.b0));
        s.push_str(&format!("schedule.beta = {}\n", self.schedule.beta));
        s.push_str(&format!("schedule.n_max = {}\n", self.schedule.n_max));
        s.push_str(&format!("schedule.a = {}\n", self.schedule.a));
        s.push_str(&format!("schedule.b = {}\n", self.schedule.b));
        if let Some(p) = &self.schedule.table_path {
            s.push_str(&format!("schedule.table_path = {p}\n"));
        }
        s.push_str(&format!("noise.fast.kind = {}\n", self.noise_fast.kind));
        s.push_str(&format!("noise.fast.scale = {}\n", self.noise_fast.scale));
        s.push_str(&format!("noise.slow.kind = {}\n", self.noise_slow.kind));
        s.push_str(&format!("noise.slow.scale = {}\n", self.noise_slow.scale));
        s.push_str(&format!("flow.dt = {}\n", self.flow_dt));
        s.push_str(&format!("constants.mode = {}\n", self.constants.mode));
        s.push_str(&format!("constants.c1 = {}\n", self.constants.c1));
        s.push_str(&format!("constants.c2 = {}\n", self.constants.c2));
        s.push_str(&format!("constants.u_l = {}\n", self.constants.u_l));
        s.push_str(&format!("constants.kappa_fast = {}\n", self.constants.kappa_fast));
        s.push_str(&format!("constants.kappa_slow = {}\n", self.constants.kappa_slow));
        s.push_str(&format!("plan.replications = {}\n", self.plan.replications));
        s.push_str(&format!("plan.eps = {}\n", join_f64(&self.plan.eps)));
        s.push_str(&format!("plan.n0 = {}\n", join_usize(&self.plan.n0)));
        s.push_str(&format!("plan.r_b = {}\n", self.plan.r_b));
        if let Some(v) = &self.plan.x0 {
            s.push_str(&format!("plan.x0 = {}\n", join_f64(v)));
        }
        if let Some(v) = &self.plan.y0 {
            s.push_str(&format!("plan.y0 = {}\n", join_f64(v)));
        }
        s
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    pub fn build_problem(&self) -> Result<ProblemInstance> {
        instance_by_name(&self.problem)
    }

    pub fn build_schedule(&self) -> Result<StepSchedule> {
        let s = &self.schedule;
        match s.kind.as_str() {
            "polynomial" => make_polynomial_schedule(s.a0, s.alpha, s.b0, s.beta, s.n_max),
            "constant" => make_constant_schedule(s.a, s.b, s.n_max),
            "table" => {
                let path = s.table_path.as_ref().ok_or_else(|| {
                    Error::Config("schedule.kind = table requires schedule.table_path".into())
                })?;
                StepSchedule::from_csv_path(Path::new(path))
            }
            other => Err(Error::Config(format!(
                "unknown schedule.kind `{other}`; expected polynomial, constant, or table"
            ))),
        }
    }

    pub fn build_noise(&self, p: &ProblemInstance) -> Result<(NoiseModel, NoiseModel)> {
        let fast = NoiseModel::new(NoiseKind::parse(&self.noise_fast.kind)?, self.noise_fast.scale, p.d)?;
        let slow = NoiseModel::new(NoiseKind::parse(&self.noise_slow.kind)?, self.noise_slow.scale, p.s)?;
        Ok((fast, slow))
    }

    /// `Some` only in user-constants mode; calibrated mode lets the
    /// experiment derive constants from the noise certificates and fitted
    /// envelopes.
    pub fn constants_override(&self) -> Result<Option<BoundConstants>> {
        match self.constants.mode.as_str() {
            "calibrated" => Ok(None),
            "user" => Ok(Some(BoundConstants {
                c1: self.constants.c1,
                c2: self.constants.c2,
                u_l: self.constants.u_l,
                kappa_fast: self.constants.kappa_fast,
                kappa_slow: self.constants.kappa_slow,
            })),
            other => Err(Error::Config(format!(
                "unknown constants.mode `{other}`; expected calibrated or user"
            ))),
        }
    }

    pub fn start(&self, p: &ProblemInstance) -> Result<(DVector<f64>, DVector<f64>)> {
        let (dx0, dy0) = default_start(p);
        let x0 = match &self.plan.x0 {
            None => dx0,
            Some(v) if v.len() == p.d => DVector::from_column_slice(v),
            Some(v) => {
                return Err(Error::Config(format!(
                    "plan.x0 has {} entries, problem dimension is {}",
                    v.len(),
                    p.d
                )))
            }
        };
        let y0 = match &self.plan.y0 {
            None => dy0,
            Some(v) if v.len() == p.s => DVector::from_column_slice(v),
            Some(v) => {
                return Err(Error::Config(format!(
                    "plan.y0 has {} entries, problem dimension is {}",
                    v.len(),
                    p.s
                )))
            }
        };
        Ok((x0, y0))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = Config::default();
        let parsed = Config::parse(&c.to_text()).unwrap();
        assert_eq!(parsed, c);
        assert_eq!(parsed.hash(), c.hash());
    }

    #[test]
    fn customized_round_trips_with_optional_keys() {
        let mut c = Config::default();
        c.plan.eps = vec![0.25, 0.5, 1.0];
        c.plan.n0 = vec![100, 1000];
        c.plan.y0 = Some(vec![0.75]);
        c.schedule.kind = "constant".into();
        c.schedule.a = 0.2;
        c.noise_slow.kind = "gaussian-clipped".into();
        c.noise_slow.scale = 0.01;
        let parsed = Config::parse(&c.to_text()).unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = Config::parse("schdule.alpha = 0.6\n").unwrap_err();
        assert!(err.to_string().contains("schdule.alpha"), "{err}");
    }

    #[test]
    fn duplicates_and_malformed_lines_are_rejected() {
        let err = Config::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        let err = Config::parse("just words\n").unwrap_err();
        assert!(err.to_string().contains("key = value"), "{err}");
        let err = Config::parse("seed = notanumber\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let c = Config::parse("# a comment\n\nseed = 7\n").unwrap();
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn hash_changes_with_any_field() {
        let c = Config::default();
        let mut c2 = c.clone();
        c2.seed = 43;
        assert_ne!(c.hash(), c2.hash());
    }

    #[test]
    fn fnv_reference_values() {
        // Standard FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
