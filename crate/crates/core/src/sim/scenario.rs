//! Scenario files: pack construction, controller settings and demand.
//!
//! Every section except `cells`, `demand` and `duration` may be omitted, in
//! which case the defaults of the corresponding config type apply. The fully
//! resolved scenario is echoed into each report.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{CellParameters, PackState};
use crate::control::{BusMode, PiConfig};
use crate::enki::EnkiConfig;
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::problem::{OpmConfig, OpmProblem};

/// How a per-cell value is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Draw {
    Constant(f64),
    /// Independent draws from `U(lo, hi)`.
    Uniform([f64; 2]),
    Values(Vec<f64>),
}

impl Draw {
    fn validate(&self, path: &str, n: usize) -> Result<()> {
        match self {
            Draw::Constant(v) if !v.is_finite() => Err(Error::config(path, "must be finite")),
            Draw::Uniform([lo, hi]) if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                Err(Error::config(path, format!("need lo ≤ hi, got [{lo}, {hi}]")))
            }
            Draw::Values(v) if v.len() != n => Err(Error::config(
                path,
                format!("expected {n} values (one per cell), got {}", v.len()),
            )),
            Draw::Values(v) if v.iter().any(|x| !x.is_finite()) => Err(Error::config(path, "values must be finite")),
            _ => Ok(()),
        }
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Draw::Constant(v) => vec![*v; n],
            Draw::Uniform([lo, hi]) => (0..n)
                .map(|_| if lo == hi { *lo } else { rng.random_range(*lo..*hi) })
                .collect(),
            Draw::Values(v) => v.clone(),
        }
    }
}

fn default_initial_temp() -> Draw {
    Draw::Constant(298.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackSpec {
    pub count: usize,
    /// Shared parameters; any omitted field takes the INR18650-25R value.
    #[serde(default)]
    pub params: CellParameters,
    pub initial_soc: Draw,
    #[serde(default = "default_initial_temp")]
    pub initial_temp: Draw,
    /// Per-cell override of `params.res_base`.
    #[serde(default)]
    pub res_base: Option<Draw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub pi: PiConfig,
    pub bus: BusMode,
    /// Low-level steps per model step.
    pub substeps: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            pi: PiConfig::default(),
            bus: BusMode::default(),
            substeps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Half-width `w` of the uniform noise, W.
    pub half_width: f64,
    /// Seconds between successive noise targets; values in between are
    /// linearly interpolated.
    pub correlation_time: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            half_width: 0.0,
            correlation_time: 60.0,
        }
    }
}

/// Overrides the actual demand with `power` on `[at, until)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandEvent {
    pub at: f64,
    pub power: f64,
    #[serde(default)]
    pub until: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandProfile {
    /// Predicted demand magnitude, W.
    pub nominal: f64,
    /// Seconds between charge/discharge flips; `None` keeps one direction.
    #[serde(default)]
    pub switch_period: Option<f64>,
    /// Begin with charging instead of discharging.
    #[serde(default)]
    pub start_charging: bool,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub events: Vec<DemandEvent>,
}

impl DemandProfile {
    fn validate(&self) -> Result<()> {
        if !self.nominal.is_finite() {
            return Err(Error::config("demand.nominal", "must be finite"));
        }
        if let Some(p) = self.switch_period {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::config("demand.switch_period", "must be positive"));
            }
        }
        if !(self.noise.half_width.is_finite() && self.noise.half_width >= 0.0) {
            return Err(Error::config("demand.noise.half_width", "must be non-negative"));
        }
        if !(self.noise.correlation_time.is_finite() && self.noise.correlation_time > 0.0) {
            return Err(Error::config("demand.noise.correlation_time", "must be positive"));
        }
        for (k, e) in self.events.iter().enumerate() {
            let bad = !(e.at.is_finite() && e.power.is_finite()) || e.until.is_some_and(|u| !(u > e.at));
            if bad {
                return Err(Error::config(
                    format!("demand.events[{k}]"),
                    "need finite `at`/`power` and `until` after `at`",
                ));
            }
        }
        Ok(())
    }
}

fn default_opm_period() -> f64 {
    30.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Seeds the initial-condition draws, demand noise and EnKI streams.
    #[serde(default)]
    pub seed: u64,
    pub cells: PackSpec,
    #[serde(default)]
    pub opm: OpmConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub enki: EnkiConfig,
    #[serde(default)]
    pub control: ControlConfig,
    pub demand: DemandProfile,
    /// Seconds between OPM solves.
    #[serde(default = "default_opm_period")]
    pub opm_period: f64,
    /// Simulated seconds.
    pub duration: f64,
    /// Center each solve's prior on the previous estimate.
    #[serde(default = "default_true")]
    pub warm_start: bool,
}

/// Number of whole `dt` steps in `span`, if it is a multiple.
pub(crate) fn whole_steps(span: f64, dt: f64) -> Option<usize> {
    let k = (span / dt).round();
    ((k * dt - span).abs() <= 1e-9 * span.abs().max(1.0) && k >= 0.0).then_some(k as usize)
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path,
                reason: e.into_inner().to_string(),
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::Parse {
            what: path.as_ref().display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cells.count;
        if n == 0 {
            return Err(Error::config("cells.count", "need at least one cell"));
        }
        self.cells.params.validate().map_err(|e| match e {
            Error::Config { path, reason } => Error::config(format!("cells.params.{path}"), reason),
            other => other,
        })?;
        self.cells.initial_soc.validate("cells.initial_soc", n)?;
        self.cells.initial_temp.validate("cells.initial_temp", n)?;
        if let Some(r) = &self.cells.res_base {
            r.validate("cells.res_base", n)?;
        }
        self.opm.validate()?;
        self.policy.validate()?;
        self.enki.validate()?;
        self.control.pi.validate()?;
        self.control.bus.validate()?;
        if self.control.substeps == 0 {
            return Err(Error::config("control.substeps", "must be at least 1"));
        }
        self.demand.validate()?;
        let dt = self.opm.dt;
        if !(self.duration.is_finite() && self.duration >= 0.0) || whole_steps(self.duration, dt).is_none() {
            return Err(Error::config(
                "duration",
                format!("{} s is not a non-negative multiple of dt = {dt} s", self.duration),
            ));
        }
        if !(self.opm_period >= dt) || whole_steps(self.opm_period, dt).is_none() {
            return Err(Error::config(
                "opm_period",
                format!("{} s must be a multiple of dt = {dt} s and at least dt", self.opm_period),
            ));
        }
        Ok(())
    }

    pub fn record_count(&self) -> usize {
        whole_steps(self.duration, self.opm.dt).unwrap_or(0) + 1
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub(crate) fn demand_rng(&self) -> ChaCha8Rng {
        self.rng(4)
    }

    /// Per-cell parameters and the initial state, drawn deterministically
    /// from the scenario seed.
    pub fn build_pack(&self) -> Result<(Vec<CellParameters>, PackState)> {
        let n = self.cells.count;
        let soc = self.cells.initial_soc.sample(n, &mut self.rng(1));
        let temp = self.cells.initial_temp.sample(n, &mut self.rng(2));
        let mut cells = vec![self.cells.params.clone(); n];
        if let Some(r) = &self.cells.res_base {
            for (c, v) in cells.iter_mut().zip(r.sample(n, &mut self.rng(3))) {
                c.res_base = v;
            }
        }
        for (j, c) in cells.iter().enumerate() {
            c.validate()
                .map_err(|e| Error::config(format!("cells.res_base[{j}]"), e.to_string()))?;
        }
        let state = PackState::new(soc, temp)?;
        Ok((cells, state))
    }

    pub fn build_problem(&self) -> Result<(OpmProblem, PackState)> {
        let (cells, state) = self.build_pack()?;
        Ok((OpmProblem::new(cells, self.opm.clone(), self.policy.clone())?, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "cells": { "count": 3, "initial_soc": { "uniform": [0.7, 0.75] } },
        "demand": { "nominal": 30.0 },
        "duration": 10
    }"#;

    #[test]
    fn defaults_are_applied() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.cells.params.converter_res, 0.010);
        assert_eq!(s.opm_period, 30.0);
        assert_eq!(s.control.substeps, 10);
        assert_eq!(s.record_count(), 11);
        let echoed = serde_json::to_string(&s).unwrap();
        assert!(echoed.contains("\"converter_res\":0.01"));
        assert_eq!(Scenario::from_json(&echoed).unwrap(), s);
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let text = MINIMAL.replace("\"nominal\": 30.0", "\"nominal\": 30.0, \"nominl\": 1");
        match Scenario::from_json(&text).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "demand.nominl"),
            e => panic!("{e}"),
        }
        let text = MINIMAL.replace("\"count\": 3", "\"count\": 3, \"params\": {\"capacity\": 2}");
        match Scenario::from_json(&text).unwrap_err() {
            Error::Config { path, .. } => assert!(path.starts_with("cells.params"), "{path}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn invariants_checked() {
        let text = MINIMAL.replace("\"duration\": 10", "\"duration\": 10.5");
        assert!(matches!(Scenario::from_json(&text), Err(Error::Config { path, .. }) if path == "duration"));
        let text = MINIMAL.replace("\"duration\": 10", "\"duration\": 10, \"opm_period\": 0.5");
        assert!(matches!(Scenario::from_json(&text), Err(Error::Config { path, .. }) if path == "opm_period"));
        let text = MINIMAL.replace("{ \"uniform\": [0.7, 0.75] }", "{ \"values\": [0.7, 0.7] }");
        assert!(matches!(Scenario::from_json(&text), Err(Error::Config { path, .. }) if path == "cells.initial_soc"));
    }

    #[test]
    fn pack_draws_are_seeded() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        let (_, a) = s.build_pack().unwrap();
        let (_, b) = s.build_pack().unwrap();
        assert_eq!(a, b);
        assert!(a.soc.iter().all(|q| (0.7..0.75).contains(q)));
        assert!(a.temp.iter().all(|t| *t == 298.0));
        let other = Scenario { seed: 1, ..s };
        assert_ne!(other.build_pack().unwrap().1, a);
    }
}
