//! Closed-loop simulation: periodic OPM solves above a PI-corrected
//! low-level allocation, with the cell model as the plant.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::demand::DemandSeries;
use super::metrics::summarize;
use super::report::{Fault, SimulationReport, SolveRecord, StepDiagnostics, StepFlags, StepRecord};
use super::scenario::{whole_steps, Scenario};
use crate::cell::{CellParameters, PackState};
use crate::control::{allocate, bus_step, pi_mismatch, supplied_power, Allocation, BusModel, PiState};
use crate::enki::{solve_about, EnkiConfig};
use crate::error::{Error, Result};
use crate::policy::{features, Theta};
use crate::problem::{DemandForecast, OpmProblem};

/// Seed of the `index`-th OPM solve of a run.
fn solve_seed(scenario_seed: u64, enki_seed: u64, index: usize) -> u64 {
    let mut z = scenario_seed ^ enki_seed.rotate_left(17) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn forecast_at(series: &DemandSeries, k: usize, dt: f64, horizon: usize) -> DemandForecast {
    DemandForecast {
        p_out: (k..=k + horizon).map(|i| series.predicted_at(i as f64 * dt)).collect(),
    }
}

fn step_loss(references: &[f64], cells: &[CellParameters], state: &PackState) -> f64 {
    cells
        .iter()
        .zip(references)
        .enumerate()
        .map(|(j, (c, &p))| {
            let i = p / c.ocv_unchecked(state.soc[j]);
            (c.resistance_unchecked(state.soc[j]) + c.converter_res) * i * i
        })
        .sum()
}

fn step_flags(scenario: &Scenario, cells: &[CellParameters], state: &PackState, alloc: &Allocation) -> Result<StepFlags> {
    let mut within = true;
    for (j, c) in cells.iter().enumerate() {
        let [lo, hi] = c.power_limits(state.soc[j])?;
        let r = alloc.references[j];
        within &= r >= lo - 1e-9 && r <= hi + 1e-9;
    }
    let outside = |v: f64, [lo, hi]: [f64; 2]| v < lo || v > hi;
    Ok(StepFlags {
        soc_limit: cells.iter().zip(&state.soc).any(|(c, &q)| outside(q, c.soc_limits)),
        temp_limit: cells.iter().zip(&state.temp).any(|(c, &t)| outside(t, c.temp_limits)),
        soc_band: state.soc_deviation() > scenario.opm.soc_band,
        temp_band: state.temp_deviation() > scenario.opm.temp_band,
        saturated: alloc.saturated.iter().filter(|s| **s).count(),
        within_clamps: within,
        soc_clamped: false,
    })
}

struct Loop<'a> {
    scenario: &'a Scenario,
    problem: OpmProblem,
    series: DemandSeries,
    state: PackState,
    theta: Theta,
    pi: PiState,
    bus: BusModel,
    last_all_saturated: bool,
    records: Vec<StepRecord>,
    solves: Vec<SolveRecord>,
    faults: Vec<Fault>,
}

impl Loop<'_> {
    fn solve(&mut self, k: usize) {
        let s = self.scenario;
        let dt = s.opm.dt;
        let forecast = forecast_at(&self.series, k, dt, s.opm.horizon);
        let config = EnkiConfig {
            seed: solve_seed(s.seed, s.enki.seed, self.solves.len() + self.faults.len()),
            ..s.enki.clone()
        };
        let prior = if s.warm_start && !self.solves.is_empty() {
            self.theta.as_array()
        } else {
            s.opm.theta_nominal
        };
        let t = k as f64 * dt;
        let start = Instant::now();
        match solve_about(&self.problem, &self.state, &forecast, &config, &prior) {
            Ok(est) => {
                self.theta = est.mean;
                self.solves.push(SolveRecord {
                    t,
                    theta: est.mean.as_array(),
                    covariance: est.covariance,
                    iterations: est.iterations_run,
                    lambdas: est.lambdas,
                    failed_particles: est.failed_particles,
                    warnings: est.warnings,
                    runtime_s: start.elapsed().as_secs_f64(),
                });
            }
            // The previous weights stay in force.
            Err(e) => self.faults.push(Fault {
                t,
                reason: format!("OPM solve failed: {e}"),
                fatal: false,
            }),
        }
    }

    /// One model step of `substeps` low-level steps. With `record_only` the
    /// first substep is recorded and nothing is advanced.
    fn step(&mut self, k: usize, substeps: usize, record_only: bool) -> Result<()> {
        let s = self.scenario;
        let cells = &self.problem.cells;
        let dt = s.opm.dt;
        let dt_c = dt / substeps as f64;
        let t = k as f64 * dt;
        let p_pred = self.series.predicted_at(t);
        let mut clamped = false;
        for sub in 0..substeps {
            let tc = t + sub as f64 * dt_c;
            let p_act = self.series.actual_at(tc);
            let mu = features(&self.state, cells, p_pred, &s.policy)?.psr(&self.theta);
            let p_tilde = pi_mismatch(&mut self.pi, self.bus.voltage, dt_c, self.last_all_saturated);
            let alloc = allocate(&mu, p_pred, p_tilde, cells, &self.state)?;
            let supplied = supplied_power(&alloc.references, cells, &self.state)?;
            if sub == 0 {
                let flags = step_flags(s, cells, &self.state, &alloc)?;
                self.records.push(StepRecord {
                    t,
                    p_pred,
                    p_act,
                    p_supplied: supplied,
                    v_bus: self.bus.voltage,
                    theta: self.theta.as_array(),
                    loss_w: step_loss(&alloc.references, cells, &self.state),
                    socdev_max: self.state.soc_deviation(),
                    tempdev_max: self.state.temp_deviation(),
                    soc: self.state.soc.clone(),
                    temp: self.state.temp.clone(),
                    mu: mu.clone(),
                    diag: StepDiagnostics {
                        p_tilde,
                        p_refs: alloc.references.iter().sum(),
                        shortfall: alloc.shortfall,
                        mu_sum: mu.iter().sum(),
                        flags,
                    },
                });
            }
            if record_only {
                return Ok(());
            }
            let mut next = self.state.clone();
            for (j, c) in cells.iter().enumerate() {
                let out = c.step_power(self.state.cell(j), alloc.references[j], dt_c)?;
                next.soc[j] = out.state.soc;
                next.temp[j] = out.state.temp;
                clamped |= out.clamped;
            }
            if next.temp.iter().any(|x| !x.is_finite()) {
                return Err(Error::Simulation {
                    time: tc,
                    reason: "non-finite cell temperature".into(),
                });
            }
            self.state = next;
            bus_step(&mut self.bus, supplied, p_act, dt_c, tc)?;
            self.last_all_saturated = alloc.all_saturated();
        }
        if let Some(r) = self.records.last_mut() {
            r.diag.flags.soc_clamped = clamped;
        }
        Ok(())
    }
}

/// Runs `scenario` to completion or to the first fatal fault. Setup errors
/// (invalid scenario, infeasible initial pack) are returned as `Err`; faults
/// during the run end up in the report.
pub fn run_closed_loop(scenario: &Scenario) -> Result<SimulationReport> {
    scenario.validate()?;
    let (problem, state) = scenario.build_problem()?;
    let dt = scenario.opm.dt;
    let steps = whole_steps(scenario.duration, dt).unwrap_or(0);
    let period = whole_steps(scenario.opm_period, dt).unwrap_or(1).max(1);
    let horizon_s = scenario.opm.horizon as f64 * dt;
    let series = DemandSeries::new(&scenario.demand, scenario.duration + horizon_s, &mut scenario.demand_rng());
    let theta = Theta::new(scenario.opm.theta_nominal).unwrap_or(Theta::BARYCENTER);
    let pi = PiState::new(scenario.control.pi.clone());
    let bus = BusModel::new(scenario.control.bus, scenario.control.pi.v_ref);
    let mut lp = Loop {
        scenario,
        problem,
        series,
        state,
        theta,
        pi,
        bus,
        last_all_saturated: false,
        records: Vec::with_capacity(steps + 1),
        solves: Vec::new(),
        faults: Vec::new(),
    };
    for k in 0..=steps {
        let last = k == steps;
        if !last && k % period == 0 {
            lp.solve(k);
        }
        let substeps = if last { 1 } else { scenario.control.substeps };
        if let Err(e) = lp.step(k, substeps, last) {
            let t = match &e {
                Error::Simulation { time, .. } => *time,
                _ => k as f64 * dt,
            };
            lp.faults.push(Fault {
                t,
                reason: e.to_string(),
                fatal: true,
            });
            break;
        }
    }
    let summary = summarize(&lp.records, &lp.solves, &lp.faults, dt, scenario.opm.soc_band);
    Ok(SimulationReport {
        scenario: scenario.clone(),
        summary,
        solves: lp.solves,
        faults: lp.faults,
        records: lp.records,
    })
}

/// Result of a single OPM solve from a given pack state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStepOutput {
    pub theta: [f64; 3],
    pub covariance: [[f64; 3]; 3],
    pub mu: Vec<f64>,
    pub iterations: usize,
    pub lambdas: Vec<f64>,
    pub runtime_s: f64,
}

/// Solves the OPM once from `state` with the scenario's predicted demand
/// over the first horizon.
pub fn solve_step(scenario: &Scenario, state: &PackState) -> Result<SolveStepOutput> {
    scenario.validate()?;
    let (problem, _) = scenario.build_problem()?;
    let dt = scenario.opm.dt;
    let horizon = scenario.opm.horizon;
    let series = DemandSeries::new(&scenario.demand, horizon as f64 * dt, &mut scenario.demand_rng());
    let forecast = forecast_at(&series, 0, dt, horizon);
    let start = Instant::now();
    let est = solve_about(&problem, state, &forecast, &scenario.enki, &scenario.opm.theta_nominal)?;
    let runtime_s = start.elapsed().as_secs_f64();
    let mu = features(state, &problem.cells, forecast.p_out[0], &scenario.policy)?.psr(&est.mean);
    Ok(SolveStepOutput {
        theta: est.mean.as_array(),
        covariance: est.covariance,
        mu,
        iterations: est.iterations_run,
        lambdas: est.lambdas,
        runtime_s,
    })
}
