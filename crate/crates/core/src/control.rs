//! Low-level loop: bus-voltage PI estimate of the supply-demand mismatch and
//! clamped per-cell power references.
//!
//! The OPM layer only sees predicted demand. The PI term `P̃` absorbs the gap
//! between prediction and actual demand (and the conversion losses), and the
//! references `μ_j (P_out + P̃)` are clamped to each cell's current limits.
//!
//! The bus itself is a simulation surrogate. In ideal mode its voltage is
//! `V* − g·(demanded − supplied)`; in dynamic mode a bus capacitor obeys
//! `C·V·dV/dt = supplied − demanded`.

use serde::{Deserialize, Serialize};

use crate::cell::{CellParameters, PackState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiConfig {
    /// W/V.
    pub kp: f64,
    /// W/(V·s).
    pub ki: f64,
    /// Volts.
    pub v_ref: f64,
    /// Optional bound on `|∫e dt|` in V·s.
    pub integral_limit: Option<f64>,
}

impl Default for PiConfig {
    fn default() -> Self {
        Self {
            kp: 20.0,
            ki: 400.0,
            v_ref: 30.0,
            integral_limit: None,
        }
    }
}

impl PiConfig {
    pub fn validate(&self) -> Result<()> {
        for (path, v) in [("control.pi.kp", self.kp), ("control.pi.ki", self.ki)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(path, format!("must be non-negative, got {v}")));
            }
        }
        if !(self.v_ref.is_finite() && self.v_ref > 0.0) {
            return Err(Error::config("control.pi.v_ref", "must be positive"));
        }
        if let Some(l) = self.integral_limit {
            if !(l > 0.0) {
                return Err(Error::config("control.pi.integral_limit", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiState {
    pub config: PiConfig,
    /// `∫(V* − V) dt`, V·s.
    pub integral: f64,
}

impl PiState {
    pub fn new(config: PiConfig) -> Self {
        Self { config, integral: 0.0 }
    }
}

/// `P̃ = K_P e + K_I ∫e dt` with `e = V* − V`, rectangular integration. When
/// `freeze` is set (every cell saturated) the integral is held.
pub fn pi_mismatch(pi: &mut PiState, v_out: f64, dt: f64, freeze: bool) -> f64 {
    let e = pi.config.v_ref - v_out;
    if !freeze {
        pi.integral += e * dt;
        if let Some(l) = pi.config.integral_limit {
            pi.integral = pi.integral.clamp(-l, l);
        }
    }
    pi.config.kp * e + pi.config.ki * pi.integral
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    /// Per-cell internal power references, W.
    pub references: Vec<f64>,
    pub saturated: Vec<bool>,
    /// `Σ μ_j (P_out + P̃) − Σ P*_bj`: power lost to clamping.
    pub shortfall: f64,
}

impl Allocation {
    pub fn all_saturated(&self) -> bool {
        !self.saturated.is_empty() && self.saturated.iter().all(|s| *s)
    }

    pub fn any_saturated(&self) -> bool {
        self.saturated.iter().any(|s| *s)
    }
}

/// `P*_bj = clamp(μ_j (P_out + P̃), u_j i_min, u_j i_max)`.
pub fn allocate(
    mu: &[f64],
    p_out_pred: f64,
    p_tilde: f64,
    cells: &[CellParameters],
    state: &PackState,
) -> Result<Allocation> {
    let target = p_out_pred + p_tilde;
    let mut references = Vec::with_capacity(mu.len());
    let mut saturated = Vec::with_capacity(mu.len());
    let mut shortfall = 0.0;
    for (j, c) in cells.iter().enumerate() {
        let [lo, hi] = c.power_limits(state.soc[j])?;
        let want = mu[j] * target;
        let got = want.clamp(lo, hi);
        saturated.push(got != want);
        shortfall += want - got;
        references.push(got);
    }
    Ok(Allocation {
        references,
        saturated,
        shortfall,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum BusMode {
    /// `V = V* − gain·(demanded − supplied)`, gain in V/W.
    Ideal { gain: f64 },
    /// Bus capacitance in farads.
    Dynamic { capacitance: f64 },
}

impl Default for BusMode {
    fn default() -> Self {
        BusMode::Ideal { gain: 0.01 }
    }
}

impl BusMode {
    pub fn validate(&self) -> Result<()> {
        let (path, v) = match *self {
            BusMode::Ideal { gain } => ("control.bus.gain", gain),
            BusMode::Dynamic { capacitance } => ("control.bus.capacitance", capacitance),
        };
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::config(path, format!("must be positive, got {v}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusModel {
    pub mode: BusMode,
    pub v_ref: f64,
    pub voltage: f64,
}

impl BusModel {
    pub fn new(mode: BusMode, v_ref: f64) -> Self {
        Self {
            mode,
            v_ref,
            voltage: v_ref,
        }
    }
}

/// Advances the bus by `dt` and returns the new voltage. `time` is only used
/// for fault diagnostics.
pub fn bus_step(bus: &mut BusModel, supplied: f64, demanded: f64, dt: f64, time: f64) -> Result<f64> {
    match bus.mode {
        BusMode::Ideal { gain } => {
            bus.voltage = bus.v_ref - gain * (demanded - supplied);
        }
        BusMode::Dynamic { capacitance } => {
            let v = bus.voltage + dt * (supplied - demanded) / (capacitance * bus.voltage);
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Simulation {
                    time,
                    reason: format!(
                        "bus voltage collapsed to {v} V (supplied {supplied:.3} W, demanded {demanded:.3} W)"
                    ),
                });
            }
            bus.voltage = v;
        }
    }
    Ok(bus.voltage)
}

/// Net power delivered to the bus: internal power minus cell and converter
/// losses.
pub fn supplied_power(references: &[f64], cells: &[CellParameters], state: &PackState) -> Result<f64> {
    cells
        .iter()
        .zip(references)
        .enumerate()
        .map(|(j, (c, &p))| {
            let u = c.ocv(state.soc[j])?;
            let i = p / u;
            Ok(p - (c.resistance_unchecked(state.soc[j]) + c.converter_res) * i * i)
        })
        .sum()
}
