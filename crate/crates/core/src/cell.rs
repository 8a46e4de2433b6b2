//! Rint electrical model and lumped thermal model of a single cell.
//!
//! The electrical side is an SoC-dependent open-circuit voltage in series with
//! an SoC-dependent internal resistance; the per-cell DC/DC converter adds a
//! constant series resistance `converter_res`. The thermal side is a single
//! heat capacity exchanging heat with the environment through a convective
//! resistance. All stepping is forward Euler.
//!
//! Sign convention: positive power/current discharges the cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SECONDS_PER_HOUR: f64 = 3600.0;

/// Open-circuit voltage coefficients (ascending powers of SoC) for an
/// INR18650-25R cell.
pub const INR18650_25R_OCV: [f64; 6] = [3.3, 2.61, -9.36, 19.7, -19.0, 6.9];

/// Evaluates `Σ c_k x^k` by Horner's rule.
pub fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Evaluates the derivative of `Σ c_k x^k`.
pub fn poly_slope(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, &c)| acc * x + k as f64 * c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellParameters {
    pub capacity_ah: f64,
    pub ocv_coeffs: Vec<f64>,
    pub res_base: f64,
    pub res_exp_coeff: f64,
    pub res_exp_rate: f64,
    /// Series resistance of the module's DC/DC converter (ohms).
    pub converter_res: f64,
    /// Heat capacity (J/K).
    pub heat_capacity: f64,
    /// Convective thermal resistance to the environment (K/W).
    pub conv_resistance: f64,
    /// Environment temperature (K).
    pub env_temp: f64,
    pub soc_limits: [f64; 2],
    pub current_limits: [f64; 2],
    pub temp_limits: [f64; 2],
}

impl Default for CellParameters {
    fn default() -> Self {
        Self::inr18650_25r()
    }
}

impl CellParameters {
    pub const DEFAULT_CONVERTER_RES: f64 = 0.010;

    /// INR18650-25R cell with the pack-level limits used for the 200-cell
    /// storage system.
    pub fn inr18650_25r() -> Self {
        Self {
            capacity_ah: 2.5,
            ocv_coeffs: INR18650_25R_OCV.to_vec(),
            res_base: 0.0313,
            res_exp_coeff: 0.0678,
            res_exp_rate: 13.2,
            converter_res: Self::DEFAULT_CONVERTER_RES,
            heat_capacity: 40.23,
            conv_resistance: 41.05,
            env_temp: 298.0,
            soc_limits: [0.05, 0.95],
            current_limits: [-5.0, 5.0],
            temp_limits: [273.15, 323.15],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |path: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(path, format!("must be positive and finite, got {v}")))
            }
        };
        positive("capacity_ah", self.capacity_ah)?;
        positive("heat_capacity", self.heat_capacity)?;
        positive("conv_resistance", self.conv_resistance)?;
        positive("env_temp", self.env_temp)?;
        if !(self.converter_res.is_finite() && self.converter_res >= 0.0) {
            return Err(Error::config("converter_res", "must be non-negative"));
        }
        if self.ocv_coeffs.is_empty() || self.ocv_coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("ocv_coeffs", "need at least one finite coefficient"));
        }
        for (path, [lo, hi]) in [
            ("soc_limits", self.soc_limits),
            ("current_limits", self.current_limits),
            ("temp_limits", self.temp_limits),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::config(path, format!("need min < max, got [{lo}, {hi}]")));
            }
        }
        // The exponential term is monotone in SoC, so the endpoints bound it.
        for q in [0.0, 1.0] {
            let r = self.resistance_unchecked(q);
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::config(
                    "res_base",
                    format!("internal resistance {r} at SoC {q} is not positive"),
                ));
            }
        }
        Ok(())
    }

    fn check_soc(soc: f64) -> Result<()> {
        if (0.0..=1.0).contains(&soc) {
            Ok(())
        } else {
            Err(Error::Domain {
                what: "soc",
                value: soc,
                domain: "[0, 1]",
            })
        }
    }

    /// Open-circuit voltage at `soc`.
    pub fn ocv(&self, soc: f64) -> Result<f64> {
        Self::check_soc(soc)?;
        Ok(self.ocv_unchecked(soc))
    }

    pub(crate) fn ocv_unchecked(&self, soc: f64) -> f64 {
        poly_eval(&self.ocv_coeffs, soc)
    }

    pub fn ocv_slope(&self, soc: f64) -> f64 {
        poly_slope(&self.ocv_coeffs, soc)
    }

    /// Internal resistance `res_base + res_exp_coeff·exp(−res_exp_rate·soc)`.
    pub fn resistance(&self, soc: f64) -> Result<f64> {
        Self::check_soc(soc)?;
        Ok(self.resistance_unchecked(soc))
    }

    pub(crate) fn resistance_unchecked(&self, soc: f64) -> f64 {
        self.res_base + self.res_exp_coeff * (-self.res_exp_rate * soc).exp()
    }

    pub fn resistance_slope(&self, soc: f64) -> f64 {
        -self.res_exp_rate * self.res_exp_coeff * (-self.res_exp_rate * soc).exp()
    }

    fn positive_ocv(&self, soc: f64) -> Result<f64> {
        let u = self.ocv(soc)?;
        if u > 0.0 {
            Ok(u)
        } else {
            Err(Error::Model(format!("open-circuit voltage {u} V at SoC {soc} is not positive")))
        }
    }

    /// Cell current that realizes the share `psr` of `p_out`.
    pub fn current_from_psr(&self, state: CellState, psr: f64, p_out: f64) -> Result<f64> {
        Ok(psr * p_out / self.positive_ocv(state.soc)?)
    }

    /// Full electrical operating point for a given current.
    pub fn electrical_point(&self, state: CellState, current: f64) -> Result<ElectricalPoint> {
        let ocv = self.positive_ocv(state.soc)?;
        let resistance = self.resistance_unchecked(state.soc);
        Ok(ElectricalPoint {
            ocv,
            resistance,
            current,
            terminal_v: ocv - resistance * current,
            internal_power: ocv * current,
            loss: (resistance + self.converter_res) * current * current,
        })
    }

    /// Module loss `(R(q) + R_C)·psr²·p_out²/u(q)²`, cell plus converter.
    pub fn module_loss(&self, state: CellState, psr: f64, p_out: f64) -> Result<f64> {
        let i = self.current_from_psr(state, psr, p_out)?;
        Ok((self.resistance_unchecked(state.soc) + self.converter_res) * i * i)
    }

    /// One forward-Euler SoC step for the share `psr` of `p_out`.
    pub fn step_soc(&self, state: CellState, psr: f64, p_out: f64, dt: f64) -> Result<SocStep> {
        self.soc_after_power(state, psr * p_out, dt)
    }

    /// One forward-Euler temperature step for the share `psr` of `p_out`.
    pub fn step_temp(&self, state: CellState, psr: f64, p_out: f64, dt: f64) -> Result<f64> {
        self.temp_after_power(state, psr * p_out, dt)
    }

    /// Advances SoC and temperature together under internal power `p_internal`.
    pub fn step_power(&self, state: CellState, p_internal: f64, dt: f64) -> Result<CellStep> {
        let soc = self.soc_after_power(state, p_internal, dt)?;
        let temp = self.temp_after_power(state, p_internal, dt)?;
        Ok(CellStep {
            state: CellState { soc: soc.soc, temp },
            clamped: soc.clamped,
        })
    }

    fn soc_after_power(&self, state: CellState, p_internal: f64, dt: f64) -> Result<SocStep> {
        check_dt(dt)?;
        let u = self.positive_ocv(state.soc)?;
        let next = state.soc - p_internal * dt / (SECONDS_PER_HOUR * self.capacity_ah * u);
        Ok(SocStep::clamp(next))
    }

    fn temp_after_power(&self, state: CellState, p_internal: f64, dt: f64) -> Result<f64> {
        check_dt(dt)?;
        let u = self.positive_ocv(state.soc)?;
        let i = p_internal / u;
        let heat = self.resistance_unchecked(state.soc) * i * i;
        let convection = (state.temp - self.env_temp) / self.conv_resistance;
        Ok(state.temp + dt / self.heat_capacity * (heat - convection))
    }

    /// Internal power limits `[u·i_min, u·i_max]` at the given SoC.
    pub fn power_limits(&self, soc: f64) -> Result<[f64; 2]> {
        let u = self.positive_ocv(soc)?;
        Ok([u * self.current_limits[0], u * self.current_limits[1]])
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt.is_finite() && dt > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "dt",
            value: dt,
            domain: "(0, inf)",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub soc: f64,
    /// Kelvin.
    pub temp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectricalPoint {
    pub ocv: f64,
    pub resistance: f64,
    pub current: f64,
    /// Reported only; nothing downstream consumes the terminal voltage.
    pub terminal_v: f64,
    pub internal_power: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocStep {
    pub soc: f64,
    /// The unclamped Euler step left [0, 1].
    pub clamped: bool,
}

impl SocStep {
    fn clamp(raw: f64) -> Self {
        let soc = raw.clamp(0.0, 1.0);
        Self {
            soc,
            clamped: soc != raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStep {
    pub state: CellState,
    pub clamped: bool,
}

/// SoC and temperature of every cell at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackState {
    pub soc: Vec<f64>,
    pub temp: Vec<f64>,
}

impl PackState {
    pub fn new(soc: Vec<f64>, temp: Vec<f64>) -> Result<Self> {
        let state = Self { soc, temp };
        state.validate()?;
        Ok(state)
    }

    pub fn uniform(n: usize, soc: f64, temp: f64) -> Self {
        Self {
            soc: vec![soc; n],
            temp: vec![temp; n],
        }
    }

    pub fn len(&self) -> usize {
        self.soc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soc.is_empty()
    }

    pub fn cell(&self, j: usize) -> CellState {
        CellState {
            soc: self.soc[j],
            temp: self.temp[j],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.soc.len() != self.temp.len() {
            return Err(Error::config(
                "state",
                format!("{} SoC values but {} temperatures", self.soc.len(), self.temp.len()),
            ));
        }
        if self.soc.is_empty() {
            return Err(Error::config("state", "pack has no cells"));
        }
        if let Some(q) = self.soc.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(Error::config("state.soc", format!("{q} is outside [0, 1]")));
        }
        if let Some(t) = self.temp.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::config("state.temp", format!("{t} K is not positive")));
        }
        Ok(())
    }

    pub fn mean_soc(&self) -> f64 {
        mean(&self.soc)
    }

    pub fn mean_temp(&self) -> f64 {
        mean(&self.temp)
    }

    /// Largest `|q_j − q_avg|`.
    pub fn soc_deviation(&self) -> f64 {
        max_deviation(&self.soc)
    }

    /// Largest `|T_j − T_avg|`.
    pub fn temp_deviation(&self) -> f64 {
        max_deviation(&self.temp)
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub(crate) fn max_deviation(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).abs()).fold(0.0, f64::max)
}
