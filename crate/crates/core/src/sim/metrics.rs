//! Summary statistics computed from a simulation's records.

use serde::{Deserialize, Serialize};

use super::report::{Fault, SolveRecord, StepRecord};

/// The SoC deviation must stay within the band this long to count as balanced.
pub const BALANCE_HOLD_S: f64 = 60.0;

/// Seconds spent in each kind of violation, at record resolution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViolationDurations {
    pub soc_limit: f64,
    pub temp_limit: f64,
    pub soc_band: f64,
    pub temp_band: f64,
    /// Any cell's reference clamped.
    pub saturation: f64,
    pub soc_clamp: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub records: usize,
    pub max_soc_dev: f64,
    pub mean_soc_dev: f64,
    pub final_soc_dev: f64,
    pub max_temp_dev: f64,
    pub mean_temp_dev: f64,
    /// `∫ L dt` with the loss held over each record interval, J.
    pub energy_loss_j: f64,
    pub violations_s: ViolationDurations,
    /// First time after which the SoC deviation stays within the band for
    /// [`BALANCE_HOLD_S`].
    pub time_to_balance_s: Option<f64>,
    pub solves: usize,
    pub solve_runtime_mean_s: f64,
    pub solve_runtime_max_s: f64,
    pub solve_runtime_total_s: f64,
    pub faults: usize,
}

/// Aggregates `records` recorded every `dt` seconds.
pub fn summarize(records: &[StepRecord], solves: &[SolveRecord], faults: &[Fault], dt: f64, soc_band: f64) -> Summary {
    let mut s = Summary {
        records: records.len(),
        solves: solves.len(),
        faults: faults.len(),
        ..Summary::default()
    };
    if let Some(last) = records.last() {
        let count = records.len() as f64;
        s.final_soc_dev = last.socdev_max;
        s.max_soc_dev = records.iter().map(|r| r.socdev_max).fold(0.0, f64::max);
        s.max_temp_dev = records.iter().map(|r| r.tempdev_max).fold(0.0, f64::max);
        s.mean_soc_dev = records.iter().map(|r| r.socdev_max).sum::<f64>() / count;
        s.mean_temp_dev = records.iter().map(|r| r.tempdev_max).sum::<f64>() / count;
    }
    // The last record closes the run, so it spans no interval.
    let spans = records.len().saturating_sub(1);
    for r in &records[..spans] {
        s.energy_loss_j += r.loss_w * dt;
        let f = &r.diag.flags;
        let v = &mut s.violations_s;
        for (flag, total) in [
            (f.soc_limit, &mut v.soc_limit),
            (f.temp_limit, &mut v.temp_limit),
            (f.soc_band, &mut v.soc_band),
            (f.temp_band, &mut v.temp_band),
            (f.saturated > 0, &mut v.saturation),
            (f.soc_clamped, &mut v.soc_clamp),
        ] {
            if flag {
                *total += dt;
            }
        }
    }
    s.time_to_balance_s = time_to_balance(records, soc_band);
    if !solves.is_empty() {
        s.solve_runtime_total_s = solves.iter().map(|x| x.runtime_s).sum();
        s.solve_runtime_max_s = solves.iter().map(|x| x.runtime_s).fold(0.0, f64::max);
        s.solve_runtime_mean_s = s.solve_runtime_total_s / solves.len() as f64;
    }
    s
}

fn time_to_balance(records: &[StepRecord], soc_band: f64) -> Option<f64> {
    let mut run_start = None;
    for r in records {
        if r.socdev_max > soc_band {
            run_start = None;
            continue;
        }
        let t0 = *run_start.get_or_insert(r.t);
        if r.t - t0 >= BALANCE_HOLD_S - 1e-9 {
            return Some(t0);
        }
    }
    None
}
