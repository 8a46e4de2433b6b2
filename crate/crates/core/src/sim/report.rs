//! Simulation records and their on-disk form (`report.json` + `series.csv`).
//!
//! The CSV carries the time series; the JSON carries the summary, the
//! resolved scenario, per-solve results, faults and per-step diagnostics.
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! a report back reproduces every value exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::Summary;
use super::scenario::Scenario;
use crate::error::{Error, Result};

/// Per-cell columns are written by default only up to this many cells.
pub const FULL_SERIES_MAX_CELLS: usize = 50;

const BASE_COLUMNS: [&str; 11] = [
    "t",
    "p_pred",
    "p_act",
    "p_supplied",
    "v_bus",
    "theta1",
    "theta2",
    "theta3",
    "loss_w",
    "socdev_max",
    "tempdev_max",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepFlags {
    /// Some cell outside its SoC limits.
    pub soc_limit: bool,
    /// Some cell outside its temperature limits.
    pub temp_limit: bool,
    /// Largest SoC deviation above the SoC band.
    pub soc_band: bool,
    /// Largest temperature deviation above the temperature band.
    pub temp_band: bool,
    /// Cells whose reference was clamped.
    pub saturated: usize,
    /// Every reference lay within its cell's power limits.
    pub within_clamps: bool,
    /// A SoC update had to be clamped to [0, 1].
    pub soc_clamped: bool,
}

/// Low-level diagnostics for one record, stored in `report.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// PI mismatch estimate, W.
    pub p_tilde: f64,
    /// Sum of the clamped references, W.
    pub p_refs: f64,
    /// Requested minus clamped reference power, W.
    pub shortfall: f64,
    pub mu_sum: f64,
    pub flags: StepFlags,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub p_pred: f64,
    pub p_act: f64,
    /// Net power delivered to the bus, W.
    pub p_supplied: f64,
    pub v_bus: f64,
    pub theta: [f64; 3],
    pub loss_w: f64,
    pub socdev_max: f64,
    pub tempdev_max: f64,
    /// Per-cell series; empty when they were not written.
    pub soc: Vec<f64>,
    pub temp: Vec<f64>,
    pub mu: Vec<f64>,
    pub diag: StepDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub t: f64,
    pub theta: [f64; 3],
    pub covariance: [[f64; 3]; 3],
    pub iterations: usize,
    pub lambdas: Vec<f64>,
    pub failed_particles: usize,
    pub warnings: Vec<String>,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub t: f64,
    pub reason: String,
    /// The run stopped here.
    pub fatal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub scenario: Scenario,
    pub summary: Summary,
    pub solves: Vec<SolveRecord>,
    pub faults: Vec<Fault>,
    pub records: Vec<StepRecord>,
}

impl SimulationReport {
    pub fn fatal_fault(&self) -> Option<&Fault> {
        self.faults.iter().find(|f| f.fatal)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportJson {
    summary: Summary,
    scenario: Scenario,
    solves: Vec<SolveRecord>,
    faults: Vec<Fault>,
    per_cell_series: bool,
    steps: Vec<StepDiagnostics>,
}

fn parse_err(what: &Path, reason: impl ToString) -> Error {
    Error::Parse {
        what: what.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Writes `report.json` and `series.csv` into `dir`. Per-cell columns are
/// included for small packs or when `full_series` is set.
pub fn write_report(report: &SimulationReport, dir: &Path, full_series: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = report.scenario.cells.count;
    let per_cell = full_series || n <= FULL_SERIES_MAX_CELLS;

    let json = ReportJson {
        summary: report.summary.clone(),
        scenario: report.scenario.clone(),
        solves: report.solves.clone(),
        faults: report.faults.clone(),
        per_cell_series: per_cell,
        steps: report.records.iter().map(|r| r.diag.clone()).collect(),
    };
    let text = serde_json::to_string_pretty(&json).map_err(|e| parse_err(dir, e))?;
    fs::write(dir.join("report.json"), text)?;

    let csv_path = dir.join("series.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| parse_err(&csv_path, e))?;
    let mut header: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    if per_cell {
        for prefix in ["q", "T", "mu"] {
            header.extend((1..=n).map(|j| format!("{prefix}_{j}")));
        }
    }
    w.write_record(&header).map_err(|e| parse_err(&csv_path, e))?;
    for r in &report.records {
        let mut row: Vec<String> = [
            r.t,
            r.p_pred,
            r.p_act,
            r.p_supplied,
            r.v_bus,
            r.theta[0],
            r.theta[1],
            r.theta[2],
            r.loss_w,
            r.socdev_max,
            r.tempdev_max,
        ]
        .iter()
        .map(f64::to_string)
        .collect();
        if per_cell {
            for v in r.soc.iter().chain(&r.temp).chain(&r.mu) {
                row.push(v.to_string());
            }
        }
        w.write_record(&row).map_err(|e| parse_err(&csv_path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a report written by [`write_report`].
pub fn read_report(dir: &Path) -> Result<SimulationReport> {
    let json_path = dir.join("report.json");
    let text = fs::read_to_string(&json_path)?;
    let json: ReportJson = serde_json::from_str(&text).map_err(|e| parse_err(&json_path, e))?;
    let n = json.scenario.cells.count;

    let csv_path = dir.join("series.csv");
    let mut rd = csv::Reader::from_path(&csv_path).map_err(|e| parse_err(&csv_path, e))?;
    let header = rd.headers().map_err(|e| parse_err(&csv_path, e))?.clone();
    let want = BASE_COLUMNS.len() + if json.per_cell_series { 3 * n } else { 0 };
    if header.len() != want || header.iter().zip(BASE_COLUMNS).any(|(a, b)| a != b) {
        return Err(parse_err(&csv_path, "unexpected header"));
    }
    let mut records = Vec::new();
    for (row, diag) in rd.records().zip(json.steps) {
        let row = row.map_err(|e| parse_err(&csv_path, e))?;
        let v: Vec<f64> = row
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(&csv_path, e))?;
        let cells = |k: usize| {
            if json.per_cell_series {
                v[BASE_COLUMNS.len() + k * n..BASE_COLUMNS.len() + (k + 1) * n].to_vec()
            } else {
                Vec::new()
            }
        };
        records.push(StepRecord {
            t: v[0],
            p_pred: v[1],
            p_act: v[2],
            p_supplied: v[3],
            v_bus: v[4],
            theta: [v[5], v[6], v[7]],
            loss_w: v[8],
            socdev_max: v[9],
            tempdev_max: v[10],
            soc: cells(0),
            temp: cells(1),
            mu: cells(2),
            diag,
        });
    }
    Ok(SimulationReport {
        scenario: json.scenario,
        summary: json.summary,
        solves: json.solves,
        faults: json.faults,
        records,
    })
}
