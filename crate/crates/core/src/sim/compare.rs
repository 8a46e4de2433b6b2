//! Runtime comparison of the EnKI policy solver against the cell-level
//! baseline on freshly drawn packs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scenario::{DemandProfile, Draw, PackSpec, Scenario};
use crate::baseline::{solve_cell_level, BaselineOptions, SolveStatus, MAX_CELL_STEPS};
use crate::cell::{CellParameters, PackState};
use crate::enki::{solve, EnkiConfig};
use crate::error::{Error, Result};
use crate::problem::{DemandForecast, OpmConfig, OpmProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareOptions {
    pub sizes: Vec<usize>,
    pub horizons: Vec<usize>,
    pub particles: usize,
    /// EnKI solves per configuration, one seed each; runtimes are averaged.
    pub repeats: usize,
    pub seed: u64,
    pub soc_range: [f64; 2],
    /// Per-cell series resistance range; `None` keeps the nominal value.
    pub res_range: Option<[f64; 2]>,
    pub temp: f64,
    /// Discharge demand per cell, W.
    pub power_per_cell: f64,
    pub run_baseline: bool,
    pub baseline: BaselineOptions,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            sizes: vec![50, 100, 200],
            horizons: vec![5, 10],
            particles: 50,
            repeats: 5,
            seed: 0,
            soc_range: [0.70, 0.75],
            res_range: Some([0.0313, 0.0413]),
            temp: 298.0,
            power_per_cell: 10.0,
            run_baseline: true,
            baseline: BaselineOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub runtime_s: f64,
    pub status: SolveStatus,
    pub max_violation: f64,
    pub n_vars: usize,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub n: usize,
    pub horizon: usize,
    pub particles: usize,
    pub enki_runtime_s: f64,
    pub enki_runtime_min_s: f64,
    pub enki_runtime_max_s: f64,
    pub enki_iterations: f64,
    pub baseline: Option<BaselineRun>,
    /// `100·(1 − t_EnKI / t_baseline)`.
    pub reduction_pct: Option<f64>,
    pub skipped: Option<String>,
}

/// The pack, problem and forecast used for one `(n, H)` configuration.
pub fn compare_case(n: usize, horizon: usize, options: &CompareOptions) -> Result<(OpmProblem, PackState, DemandForecast)> {
    let power = options.power_per_cell * n as f64;
    let scenario = Scenario {
        name: format!("compare-{n}-{horizon}"),
        seed: options.seed,
        cells: PackSpec {
            count: n,
            params: CellParameters::default(),
            initial_soc: Draw::Uniform(options.soc_range),
            initial_temp: Draw::Constant(options.temp),
            res_base: options.res_range.map(Draw::Uniform),
        },
        opm: OpmConfig {
            horizon,
            ..OpmConfig::default()
        },
        policy: Default::default(),
        enki: EnkiConfig::default(),
        control: Default::default(),
        demand: DemandProfile {
            nominal: power,
            switch_period: None,
            start_charging: false,
            noise: Default::default(),
            events: Vec::new(),
        },
        opm_period: 1.0,
        duration: 0.0,
        warm_start: false,
    };
    scenario.validate()?;
    let (problem, state) = scenario.build_problem()?;
    Ok((problem, state, DemandForecast::constant(power, horizon)))
}

fn compare_one(n: usize, horizon: usize, options: &CompareOptions) -> Result<CompareRow> {
    let (problem, state, forecast) = compare_case(n, horizon, options)?;
    let config_for = |r: usize| EnkiConfig {
        particles: options.particles,
        seed: options.seed.wrapping_add(r as u64),
        ..EnkiConfig::default()
    };
    // Untimed warm-up so the first timed solve does not pay for cold caches.
    solve(&problem, &state, &forecast, &config_for(0))?;
    let mut times = Vec::with_capacity(options.repeats);
    let mut iterations = 0.0;
    for r in 0..options.repeats {
        let config = config_for(r);
        let start = std::time::Instant::now();
        let est = solve(&problem, &state, &forecast, &config)?;
        times.push(start.elapsed().as_secs_f64());
        iterations += est.iterations_run as f64;
    }
    let count = options.repeats as f64;
    let enki_runtime_s = times.iter().sum::<f64>() / count;

    let mut skipped = None;
    let baseline = if !options.run_baseline {
        skipped = Some("baseline disabled".to_string());
        None
    } else if n * horizon > MAX_CELL_STEPS {
        skipped = Some(format!("n·H = {} exceeds {MAX_CELL_STEPS}", n * horizon));
        None
    } else {
        let sol = solve_cell_level(&problem, &state, &forecast, &options.baseline)?;
        Some(BaselineRun {
            runtime_s: sol.runtime_s,
            status: sol.status,
            max_violation: sol.max_violation,
            n_vars: sol.n_vars,
            outer_iterations: sol.outer_iterations,
            inner_iterations: sol.inner_iterations,
        })
    };
    let reduction_pct = baseline
        .as_ref()
        .map(|b| 100.0 * (1.0 - enki_runtime_s / b.runtime_s));
    Ok(CompareRow {
        n,
        horizon,
        particles: options.particles,
        enki_runtime_s,
        enki_runtime_min_s: times.iter().copied().fold(f64::INFINITY, f64::min),
        enki_runtime_max_s: times.iter().copied().fold(0.0, f64::max),
        enki_iterations: iterations / count,
        baseline,
        reduction_pct,
        skipped,
    })
}

/// Runs every `(n, H)` combination on a single thread so that both solvers
/// are timed under the same conditions.
pub fn run_compare(options: &CompareOptions) -> Result<Vec<CompareRow>> {
    if options.sizes.is_empty() || options.horizons.is_empty() {
        return Err(Error::config("sizes", "need at least one size and one horizon"));
    }
    if options.repeats == 0 || options.particles < 2 {
        return Err(Error::config("repeats", "need repeats ≥ 1 and particles ≥ 2"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Solver(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut rows = Vec::new();
        for &n in &options.sizes {
            for &h in &options.horizons {
                rows.push(compare_one(n, h, options)?);
            }
        }
        Ok(rows)
    })
}

/// Writes `compare.csv` and `compare.json` into `dir`.
pub fn write_compare(rows: &[CompareRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(rows).map_err(|e| Error::Parse {
        what: "compare.json".into(),
        reason: e.to_string(),
    })?;
    fs::write(dir.join("compare.json"), json)?;
    let csv_err = |e: csv::Error| Error::Parse {
        what: "compare.csv".into(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(dir.join("compare.csv")).map_err(csv_err)?;
    w.write_record([
        "n",
        "horizon",
        "particles",
        "enki_runtime_s",
        "baseline_runtime_s",
        "baseline_status",
        "baseline_max_violation",
        "reduction_pct",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let b = r.baseline.as_ref();
        w.write_record([
            r.n.to_string(),
            r.horizon.to_string(),
            r.particles.to_string(),
            r.enki_runtime_s.to_string(),
            opt(b.map(|b| b.runtime_s)),
            b.map(|b| format!("{:?}", b.status).to_lowercase()).unwrap_or_default(),
            opt(b.map(|b| b.max_violation)),
            opt(r.reduction_pct),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Runtime table: one row per pack size, one column group per horizon.
pub fn format_table(rows: &[CompareRow]) -> String {
    let mut horizons: Vec<usize> = rows.iter().map(|r| r.horizon).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.n).collect();
    sizes.sort_unstable();
    sizes.dedup();

    let mut out = String::new();
    let _ = write!(out, "{:>6}", "n");
    for h in &horizons {
        let _ = write!(out, " | {:>26}", format!("H = {h}: EnKI / base / red."));
    }
    out.push('\n');
    for n in sizes {
        let _ = write!(out, "{n:>6}");
        for h in &horizons {
            let cell = match rows.iter().find(|r| r.n == n && r.horizon == *h) {
                None => "-".to_string(),
                Some(r) => match (&r.baseline, r.reduction_pct) {
                    (Some(b), Some(p)) => format!("{:.3}s / {:.3}s / {:.1}%", r.enki_runtime_s, b.runtime_s, p),
                    _ => format!("{:.3}s / - / -", r.enki_runtime_s),
                },
            };
            let _ = write!(out, " | {cell:>26}");
        }
        out.push('\n');
    }
    out
}
