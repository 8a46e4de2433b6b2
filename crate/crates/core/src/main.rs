use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bess_opm::cell::PackState;
use bess_opm::sim::{self, CompareOptions, Scenario};
use bess_opm::Error;

/// Optimal power management for battery packs with per-cell converters.
#[derive(Parser)]
#[command(name = "bess-opm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop simulation and write report.json and series.csv.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write per-cell columns regardless of pack size.
        #[arg(long)]
        full_series: bool,
    },
    /// Solve the OPM once from a pack state and print the estimate as JSON.
    SolveStep {
        #[arg(long)]
        scenario: PathBuf,
        /// JSON file with `soc` and `temp` arrays.
        #[arg(long)]
        state: PathBuf,
    },
    /// Time the EnKI solver against the cell-level baseline.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "50,100,200")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "5,10")]
        horizons: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        particles: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Time the EnKI solver only.
        #[arg(long)]
        no_baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_SIM_FAULT: u8 = 3;

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("BESS_OPM_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.parse().map_err(|_| Error::Parse {
        what: "BESS_OPM_THREADS".into(),
        reason: format!("`{value}` is not a thread count"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Solver(e.to_string()))
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    configure_threads()?;
    match cli.command {
        Command::Simulate {
            scenario,
            out,
            seed,
            full_series,
        } => {
            let mut scenario = Scenario::load(&scenario)?;
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            let report = sim::run_closed_loop(&scenario)?;
            sim::write_report(&report, &out, full_series)?;
            let s = &report.summary;
            println!(
                "{} records, {} solves, max SoC deviation {:.5}, max temperature deviation {:.3} K, loss {:.1} J",
                s.records, s.solves, s.max_soc_dev, s.max_temp_dev, s.energy_loss_j
            );
            println!("report written to {}", out.display());
            if let Some(f) = report.fatal_fault() {
                eprintln!("simulation stopped at t = {} s: {}", f.t, f.reason);
                return Ok(ExitCode::from(EXIT_SIM_FAULT));
            }
        }
        Command::SolveStep { scenario, state } => {
            let scenario = Scenario::load(&scenario)?;
            let text = std::fs::read_to_string(&state)?;
            let state: PackState = serde_json::from_str(&text).map_err(|e| Error::Parse {
                what: state.display().to_string(),
                reason: e.to_string(),
            })?;
            let out = sim::solve_step(&scenario, &state)?;
            let json = serde_json::to_string_pretty(&out).map_err(|e| Error::Solver(e.to_string()))?;
            println!("{json}");
        }
        Command::Compare {
            sizes,
            horizons,
            particles,
            repeats,
            seed,
            no_baseline,
            out,
        } => {
            let options = CompareOptions {
                sizes,
                horizons,
                particles,
                repeats,
                seed,
                run_baseline: !no_baseline,
                ..CompareOptions::default()
            };
            let rows = sim::run_compare(&options)?;
            sim::write_compare(&rows, &out)?;
            print!("{}", sim::format_table(&rows));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
