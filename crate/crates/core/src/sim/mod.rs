//! Closed-loop simulation, reporting and solver comparison.

pub mod compare;
pub mod demand;
pub mod metrics;
pub mod report;
pub mod run;
pub mod scenario;

pub use metrics::Summary;
pub use report::{read_report, write_report, SimulationReport};
pub use run::{run_closed_loop, solve_step};
pub use scenario::Scenario;
pub use compare::{format_table, run_compare, write_compare, CompareOptions, CompareRow};
