//! Scenario runner: parses scenario files, runs the checks of the
//! `ampere` library on them and renders pass/fail reports.

pub mod report;
pub mod runner;
pub mod scenario;

pub use report::{emit_report, render, Expected, Format, ReportRecord, Status};
pub use runner::run;
pub use scenario::{parse_scenario, parse_scenario_str, Kind, Scenario, ValidationError};
