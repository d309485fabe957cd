//! Scenario files, scripted and live human input, batch runs and logs.

pub mod config;
pub mod presets;
pub mod profile;
pub mod runner;
pub mod session;
pub mod telemetry;

use std::path::Path;

use thiserror::Error;

pub use config::{load_scenario, HumanConfig, HumanTarget, OutputConfig, RobotConfig, SafetyLimits, ScenarioConfig};
pub use profile::{human_wrench, Knot, WrenchProfile};
pub use runner::{
    rank_report, read_command_log, run, write_summary, RankReport, RankRow, Recorder, RunOptions, RunReport, RunSummary,
};
pub use session::{Command, CommandError, LoggedCommand, Session};
pub use telemetry::TelemetryWriter;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl ScenarioError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        ScenarioError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<csv::Error> for ScenarioError {
    fn from(e: csv::Error) -> Self {
        ScenarioError::Io(e.to_string())
    }
}
