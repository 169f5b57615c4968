//! Scenario runner for the hopper controller: loads a JSON scenario, runs the
//! closed loop and writes traces plus a summary.

pub mod reference;
pub mod runner;
pub mod scenario;

pub use runner::{run_scenario, RunOptions, RunOutcome, Summary};
pub use scenario::{load_scenario, parse_scenario, Scenario};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    /// Bad or missing scenario input.
    #[error("configuration error: {0}")]
    Config(String),
    /// The plant or controller failed during the run.
    #[error("simulation fault: {0}")]
    Simulation(String),
}

impl RunError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Simulation(_) => 3,
        }
    }
}
