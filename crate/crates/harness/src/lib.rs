//! Simulated sensor fleet, scenario runner and operator CLI for iotra.
//!
//! A [`ScenarioSpec`] describes nodes, their signals and rules, a fault
//! schedule and the checks to run. [`Simulation`] boots a broker, the cloud
//! services and one [`iotra_core::edge::EdgeNode`] per simulated node in a
//! single process, drives them on a 100 ms virtual clock and produces a
//! [`RunReport`]. Runs are fully determined by the scenario and its seed.

pub mod cli;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod state;
pub mod waveform;

use thiserror::Error;

pub use report::RunReport;
pub use scenario::{uniform_fleet, FaultKind, FaultSpec, ScenarioSpec};
pub use sim::{run_scenario, run_scenario_with, RunOptions, Simulation};
pub use waveform::{gen_waveform, Waveform, WaveformSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad waveform: {0}")]
    BadSpec(String),
    #[error("bad scenario: {0}")]
    BadScenario(String),
    #[error("boot failure: {0}")]
    BootFailure(String),
    #[error("state directory: {0}")]
    State(String),
    #[error(transparent)]
    Edge(#[from] iotra_core::edge::EdgeError),
    #[error(transparent)]
    Control(#[from] iotra_core::controlplane::ControlError),
    #[error(transparent)]
    Twin(#[from] iotra_core::twins::TwinError),
    #[error(transparent)]
    Tsdb(#[from] iotra_core::tsdb::TsdbError),
    #[error(transparent)]
    Stream(#[from] iotra_core::streams::StreamError),
    #[error(transparent)]
    Bus(#[from] iotra_core::msgbus::BusError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
