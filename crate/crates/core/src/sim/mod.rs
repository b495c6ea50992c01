//! Scenario simulator: configuration, star transport, round runner,
//! reports and benchmarks.

pub mod bench;
pub mod config;
pub mod report;
pub mod runner;
pub mod transport;

pub use config::{ConfigError, DropTiming, Protocol, ScenarioConfig, WorkloadMode};
pub use report::{RoundRow, RunReport};
pub use runner::{run_scenario, substream, DropPoint, SimError, Simulation};
