//! Deterministic network simulation.
//!
//! A single-threaded event loop owns a virtual clock and a message bus whose
//! latency is drawn from a seeded generator. Nodes are stepped one event at a
//! time, so a scenario document and a seed fully determine every output byte.

pub mod bus;
pub mod config;
pub mod output;
pub mod runner;
pub mod scenarios;
pub mod trace;

pub use bus::{BusMessage, FaultAction, FaultRule, MessagePattern};
pub use config::ScenarioConfig;
pub use output::{Execution, RunOutput, RunReport};
pub use runner::{run_scenario, Simulation};
pub use trace::TraceEvent;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
}

#[cfg(test)]
mod tests;
