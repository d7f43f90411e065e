//! Seeded agent-based simulation over a synthetic city.
//!
//! Agents carry their own keys, logs and location history; the patients run
//! the real upload pipeline into an [`ObfuscatedStore`](crate::edgeserver::store::ObfuscatedStore)
//! and users run coarse screening and full fine-grained sessions through an
//! in-process relay. An upload-everything comparator is tracked on the same
//! trajectories.

mod bench;
mod config;
mod engine;
mod metrics;
mod world;

use thiserror::Error;

pub use bench::{bench, BenchReport};
pub use config::{
    AttackKind, AttackScenario, FileConfig, FinematchSection, GeocellSection, ServerSection,
    SimConfig, SimSection, DEFAULT_START_DAY,
};
pub use engine::{AttackReport, SimOutput, ANNOUNCEMENT_MAX_AGE};
pub use metrics::{
    emit_metrics, DayMetrics, DayTiming, MetricsReport, Strategy, StrategyDay, StrategyReport,
    TimingReport, Totals,
};
pub use world::{stream, Health};

use crate::edgeserver::ServerError;
use crate::filter::FilterError;
use crate::finematch::FineMatchError;
use crate::riskscore::RiskError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("invalid attack scenario: {0}")]
    ScenarioInvalid(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    FineMatch(#[from] FineMatchError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Runs the whole simulation, returning the deterministic report, timings and
/// the attack summary if a scenario was configured.
pub fn simulate(config: &SimConfig) -> Result<SimOutput, SimError> {
    engine::Engine::new(config)?.run()
}

pub fn run(config: &SimConfig) -> Result<MetricsReport, SimError> {
    Ok(simulate(config)?.report)
}

/// The upload-everything view of the same trajectories.
pub fn run_baseline(config: &SimConfig) -> Result<StrategyReport, SimError> {
    Ok(run(config)?.strategy(Strategy::UploadAll))
}

pub fn run_attack(config: &SimConfig, scenario: AttackScenario) -> Result<AttackReport, SimError> {
    let cfg = SimConfig {
        attack: Some(scenario),
        ..config.clone()
    };
    Ok(simulate(&cfg)?.attack.expect("scenario configured"))
}
