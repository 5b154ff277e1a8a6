//! Testbed wiring and benchmark drivers.

mod bench;
mod config;
mod report;
mod road;
mod testbed;

pub use bench::{
    closed_form_preparation, run_benchmark, run_preparation_timing, run_retrieval_comparison,
    run_scenario, BenchmarkRun, PreparationRun, RetrievalComparison,
};
pub use config::{
    CseLabels, MessageSizes, Mode, NodeProcessing, RegistrySettings, ScenarioConfig, SeedConfig,
    ServiceConfig, TaskConfig, TopologyFile, WorkerSettings, WorkloadConfig, WorkloadOp,
    PAPER_CALIBRATED, ROAD_SCENARIO,
};
pub use report::{
    emit_results, format_ms, summarize, write_samples_csv, write_summary, LatencySample, Summary,
};
pub use road::{run_road_scenario, Assertion, RoadReport};
pub use testbed::{Completed, LogLine, ServiceOutcome, Testbed, TestbedStats};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario failed: {0}")]
    Scenario(String),
}
