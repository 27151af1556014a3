//! Desk-scale lab for real-time distribution-grid voltage regulation.
//!
//! A radial low-voltage feeder is modeled with its linearized voltage
//! sensitivities, solved exactly by a backward/forward sweep, and regulated
//! by measurement-driven reactive power controllers, including a distributed
//! nested scheme that runs as per-bus agents exchanging neighbor-only
//! messages. All internal computation is per-unit; SI values appear only in
//! the file formats.

pub mod agent;
pub mod config;
pub mod controllers;
pub mod error;
pub mod grid;
pub mod netfile;
pub mod power_flow;
pub mod scenario;

pub use agent::{assert_locality, build_comm_graph, AgentSystem, CommGraph, Message, Phase};
pub use config::apply_config_file;
pub use controllers::{
    ControllerConfig, DroopCurve, DualState, InnerState, OuterState, SetpointBox, SparseScaling,
};
pub use error::{Error, Result};
pub use grid::{
    build_sensitivities, generate_synthetic_feeder, validate_topology, Branching, BusId, Cable,
    DerSpec, RadialNetwork, SensitivityMatrices, TopologyViolation,
};
pub use netfile::{load_network, save_network};
pub use power_flow::{
    linear_voltage, measure, solve_ac, MeasurementConfig, PowerFlowSolution, PowerInjection,
    VoltageProfile,
};
pub use scenario::{
    compute_avv, export_messages, export_results, generate_profiles, load_profiles,
    mean_setpoint_deviation, run_dynamic, run_static, save_profiles, ControllerKind, Metrics,
    ProfileUnits, RunConfig, RunResult, ScenarioTimeSeries,
};
