//! Schedule optimisation and stochastic simulation for a single-agent
//! collection and replenishment scenario: one service vehicle keeps a fleet
//! of consuming field agents topped up, returning to a depot when its own
//! supply runs low.
//!
//! The crate provides:
//!
//! * [`scenario`] — configuration types, document parsing, and the road
//!   network travel-time model;
//! * [`prediction`] — deterministic, Gaussian-moment and Monte-Carlo
//!   rollouts of candidate schedules;
//! * [`objectives`] — the four schedule costs (DT, ST, DR, SR);
//! * [`search`] — optimal finite-horizon scheduling by A*, with a
//!   brute-force oracle;
//! * [`simulator`] — closed-loop discrete-event execution with replanning
//!   after every completed task.

pub mod objectives;
pub mod prediction;
pub mod scenario;
pub mod search;
pub mod simulator;

pub use objectives::{evaluate, ratio_cost, tardiness_cost, Cost, ObjectiveKind};
pub use prediction::{
    gaussian_positive_part, rollout_deterministic, rollout_monte_carlo, rollout_stochastic,
    task_duration, FleetState, Prediction, RolloutMode, TimeMoment,
};
pub use scenario::{
    load_config, GaussianParam, NodeId, RoadNetwork, ScenarioConfig, ScenarioError, Schedule, Task,
};
pub use search::{
    astar_schedule, astar_schedule_after, brute_force_schedule, brute_force_schedule_after,
    build_max_time_table, heuristic, max_task_duration, random_schedule, MaxTimeTable, SearchNode,
    SearchOutcome, SearchStats,
};
pub use simulator::{
    compute_metrics, run_simulation, run_simulation_with, verify_record, RunMetrics, SimEvent,
    SimEventKind, SimOptions, SimRecord,
};
