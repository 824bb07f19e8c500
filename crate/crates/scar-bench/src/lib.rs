//! Shared fixtures for the criterion benchmarks.

use std::path::Path;

use scar_core::{load_config, FleetState, ScenarioConfig};

pub fn scenario(name: &str) -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name);
    load_config(&std::fs::read_to_string(path).expect("scenario file")).expect("valid scenario")
}

/// A mid-run state: tanks drawn down unevenly, replenisher half full.
pub fn contended_state(config: &ScenarioConfig) -> FleetState {
    FleetState {
        clock: 0.0,
        user_levels: config
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| u.capacity * (0.25 + 0.12 * (i % 4) as f64))
            .collect(),
        replenisher_level: 0.5 * config.replenisher.capacity,
        replenisher_location: config.depot.location,
    }
}
