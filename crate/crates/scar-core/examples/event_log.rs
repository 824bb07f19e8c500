//! Run one simulation and print its event log.
//!
//! Usage: event_log <scenario.toml> <objective> <horizon> <seed> [duration_s]

use scar_core::{compute_metrics, load_config, run_simulation, ObjectiveKind};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 5 {
        eprintln!("usage: event_log <scenario.toml> <objective> <horizon> <seed> [duration_s]");
        std::process::exit(2);
    }
    let mut config = load_config(&std::fs::read_to_string(&args[1]).expect("scenario file"))
        .expect("valid scenario");
    let kind: ObjectiveKind = args[2].parse().expect("dt, st, dr or sr");
    let horizon: usize = args[3].parse().expect("horizon");
    let seed: u64 = args[4].parse().expect("seed");
    if let Some(duration) = args.get(5) {
        config.sim_duration = duration.parse().expect("duration");
    }

    let record = run_simulation(&config, kind, horizon, seed).expect("simulation");
    print!("{}", record.event_log());
    let metrics = compute_metrics(&record, config.n_users(), config.sim_duration);
    eprintln!(
        "{} plans, {} nodes expanded, uptime {:.2}% (full: {})",
        record.plans, record.nodes_expanded, metrics.percent_uptime, metrics.full_uptime
    );
}
