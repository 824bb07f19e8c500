//! Property tests for the invariants that must hold across the whole input
//! space: travel-time metric laws, positive-part bounds, cost identities,
//! level bounds and empty-time monotonicity under random schedules.

use proptest::prelude::*;

use scar_core::prediction::RolloutState;
use scar_core::{
    gaussian_positive_part, load_config, ratio_cost, rollout_deterministic, tardiness_cost,
    FleetState, ObjectiveKind, RolloutMode, ScenarioConfig, Schedule, Task,
};

fn scenario_text(n_extra_nodes: usize, edges: &[(usize, usize, f64)]) -> String {
    // Node 0 is the depot, node 1 the single user's site; extra nodes hang
    // off the generated edge list.
    let mut nodes =
        String::from(r#"{ id = "n0", x = 0.0, y = 0.0 }, { id = "n1", x = 100.0, y = 0.0 }"#);
    for i in 2..(2 + n_extra_nodes) {
        nodes.push_str(&format!(
            r#", {{ id = "n{i}", x = {}.0, y = 0.0 }}"#,
            i * 100
        ));
    }
    let edge_list = edges
        .iter()
        .map(|(a, b, len)| format!(r#"["n{a}", "n{b}", {len}]"#))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        r#"
        sim_duration_s = 3600.0

        [[users]]
        id = 0
        capacity = 1000.0
        usage_rate = {{ mean = 0.5, std_dev = 0.05 }}
        location = "n1"

        [replenisher]
        capacity = 5000.0
        replenish_rate = {{ mean = 10.0, std_dev = 0.5 }}
        setup_time = {{ mean = 60.0, std_dev = 20.0 }}
        packup_time = {{ mean = 20.0, std_dev = 5.0 }}
        speed = {{ mean = 15.0, std_dev = 0.5 }}

        [depot]
        location = "n0"
        setup_time = {{ mean = 30.0, std_dev = 10.0 }}
        packup_time = {{ mean = 10.0, std_dev = 1.0 }}
        replenish_rate = {{ mean = 20.0, std_dev = 1.0 }}

        [network]
        nodes = [ {nodes} ]
        edges = [ {edge_list} ]
    "#
    )
}

/// Random connected networks: a spanning chain plus random extra edges.
fn network_strategy() -> impl Strategy<Value = ScenarioConfig> {
    (2usize..8)
        .prop_flat_map(|extra| {
            let n = 2 + extra;
            let chain = proptest::collection::vec(10.0f64..2000.0, n - 1);
            let extras = proptest::collection::vec(
                (0..n, 0..n, 10.0f64..2000.0).prop_filter("distinct ends", |(a, b, _)| a != b),
                0..5,
            );
            (Just(extra), chain, extras)
        })
        .prop_map(|(extra, chain, extras)| {
            let mut edges: Vec<(usize, usize, f64)> = chain
                .into_iter()
                .enumerate()
                .map(|(i, len)| (i, i + 1, len))
                .collect();
            edges.extend(extras);
            load_config(&scenario_text(extra, &edges)).expect("generated scenario is valid")
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn travel_times_form_a_metric(config in network_strategy(), speed in 0.5f64..40.0) {
        let net = &config.network;
        let nodes: Vec<_> = net.node_ids().collect();
        for &a in &nodes {
            prop_assert_eq!(net.travel_time(a, a, speed).unwrap(), 0.0);
            for &b in &nodes {
                let ab = net.travel_time(a, b, speed).unwrap();
                let ba = net.travel_time(b, a, speed).unwrap();
                prop_assert_eq!(ab, ba);
                for &c in &nodes {
                    let ac = net.travel_time(a, c, speed).unwrap();
                    let bc = net.travel_time(b, c, speed).unwrap();
                    prop_assert!(ac <= ab + bc + 1e-9);
                }
            }
        }
    }

    #[test]
    fn positive_part_bounds(mean in -500.0f64..500.0, sd in 0.0f64..300.0) {
        let value = gaussian_positive_part(mean, sd);
        prop_assert!(value >= mean.max(0.0) - 1e-12);
        // Nondecreasing in sigma.
        let wider = gaussian_positive_part(mean, sd + 25.0);
        prop_assert!(wider >= value - 1e-9);
        // Degenerate limit.
        prop_assert!((gaussian_positive_part(mean, 0.0) - mean.max(0.0)).abs() == 0.0);
    }

    #[test]
    fn cost_identities(
        empties in proptest::collection::vec(0.0f64..3000.0, 1..8),
        raw_weights in proptest::collection::vec(0.01f64..5.0, 8),
        total in 1.0f64..5000.0,
    ) {
        let n = empties.len();
        let weights: Vec<f64> = raw_weights[..n].to_vec();
        let prediction = synthetic_prediction(&empties, total);
        let tardiness = tardiness_cost(&prediction, &weights, ObjectiveKind::DT).unwrap().value;
        let ratio = ratio_cost(&prediction, &weights, n, ObjectiveKind::DR).unwrap().value;
        prop_assert!((ratio - tardiness / (n as f64 * total)).abs() < 1e-12);

        // Normalised weights keep the ratio within [0, 1] whenever no agent
        // is empty longer than the schedule lasts.
        let sum: f64 = weights.iter().sum();
        let normalised: Vec<f64> = weights.iter().map(|w| w / sum).collect();
        let clipped: Vec<f64> = empties.iter().map(|e| e.min(total)).collect();
        let bounded = ratio_cost(
            &synthetic_prediction(&clipped, total),
            &normalised,
            n,
            ObjectiveKind::DR,
        )
        .unwrap()
        .value;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&bounded));

        // Scaling all weights scales both costs.
        let scaled: Vec<f64> = weights.iter().map(|w| 2.5 * w).collect();
        let t2 = tardiness_cost(&prediction, &scaled, ObjectiveKind::DT).unwrap().value;
        prop_assert!((t2 - 2.5 * tardiness).abs() <= 1e-9 * (1.0 + t2.abs()));
    }

    #[test]
    fn rollouts_keep_levels_bounded_and_empties_monotone(
        level_fractions in proptest::collection::vec(0.0f64..=1.0, 6),
        stock_fraction in 0.05f64..=1.0,
        task_picks in proptest::collection::vec(0usize..7, 1..8),
    ) {
        let config = six_user_config();
        let state = FleetState {
            clock: 0.0,
            user_levels: config
                .users
                .iter()
                .zip(&level_fractions)
                .map(|(u, f)| u.capacity * f)
                .collect(),
            replenisher_level: config.replenisher.capacity * stock_fraction,
            replenisher_location: config.depot.location,
        };
        // Map free picks onto a valid schedule by skipping repeats.
        let mut tasks = Vec::new();
        for pick in task_picks {
            let task = if pick == 6 { Task::VisitDepot } else { Task::ReplenishUser(pick) };
            if tasks.last() != Some(&task) {
                tasks.push(task);
            }
        }
        prop_assume!(!tasks.is_empty());
        let schedule = Schedule::new(tasks).unwrap();

        let mut rollout =
            RolloutState::new(&config, &state, RolloutMode::Deterministic, false).unwrap();
        let mut previous_accrued = 0.0f64;
        for &task in schedule.tasks() {
            rollout.apply_task(&config, task).unwrap();
            let snapshot = rollout.finish(&config);
            for (level, user) in snapshot.end_state.user_levels.iter().zip(&config.users) {
                prop_assert!((-1e-9..=user.capacity + 1e-9).contains(level));
            }
            prop_assert!(
                (0.0..=config.replenisher.capacity + 1e-9)
                    .contains(&snapshot.end_state.replenisher_level)
            );
            // Accrued (non-tail) emptiness never shrinks as the prefix grows.
            let accrued = rollout.accrued_weighted_tardiness(&config);
            prop_assert!(accrued >= previous_accrued - 1e-9);
            previous_accrued = accrued;
        }

        // Prefix empty times are dominated by the full schedule's.
        let full = rollout_deterministic(&config, &state, &schedule).unwrap();
        for k in 1..schedule.len() {
            let part = rollout_deterministic(&config, &state, &schedule.prefix(k)).unwrap();
            for i in 0..config.n_users() {
                prop_assert!(part.empty_time[i].mean <= full.empty_time[i].mean + 1e-9);
            }
        }
    }
}

fn six_user_config() -> ScenarioConfig {
    let path =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/six_users.toml");
    load_config(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synthetic_prediction(empties: &[f64], total: f64) -> scar_core::Prediction {
    use scar_core::prediction::TaskTimeline;
    use scar_core::TimeMoment;
    scar_core::Prediction {
        per_task: vec![TaskTimeline {
            task: Task::VisitDepot,
            start: TimeMoment::ZERO,
            end: TimeMoment::exact(total),
            transferred: 0.0,
        }],
        empty_time: empties.iter().map(|&m| TimeMoment::exact(m)).collect(),
        total_time: TimeMoment::exact(total),
        end_state: FleetState {
            clock: total,
            user_levels: vec![0.0; empties.len()],
            replenisher_level: 0.0,
            replenisher_location: scar_core::NodeId(0),
        },
    }
}
