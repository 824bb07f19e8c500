//! Closed-loop simulation: sample true parameter values, execute the next
//! scheduled task, observe the real fleet state, replan, repeat.
//!
//! Each run draws initial levels uniformly in [50%, 100%] of capacity from
//! the seeded generator, places the replenisher at the depot, and replans
//! with A* after every completed task so the gap between predicted and
//! actual states feeds back into the optimisation. True usage rates are
//! resampled once per task-execution window per agent; other parameters are
//! sampled once per task component. A task still in progress at the cutoff
//! is truncated at `sim_duration`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::ObjectiveKind;
use crate::prediction::{FleetState, PredictionError, MIN_SAMPLE_FRACTION};
use crate::scenario::{GaussianParam, NodeId, ScenarioConfig, Task};
use crate::search::{astar_schedule_after, SearchError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation duration must be positive (got {0})")]
    NonpositiveDuration(f64),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    State(#[from] PredictionError),
    #[error("record invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimEventKind {
    TravelStart,
    TransferStart,
    TransferEnd,
    TaskEnd,
    AgentEmpty,
    AgentReplenished,
    Replan,
}

impl std::fmt::Display for SimEventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SimEventKind::TravelStart => "travel-start",
            SimEventKind::TransferStart => "transfer-start",
            SimEventKind::TransferEnd => "transfer-end",
            SimEventKind::TaskEnd => "task-end",
            SimEventKind::AgentEmpty => "agent-empty",
            SimEventKind::AgentReplenished => "agent-replenished",
            SimEventKind::Replan => "replan",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: SimEventKind,
    pub task: Option<Task>,
    pub agent: Option<usize>,
    /// Context level: the agent's level for agent events, the replenisher's
    /// for the rest.
    pub level: Option<f64>,
}

/// Full log of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub events: Vec<SimEvent>,
    /// Closed `[start, end]` empty intervals per user agent.
    pub empty_intervals: Vec<Vec<(f64, f64)>>,
    pub final_state: FleetState,
    pub initial_state: FleetState,
    pub seed: u64,
    /// Search nodes expanded across all replans.
    pub nodes_expanded: u64,
    pub plans: u64,
}

impl SimRecord {
    /// Tab-separated event log: `time  event  task  agent  level`.
    pub fn event_log(&self) -> String {
        let mut out = String::with_capacity(self.events.len() * 32);
        out.push_str("time\tevent\ttask\tagent\tlevel\n");
        for e in &self.events {
            let task = e.task.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
            let agent = e.agent.map(|a| a.to_string()).unwrap_or_else(|| "-".into());
            let level = e
                .level
                .map(|l| format!("{l:.3}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:.3}\t{}\t{task}\t{agent}\t{level}\n",
                e.time, e.kind
            ));
        }
        out
    }
}

/// Uptime summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Mean over agents of the percentage of time spent non-empty.
    pub percent_uptime: f64,
    /// True when no agent ever ran empty.
    pub full_uptime: bool,
    pub per_agent_uptime: Vec<f64>,
}

pub struct SimOptions {
    pub objective: ObjectiveKind,
    pub horizon: usize,
    pub seed: u64,
    /// Overrides the seeded random initialisation when set.
    pub initial_state: Option<FleetState>,
}

/// Run one closed-loop simulation with randomised initial levels.
pub fn run_simulation(
    config: &ScenarioConfig,
    kind: ObjectiveKind,
    horizon: usize,
    seed: u64,
) -> Result<SimRecord, SimError> {
    run_simulation_with(
        config,
        &SimOptions {
            objective: kind,
            horizon,
            seed,
            initial_state: None,
        },
    )
}

pub fn run_simulation_with(
    config: &ScenarioConfig,
    options: &SimOptions,
) -> Result<SimRecord, SimError> {
    if !config.sim_duration.is_finite() || config.sim_duration <= 0.0 {
        return Err(SimError::NonpositiveDuration(config.sim_duration));
    }

    let mut level_rng = ChaCha8Rng::seed_from_u64(options.seed);
    let initial = match &options.initial_state {
        Some(state) => state.clone(),
        None => FleetState {
            clock: 0.0,
            user_levels: config
                .users
                .iter()
                .map(|u| u.capacity * level_rng.random_range(0.5..=1.0))
                .collect(),
            replenisher_level: config.replenisher.capacity * level_rng.random_range(0.5..=1.0),
            replenisher_location: config.depot.location,
        },
    };
    initial.validate(config)?;

    // Independent stream for the true parameter draws.
    let mut param_rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x9E37_79B9_7F4A_7C15);

    let mut exec = Executor::new(config, &initial);
    let mut nodes_expanded = 0u64;
    let mut plans = 0u64;
    let mut last_task: Option<Task> = None;

    while exec.clock < config.sim_duration {
        let outcome = astar_schedule_after(
            config,
            &exec.fleet_state(),
            options.horizon,
            options.objective,
            last_task,
        )?;
        plans += 1;
        nodes_expanded += outcome.stats.nodes_expanded;
        let first = outcome.schedule.tasks()[0];
        debug_assert_ne!(Some(first), last_task, "executed sequence repeats a task");
        last_task = Some(first);
        if matches!(first, Task::ReplenishUser(_)) {
            // The planner must never send a nearly-exhausted replenisher to
            // a user; this mirrors the tree rule on actual levels.
            assert!(
                exec.stock >= config.depot_threshold() - 1e-9,
                "plan starts with a user visit at stock {} below threshold {}",
                exec.stock,
                config.depot_threshold()
            );
        }
        exec.log(SimEventKind::Replan, Some(first), None, Some(exec.stock));
        exec.execute_task(config, first, &mut param_rng);
    }

    let record = exec.into_record(&initial, options.seed, nodes_expanded, plans);
    verify_record(config, &record)?;
    Ok(record)
}

/// Uptime metrics from a run record.
pub fn compute_metrics(record: &SimRecord, n: usize, sim_duration: f64) -> RunMetrics {
    assert_eq!(
        record.empty_intervals.len(),
        n,
        "record does not match agent count"
    );
    let per_agent_uptime: Vec<f64> = record
        .empty_intervals
        .iter()
        .map(|intervals| {
            let empty: f64 = intervals.iter().map(|(s, e)| e - s).sum();
            100.0 * (1.0 - empty / sim_duration)
        })
        .collect();
    let percent_uptime = per_agent_uptime.iter().sum::<f64>() / n as f64;
    let full_uptime = record.empty_intervals.iter().all(|iv| iv.is_empty());
    RunMetrics {
        percent_uptime,
        full_uptime,
        per_agent_uptime,
    }
}

fn sample(rng: &mut ChaCha8Rng, p: GaussianParam) -> f64 {
    if p.std_dev == 0.0 {
        return p.mean;
    }
    let draw = Normal::new(p.mean, p.std_dev)
        .expect("validated std_dev")
        .sample(rng);
    draw.max(MIN_SAMPLE_FRACTION * p.mean)
}

struct Executor {
    clock: f64,
    duration: f64,
    levels: Vec<f64>,
    stock: f64,
    location: NodeId,
    consumed: Vec<f64>,
    delivered: Vec<f64>,
    empty_open: Vec<Option<f64>>,
    intervals: Vec<Vec<(f64, f64)>>,
    events: Vec<SimEvent>,
    truncated: bool,
}

impl Executor {
    fn new(config: &ScenarioConfig, initial: &FleetState) -> Self {
        let n = config.n_users();
        let mut exec = Self {
            clock: initial.clock,
            duration: config.sim_duration,
            levels: initial.user_levels.clone(),
            stock: initial.replenisher_level,
            location: initial.replenisher_location,
            consumed: vec![0.0; n],
            delivered: vec![0.0; n],
            empty_open: vec![None; n],
            intervals: vec![Vec::new(); n],
            events: Vec::new(),
            truncated: false,
        };
        for j in 0..n {
            if exec.levels[j] <= 0.0 {
                exec.empty_open[j] = Some(exec.clock);
                exec.log(SimEventKind::AgentEmpty, None, Some(j), Some(0.0));
            }
        }
        exec
    }

    fn fleet_state(&self) -> FleetState {
        FleetState {
            clock: self.clock,
            user_levels: self.levels.clone(),
            replenisher_level: self.stock,
            replenisher_location: self.location,
        }
    }

    fn log(
        &mut self,
        kind: SimEventKind,
        task: Option<Task>,
        agent: Option<usize>,
        level: Option<f64>,
    ) {
        self.events.push(SimEvent {
            time: self.clock,
            kind,
            task,
            agent,
            level,
        });
    }

    /// Advance `dt` seconds with every agent draining at its window rate,
    /// except an optional rising transfer target. Returns the actually
    /// elapsed time (shorter when the cutoff interrupts).
    #[allow(clippy::needless_range_loop)]
    fn drain(
        &mut self,
        config: &ScenarioConfig,
        dt: f64,
        usage: &[f64],
        rising: Option<usize>,
    ) -> f64 {
        let dt = if self.clock + dt >= self.duration {
            self.truncated = true;
            self.duration - self.clock
        } else {
            dt
        };
        let mut crossings: Vec<(f64, usize)> = Vec::new();
        for j in 0..self.levels.len() {
            if rising == Some(j) || self.empty_open[j].is_some() {
                continue;
            }
            let drained = usage[j] * dt;
            if self.levels[j] <= drained {
                let t_cross = self.clock + self.levels[j] / usage[j];
                self.consumed[j] += self.levels[j];
                self.levels[j] = 0.0;
                self.empty_open[j] = Some(t_cross.min(self.duration));
                crossings.push((t_cross.min(self.duration), j));
            } else {
                self.levels[j] -= drained;
                self.consumed[j] += drained;
            }
            debug_assert!(
                self.levels[j] >= 0.0 && self.levels[j] <= config.users[j].capacity + 1e-9
            );
        }
        crossings.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (t, j) in crossings {
            self.events.push(SimEvent {
                time: t,
                kind: SimEventKind::AgentEmpty,
                task: None,
                agent: Some(j),
                level: Some(0.0),
            });
        }
        if self.truncated {
            self.clock = self.duration;
        } else {
            self.clock += dt;
        }
        dt
    }

    fn execute_task(&mut self, config: &ScenarioConfig, task: Task, rng: &mut ChaCha8Rng) {
        // One true usage rate per agent for this task-execution window.
        let usage: Vec<f64> = config
            .users
            .iter()
            .map(|u| sample(rng, u.usage_rate))
            .collect();
        let speed = sample(rng, config.replenisher.speed);

        match task {
            Task::ReplenishUser(i) => {
                let user = &config.users[i];
                self.log(
                    SimEventKind::TravelStart,
                    Some(task),
                    None,
                    Some(self.stock),
                );
                let travel = config.network.distance(self.location, user.location) / speed;
                self.location = user.location;
                self.drain(config, travel, &usage, None);
                if self.truncated {
                    return;
                }
                let setup = sample(rng, config.replenisher.setup_time);
                self.drain(config, setup, &usage, None);
                if self.truncated {
                    return;
                }

                // Transfer begins: any open empty interval for this agent
                // ends now.
                self.log(
                    SimEventKind::TransferStart,
                    Some(task),
                    Some(i),
                    Some(self.levels[i]),
                );
                if let Some(onset) = self.empty_open[i].take() {
                    if self.clock > onset {
                        self.intervals[i].push((onset, self.clock));
                    }
                    self.log(
                        SimEventKind::AgentReplenished,
                        Some(task),
                        Some(i),
                        Some(self.levels[i]),
                    );
                }

                let rate = sample(rng, config.replenisher.replenish_rate);
                let net = rate - usage[i];
                let deficit = (user.capacity - self.levels[i]).max(0.0);
                let fill_time = if net > 0.0 {
                    deficit / net
                } else {
                    f64::INFINITY
                };
                let exhaust_time = self.stock / rate;
                let (tau, fills_user) = if fill_time <= exhaust_time {
                    (fill_time, true)
                } else {
                    (exhaust_time, false)
                };

                let level_before = self.levels[i];
                let elapsed = self.drain(config, tau, &usage, Some(i));
                let moved = rate * elapsed;
                self.consumed[i] += usage[i] * elapsed;
                self.delivered[i] += moved;
                if fills_user && !self.truncated {
                    self.levels[i] = user.capacity;
                    self.stock = (self.stock - moved).max(0.0);
                } else if !fills_user && !self.truncated {
                    self.levels[i] = (level_before + net * elapsed).clamp(0.0, user.capacity);
                    self.stock = 0.0;
                } else {
                    self.levels[i] = (level_before + net * elapsed).clamp(0.0, user.capacity);
                    self.stock = (self.stock - moved).max(0.0);
                }
                if self.truncated {
                    return;
                }
                self.log(
                    SimEventKind::TransferEnd,
                    Some(task),
                    Some(i),
                    Some(self.levels[i]),
                );

                let packup = sample(rng, config.replenisher.packup_time);
                self.drain(config, packup, &usage, None);
                if self.truncated {
                    return;
                }
                self.log(SimEventKind::TaskEnd, Some(task), None, Some(self.stock));
            }
            Task::VisitDepot => {
                self.log(
                    SimEventKind::TravelStart,
                    Some(task),
                    None,
                    Some(self.stock),
                );
                let travel = config
                    .network
                    .distance(self.location, config.depot.location)
                    / speed;
                self.location = config.depot.location;
                self.drain(config, travel, &usage, None);
                if self.truncated {
                    return;
                }
                let setup = sample(rng, config.depot.setup_time);
                self.drain(config, setup, &usage, None);
                if self.truncated {
                    return;
                }

                self.log(
                    SimEventKind::TransferStart,
                    Some(task),
                    None,
                    Some(self.stock),
                );
                let rate = sample(rng, config.depot.replenish_rate);
                let deficit = (config.replenisher.capacity - self.stock).max(0.0);
                let tau = deficit / rate;
                let elapsed = self.drain(config, tau, &usage, None);
                if self.truncated {
                    self.stock = (self.stock + rate * elapsed).min(config.replenisher.capacity);
                    return;
                }
                self.stock = config.replenisher.capacity;
                self.log(
                    SimEventKind::TransferEnd,
                    Some(task),
                    None,
                    Some(self.stock),
                );

                let packup = sample(rng, config.depot.packup_time);
                self.drain(config, packup, &usage, None);
                if self.truncated {
                    return;
                }
                self.log(SimEventKind::TaskEnd, Some(task), None, Some(self.stock));
            }
        }
    }

    fn into_record(
        mut self,
        initial: &FleetState,
        seed: u64,
        nodes_expanded: u64,
        plans: u64,
    ) -> SimRecord {
        for j in 0..self.levels.len() {
            if let Some(onset) = self.empty_open[j].take() {
                if self.clock > onset {
                    self.intervals[j].push((onset, self.clock));
                }
            }
            // Resource conservation: what went in minus what was burned is
            // what remains.
            let balance = initial.user_levels[j] + self.delivered[j] - self.consumed[j];
            let scale = (initial.user_levels[j] + self.delivered[j]).max(1.0);
            assert!(
                (balance - self.levels[j]).abs() <= 1e-6 * scale,
                "agent {j} conservation violated: balance {balance} vs level {}",
                self.levels[j]
            );
        }
        assert!(self.stock >= 0.0, "replenisher stock went negative");
        SimRecord {
            events: self.events,
            empty_intervals: self.intervals,
            final_state: FleetState {
                clock: self.clock,
                user_levels: self.levels,
                replenisher_level: self.stock,
                replenisher_location: self.location,
            },
            initial_state: initial.clone(),
            seed,
            nodes_expanded,
            plans,
        }
    }
}

/// Check the structural invariants of a run record.
pub fn verify_record(config: &ScenarioConfig, record: &SimRecord) -> Result<(), SimError> {
    let invariant = |msg: String| Err(SimError::Invariant(msg));
    let duration = config.sim_duration;

    for pair in record.events.windows(2) {
        if pair[1].time < pair[0].time - 1e-9 {
            return invariant(format!(
                "events out of order: {} after {}",
                pair[1].time, pair[0].time
            ));
        }
    }

    let executed: Vec<Task> = record
        .events
        .iter()
        .filter(|e| e.kind == SimEventKind::Replan)
        .filter_map(|e| e.task)
        .collect();
    for pair in executed.windows(2) {
        if pair[0] == pair[1] {
            return invariant(format!("executed sequence repeats task {}", pair[0]));
        }
    }

    let task_end_times: Vec<f64> = record
        .events
        .iter()
        .filter(|e| e.kind == SimEventKind::TaskEnd)
        .map(|e| e.time)
        .collect();
    for e in record
        .events
        .iter()
        .filter(|e| e.kind == SimEventKind::Replan)
    {
        if e.time > record.initial_state.clock
            && !task_end_times.iter().any(|&t| (t - e.time).abs() <= 1e-9)
        {
            return invariant(format!(
                "replan at {} does not coincide with a task end",
                e.time
            ));
        }
        // Forced depot on actual stock.
        if let (Some(Task::ReplenishUser(_)), Some(level)) = (e.task, e.level) {
            if level < config.depot_threshold() - 1e-9 {
                return invariant(format!(
                    "user visit planned at stock {level} below threshold {}",
                    config.depot_threshold()
                ));
            }
        }
    }

    for (j, intervals) in record.empty_intervals.iter().enumerate() {
        let mut prev_end = f64::NEG_INFINITY;
        for &(start, end) in intervals {
            if start >= end || start.is_nan() || end.is_nan() {
                return invariant(format!(
                    "agent {j} empty interval [{start}, {end}] is empty"
                ));
            }
            if start < record.initial_state.clock - 1e-9 || end > duration + 1e-9 {
                return invariant(format!(
                    "agent {j} empty interval [{start}, {end}] outside the run"
                ));
            }
            if start < prev_end - 1e-9 {
                return invariant(format!("agent {j} empty intervals overlap at {start}"));
            }
            prev_end = end;
            // The interval must close at this agent's transfer start or at
            // the cutoff.
            let closes_at_transfer = record.events.iter().any(|e| {
                e.kind == SimEventKind::TransferStart
                    && e.agent == Some(j)
                    && (e.time - end).abs() <= 1e-9
            });
            if !closes_at_transfer && (end - duration).abs() > 1e-9 {
                return invariant(format!(
                    "agent {j} empty interval ends at {end}, not at a transfer start or cutoff"
                ));
            }
            let opens_at_empty_event = record.events.iter().any(|e| {
                e.kind == SimEventKind::AgentEmpty
                    && e.agent == Some(j)
                    && (e.time - start).abs() <= 1e-9
            });
            if !opens_at_empty_event {
                return invariant(format!(
                    "agent {j} empty interval starts at {start} without an agent-empty event"
                ));
            }
        }
    }

    let fs = &record.final_state;
    for (j, (&level, user)) in fs.user_levels.iter().zip(&config.users).enumerate() {
        if !(-1e-9..=user.capacity + 1e-9).contains(&level) {
            return invariant(format!("agent {j} final level {level} out of bounds"));
        }
    }
    if !(-1e-9..=config.replenisher.capacity + 1e-9).contains(&fs.replenisher_level) {
        return invariant(format!(
            "replenisher final level {} out of bounds",
            fs.replenisher_level
        ));
    }
    Ok(())
}
