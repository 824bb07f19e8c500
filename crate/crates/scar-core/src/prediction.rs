//! Schedule rollouts: given a fleet state and a candidate schedule, predict
//! when each user agent runs empty and how long the whole schedule takes.
//!
//! Three modes share the same task arithmetic:
//!
//! * [`rollout_deterministic`] evaluates everything at parameter means.
//! * [`rollout_stochastic`] propagates first-order Gaussian moments and turns
//!   each potential empty segment into an expected value via
//!   [`gaussian_positive_part`], so schedules that merely *risk* emptiness
//!   already carry cost.
//! * [`rollout_monte_carlo`] samples whole trajectories and aggregates them;
//!   it is the reference the analytical estimator is validated against.
//!
//! Emptiness follows soft-deadline semantics: an agent's empty period ends
//! the moment its replenishment transfer *begins*, not when its tank is full.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{GaussianParam, NodeId, ScenarioConfig, Schedule, Task};

/// Sampled physical quantities are clamped below at this fraction of their
/// mean so a wide Gaussian cannot produce a negative rate or duration.
pub const MIN_SAMPLE_FRACTION: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("task references user {0} but the scenario has {1} users")]
    UserOutOfRange(usize, usize),
    #[error(
        "transfer to user {user} cannot progress: replenish rate {rate} <= usage rate {usage}"
    )]
    NoProgress { user: usize, rate: f64, usage: f64 },
    #[error("fleet state invalid: {0}")]
    InvalidState(String),
    #[error("monte carlo rollout needs at least one sample")]
    NoSamples,
}

/// A time-like quantity carrying a mean and a variance.
///
/// Deterministic rollouts always produce zero variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMoment {
    pub mean: f64,
    pub variance: f64,
}

impl TimeMoment {
    pub const ZERO: TimeMoment = TimeMoment {
        mean: 0.0,
        variance: 0.0,
    };

    pub fn exact(mean: f64) -> Self {
        Self {
            mean,
            variance: 0.0,
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    fn add(self, other: TimeMoment) -> TimeMoment {
        TimeMoment {
            mean: self.mean + other.mean,
            variance: self.variance + other.variance,
        }
    }
}

/// First-order moment of `numerator / denominator` where the numerator is
/// treated as known and the denominator is Gaussian: the variance follows the
/// delta method, `num^2 * var_den / mean_den^4`.
fn quotient_moment(numerator: f64, den_mean: f64, den_var: f64) -> TimeMoment {
    let mean = numerator / den_mean;
    let variance = numerator * numerator * den_var / (den_mean * den_mean * den_mean * den_mean);
    TimeMoment { mean, variance }
}

/// Snapshot of the fleet at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetState {
    pub clock: f64,
    pub user_levels: Vec<f64>,
    pub replenisher_level: f64,
    pub replenisher_location: NodeId,
}

impl FleetState {
    /// Everything full, replenisher parked at the depot, clock zero.
    pub fn full_at_depot(config: &ScenarioConfig) -> Self {
        Self {
            clock: 0.0,
            user_levels: config.users.iter().map(|u| u.capacity).collect(),
            replenisher_level: config.replenisher.capacity,
            replenisher_location: config.depot.location,
        }
    }

    pub fn validate(&self, config: &ScenarioConfig) -> Result<(), PredictionError> {
        if self.user_levels.len() != config.n_users() {
            return Err(PredictionError::InvalidState(format!(
                "{} user levels for {} users",
                self.user_levels.len(),
                config.n_users()
            )));
        }
        for (i, (&level, user)) in self.user_levels.iter().zip(&config.users).enumerate() {
            if !(0.0..=user.capacity).contains(&level) {
                return Err(PredictionError::InvalidState(format!(
                    "user {i} level {level} outside [0, {}]",
                    user.capacity
                )));
            }
        }
        if !(0.0..=config.replenisher.capacity).contains(&self.replenisher_level) {
            return Err(PredictionError::InvalidState(format!(
                "replenisher level {} outside [0, {}]",
                self.replenisher_level, config.replenisher.capacity
            )));
        }
        if !self.clock.is_finite() || self.clock < 0.0 {
            return Err(PredictionError::InvalidState(format!(
                "clock {} < 0",
                self.clock
            )));
        }
        if self.replenisher_location.0 >= config.network.node_count() {
            return Err(PredictionError::InvalidState(
                "replenisher location out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Predicted timeline of one task within a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaskTimeline {
    pub task: Task,
    pub start: TimeMoment,
    pub end: TimeMoment,
    /// Litres moved during the transfer (to the user, or into the
    /// replenisher for a depot visit).
    pub transferred: f64,
}

/// The outcome of rolling a schedule forward from a fleet state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub per_task: Vec<TaskTimeline>,
    /// Expected time each user spends empty during the schedule.
    pub empty_time: Vec<TimeMoment>,
    /// Expected total schedule time.
    pub total_time: TimeMoment,
    /// Mean fleet state at the end of the schedule.
    pub end_state: FleetState,
}

/// Duration components of a single task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskComponents {
    pub travel: TimeMoment,
    pub setup: TimeMoment,
    pub transfer: TimeMoment,
    pub packup: TimeMoment,
    pub transferred: f64,
}

impl TaskComponents {
    pub fn total(&self) -> TimeMoment {
        self.travel
            .add(self.setup)
            .add(self.transfer)
            .add(self.packup)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutMode {
    Deterministic,
    Stochastic,
}

/// Expected value of `max(0, X)` for `X ~ N(mean, std_dev^2)`.
///
/// For `std_dev = 0` this is exactly `max(0, mean)`; it is nondecreasing in
/// both arguments and never below `max(0, mean)`.
pub fn gaussian_positive_part(mean: f64, std_dev: f64) -> f64 {
    debug_assert!(std_dev >= 0.0, "negative std_dev {std_dev}");
    if std_dev <= 0.0 {
        return mean.max(0.0);
    }
    let z = mean / std_dev;
    mean * std_normal_cdf(z) + std_dev * std_normal_pdf(z)
}

/// Variance of `max(0, X)` for `X ~ N(mean, std_dev^2)`.
pub fn gaussian_positive_part_variance(mean: f64, std_dev: f64) -> f64 {
    if std_dev <= 0.0 {
        return 0.0;
    }
    let z = mean / std_dev;
    let second_moment =
        (mean * mean + std_dev * std_dev) * std_normal_cdf(z) + mean * std_dev * std_normal_pdf(z);
    let first = gaussian_positive_part(mean, std_dev);
    (second_moment - first * first).max(0.0)
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected value of `max(0, X)` for `X ~ N(diff_mean, diff_var)`, with
/// early exits deep in either tail (beyond 9 sigma the correction is below
/// 1e-18 of the scale).
fn positive_part_mean(diff_mean: f64, diff_var: f64) -> f64 {
    if diff_var <= 0.0 {
        return diff_mean.max(0.0);
    }
    let sd = diff_var.sqrt();
    let z = diff_mean / sd;
    if z <= -9.0 {
        return 0.0;
    }
    if z >= 9.0 {
        return diff_mean;
    }
    diff_mean * std_normal_cdf(z) + sd * std_normal_pdf(z)
}

fn positive_part_moment(diff_mean: f64, diff_var: f64) -> TimeMoment {
    if diff_var <= 0.0 {
        return TimeMoment {
            mean: diff_mean.max(0.0),
            variance: 0.0,
        };
    }
    let sd = diff_var.sqrt();
    let z = diff_mean / sd;
    if z <= -9.0 {
        return TimeMoment::ZERO;
    }
    if z >= 9.0 {
        return TimeMoment {
            mean: diff_mean,
            variance: diff_var,
        };
    }
    let cdf = std_normal_cdf(z);
    let pdf = std_normal_pdf(z);
    let mean = diff_mean * cdf + sd * pdf;
    let second_moment = (diff_mean * diff_mean + diff_var) * cdf + diff_mean * sd * pdf;
    TimeMoment {
        mean,
        variance: (second_moment - mean * mean).max(0.0),
    }
}

/// Per-agent bookkeeping between two of its own replenishments.
///
/// A window opens at schedule start or at the agent's transfer end, and closes
/// at its next transfer start or at schedule end. Within a window the level
/// drains linearly at the mean usage rate; the uncertainty of the drained
/// amount is accumulated per task component so the estimator matches the
/// per-component resampling of the Monte-Carlo reference.
#[derive(Debug, Clone)]
struct AgentWindow {
    window_start: TimeMoment,
    level_at_start: f64,
    /// Seconds from window start until the mean level reaches zero.
    deplete_offset: f64,
    /// Variance of litres drained so far this window.
    drain_variance: f64,
    /// Depletion moment, frozen when the mean level crosses zero.
    depleted: Option<TimeMoment>,
    /// Empty time accrued over windows already closed.
    closed_empty: TimeMoment,
}

impl AgentWindow {
    fn open(at: TimeMoment, level: f64, usage_mean: f64, closed_empty: TimeMoment) -> Self {
        Self {
            window_start: at,
            level_at_start: level,
            deplete_offset: level / usage_mean,
            drain_variance: 0.0,
            depleted: None,
            closed_empty,
        }
    }

    /// The (projected) depletion moment used when the window closes at `_at`.
    /// If the mean level never crossed zero the projection looks past the
    /// window end; the positive-part transform then prices in the risk that
    /// the true rate ran faster than its mean.
    fn depletion_moment(&self, usage_mean: f64) -> TimeMoment {
        self.depleted.unwrap_or(TimeMoment {
            mean: self.window_start.mean + self.deplete_offset,
            variance: self.window_start.variance + self.drain_variance / (usage_mean * usage_mean),
        })
    }

    fn empty_at(&self, at: TimeMoment, usage_mean: f64) -> TimeMoment {
        let dep = self.depletion_moment(usage_mean);
        positive_part_moment(at.mean - dep.mean, at.variance + dep.variance)
    }

    fn empty_mean_at(&self, at: TimeMoment, usage_mean: f64) -> f64 {
        let dep = self.depletion_moment(usage_mean);
        positive_part_mean(at.mean - dep.mean, at.variance + dep.variance)
    }

    fn level_at(&self, at_mean: f64, usage_mean: f64) -> f64 {
        if self.depleted.is_some() {
            return 0.0;
        }
        (self.level_at_start - usage_mean * (at_mean - self.window_start.mean)).max(0.0)
    }
}

/// Incremental moment-propagating rollout.
///
/// Search extends one of these per tree node; the full-schedule entry points
/// fold it over a task list and call [`RolloutState::finish`].
#[derive(Debug, Clone)]
pub struct RolloutState {
    stochastic: bool,
    start_clock: f64,
    clock: TimeMoment,
    replenisher_level: f64,
    location: NodeId,
    agents: Vec<AgentWindow>,
    timeline: Option<Vec<TaskTimeline>>,
}

impl RolloutState {
    pub fn new(
        config: &ScenarioConfig,
        state: &FleetState,
        mode: RolloutMode,
        record_timeline: bool,
    ) -> Result<Self, PredictionError> {
        state.validate(config)?;
        let clock = TimeMoment::exact(state.clock);
        let agents = config
            .users
            .iter()
            .zip(&state.user_levels)
            .map(|(user, &level)| {
                AgentWindow::open(clock, level, user.usage_rate.mean, TimeMoment::ZERO)
            })
            .collect();
        Ok(Self {
            stochastic: mode == RolloutMode::Stochastic,
            start_clock: state.clock,
            clock,
            replenisher_level: state.replenisher_level,
            location: state.replenisher_location,
            agents,
            timeline: record_timeline.then(Vec::new),
        })
    }

    fn param(&self, p: GaussianParam) -> (f64, f64) {
        if self.stochastic {
            (p.mean, p.variance())
        } else {
            (p.mean, 0.0)
        }
    }

    fn duration_moment(&self, p: GaussianParam) -> TimeMoment {
        let (mean, variance) = self.param(p);
        TimeMoment { mean, variance }
    }

    pub fn clock(&self) -> TimeMoment {
        self.clock
    }

    pub fn elapsed(&self) -> TimeMoment {
        TimeMoment {
            mean: self.clock.mean - self.start_clock,
            variance: self.clock.variance,
        }
    }

    pub fn replenisher_level(&self) -> f64 {
        self.replenisher_level
    }

    pub fn location(&self) -> NodeId {
        self.location
    }

    /// Advance every draining agent through a component of length `dt`.
    fn advance(&mut self, config: &ScenarioConfig, dt: TimeMoment, rising: Option<usize>) {
        for (j, window) in self.agents.iter_mut().enumerate() {
            if rising == Some(j) || window.depleted.is_some() {
                continue;
            }
            let usage = config.users[j].usage_rate;
            let (usage_mean, usage_var) = if self.stochastic {
                (usage.mean, usage.variance())
            } else {
                (usage.mean, 0.0)
            };
            let end_offset = self.clock.mean + dt.mean - window.window_start.mean;
            if window.deplete_offset <= end_offset {
                // Mean level hits zero during this component.
                let pre = (window.window_start.mean + window.deplete_offset - self.clock.mean)
                    .clamp(0.0, dt.mean);
                let drain_var = window.drain_variance + usage_var * pre * pre;
                window.depleted = Some(TimeMoment {
                    mean: window.window_start.mean + window.deplete_offset,
                    variance: window.window_start.variance + drain_var / (usage_mean * usage_mean),
                });
                window.drain_variance = drain_var;
            } else {
                window.drain_variance += usage_var * dt.mean * dt.mean;
            }
        }
        self.clock = self.clock.add(dt);
    }

    /// Apply one task, returning its duration components.
    pub fn apply_task(
        &mut self,
        config: &ScenarioConfig,
        task: Task,
    ) -> Result<TaskComponents, PredictionError> {
        let start = self.clock;
        let (speed_mean, speed_var) = self.param(config.replenisher.speed);
        let components = match task {
            Task::ReplenishUser(i) => {
                if i >= config.n_users() {
                    return Err(PredictionError::UserOutOfRange(i, config.n_users()));
                }
                let user = &config.users[i];
                let distance = config.network.distance(self.location, user.location);
                let travel = quotient_moment(distance, speed_mean, speed_var);
                self.advance(config, travel, None);
                let setup = self.duration_moment(config.replenisher.setup_time);
                self.advance(config, setup, None);

                // Transfer begins: the agent's empty period (if any) ends here.
                let transfer_start = self.clock;
                let closed = self.agents[i]
                    .closed_empty
                    .add(self.agents[i].empty_at(transfer_start, user.usage_rate.mean));

                let level = self.agents[i].level_at(transfer_start.mean, user.usage_rate.mean);
                let deficit = (user.capacity - level).max(0.0);
                let (rate_mean, rate_var) = self.param(config.replenisher.replenish_rate);
                let (usage_mean, usage_var) = self.param(user.usage_rate);
                let net_mean = rate_mean - usage_mean;
                if net_mean <= 0.0 {
                    return Err(PredictionError::NoProgress {
                        user: i,
                        rate: rate_mean,
                        usage: usage_mean,
                    });
                }
                let fill = quotient_moment(deficit, net_mean, rate_var + usage_var);
                let exhaust = quotient_moment(self.replenisher_level, rate_mean, rate_var);
                let (transfer, fills_user) = if fill.mean <= exhaust.mean {
                    (fill, true)
                } else {
                    (exhaust, false)
                };
                self.advance(config, transfer, Some(i));

                let (new_level, transferred) = if fills_user {
                    (user.capacity, rate_mean * transfer.mean)
                } else {
                    (
                        (level + net_mean * transfer.mean).clamp(0.0, user.capacity),
                        self.replenisher_level,
                    )
                };
                self.replenisher_level = if fills_user {
                    (self.replenisher_level - transferred).max(0.0)
                } else {
                    0.0
                };
                self.agents[i] =
                    AgentWindow::open(self.clock, new_level, user.usage_rate.mean, closed);

                let packup = self.duration_moment(config.replenisher.packup_time);
                self.advance(config, packup, None);
                self.location = user.location;
                TaskComponents {
                    travel,
                    setup,
                    transfer,
                    packup,
                    transferred,
                }
            }
            Task::VisitDepot => {
                let distance = config
                    .network
                    .distance(self.location, config.depot.location);
                let travel = quotient_moment(distance, speed_mean, speed_var);
                self.advance(config, travel, None);
                let setup = self.duration_moment(config.depot.setup_time);
                self.advance(config, setup, None);

                let deficit = (config.replenisher.capacity - self.replenisher_level).max(0.0);
                let (rate_mean, rate_var) = self.param(config.depot.replenish_rate);
                let transfer = quotient_moment(deficit, rate_mean, rate_var);
                self.advance(config, transfer, None);
                self.replenisher_level = config.replenisher.capacity;

                let packup = self.duration_moment(config.depot.packup_time);
                self.advance(config, packup, None);
                self.location = config.depot.location;
                TaskComponents {
                    travel,
                    setup,
                    transfer,
                    packup,
                    transferred: deficit,
                }
            }
        };
        if let Some(timeline) = &mut self.timeline {
            timeline.push(TaskTimeline {
                task,
                start,
                end: self.clock,
                transferred: components.transferred,
            });
        }
        Ok(components)
    }

    /// Empty time accrued by user `i` up to the current clock: all closed
    /// windows plus the open window evaluated as if it closed now.
    pub fn accrued_empty(&self, config: &ScenarioConfig, i: usize) -> TimeMoment {
        self.agents[i]
            .closed_empty
            .add(self.agents[i].empty_at(self.clock, config.users[i].usage_rate.mean))
    }

    /// Priority-weighted sum of accrued empty-time means.
    pub fn accrued_weighted_tardiness(&self, config: &ScenarioConfig) -> f64 {
        self.agents
            .iter()
            .zip(&config.users)
            .map(|(w, user)| {
                user.weight
                    * (w.closed_empty.mean + w.empty_mean_at(self.clock, user.usage_rate.mean))
            })
            .sum()
    }

    /// Close every window at the current clock and assemble the prediction.
    pub fn finish(&self, config: &ScenarioConfig) -> Prediction {
        let end = self.clock;
        let empty_time: Vec<TimeMoment> = self
            .agents
            .iter()
            .zip(&config.users)
            .map(|(w, user)| w.closed_empty.add(w.empty_at(end, user.usage_rate.mean)))
            .collect();
        let user_levels = self
            .agents
            .iter()
            .zip(&config.users)
            .map(|(w, user)| w.level_at(end.mean, user.usage_rate.mean))
            .collect();
        Prediction {
            per_task: self.timeline.clone().unwrap_or_default(),
            empty_time,
            total_time: TimeMoment {
                mean: end.mean - self.start_clock,
                variance: end.variance,
            },
            end_state: FleetState {
                clock: end.mean,
                user_levels,
                replenisher_level: self.replenisher_level,
                replenisher_location: self.location,
            },
        }
    }
}

/// Duration components of `task` performed from `state`, without mutating it.
pub fn task_duration(
    config: &ScenarioConfig,
    state: &FleetState,
    task: Task,
    mode: RolloutMode,
) -> Result<TaskComponents, PredictionError> {
    let mut rollout = RolloutState::new(config, state, mode, false)?;
    rollout.apply_task(config, task)
}

fn rollout(
    config: &ScenarioConfig,
    state: &FleetState,
    schedule: &Schedule,
    mode: RolloutMode,
) -> Result<Prediction, PredictionError> {
    let mut rs = RolloutState::new(config, state, mode, true)?;
    for &task in schedule.tasks() {
        rs.apply_task(config, task)?;
    }
    Ok(rs.finish(config))
}

/// Roll the schedule forward with every parameter at its mean.
pub fn rollout_deterministic(
    config: &ScenarioConfig,
    state: &FleetState,
    schedule: &Schedule,
) -> Result<Prediction, PredictionError> {
    rollout(config, state, schedule, RolloutMode::Deterministic)
}

/// Roll the schedule forward propagating Gaussian uncertainty. With all
/// standard deviations zero this reduces to [`rollout_deterministic`].
pub fn rollout_stochastic(
    config: &ScenarioConfig,
    state: &FleetState,
    schedule: &Schedule,
) -> Result<Prediction, PredictionError> {
    rollout(config, state, schedule, RolloutMode::Stochastic)
}

// ---------------------------------------------------------------------------
// Monte-Carlo reference
// ---------------------------------------------------------------------------

/// One concrete draw per parameter per task component.
trait ParamSource {
    fn draw(&mut self, p: GaussianParam) -> f64;
}

#[cfg(test)]
struct MeanSource;

#[cfg(test)]
impl ParamSource for MeanSource {
    fn draw(&mut self, p: GaussianParam) -> f64 {
        p.mean
    }
}

struct SampledSource<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl ParamSource for SampledSource<'_> {
    fn draw(&mut self, p: GaussianParam) -> f64 {
        if p.std_dev == 0.0 {
            return p.mean;
        }
        let sample = Normal::new(p.mean, p.std_dev)
            .expect("validated std_dev")
            .sample(self.rng);
        sample.max(MIN_SAMPLE_FRACTION * p.mean)
    }
}

struct ConcreteAgent {
    level: f64,
    depleted_at: Option<f64>,
    empty_total: f64,
}

struct ConcreteOutcome {
    empty_time: Vec<f64>,
    total_time: f64,
    final_levels: Vec<f64>,
    final_replenisher: f64,
    per_task: Vec<(f64, f64, f64)>, // start, end, transferred
}

/// One trajectory with concrete parameter values; each component draws fresh
/// values for its duration parameter and for every agent's usage rate.
fn rollout_concrete<S: ParamSource>(
    config: &ScenarioConfig,
    state: &FleetState,
    schedule: &Schedule,
    src: &mut S,
) -> Result<ConcreteOutcome, PredictionError> {
    state.validate(config)?;
    let n = config.n_users();
    let mut agents: Vec<ConcreteAgent> = state
        .user_levels
        .iter()
        .map(|&level| ConcreteAgent {
            level,
            depleted_at: None,
            empty_total: 0.0,
        })
        .collect();
    let mut clock = state.clock;
    let mut stock = state.replenisher_level;
    let mut location = state.replenisher_location;
    let mut per_task = Vec::with_capacity(schedule.len());

    // Drain all agents (minus an optional rising target) through `dt`.
    fn drain<S: ParamSource>(
        config: &ScenarioConfig,
        agents: &mut [ConcreteAgent],
        src: &mut S,
        clock: &mut f64,
        dt: f64,
        skip: Option<usize>,
    ) {
        for (j, agent) in agents.iter_mut().enumerate() {
            let rate = src.draw(config.users[j].usage_rate);
            if Some(j) == skip || agent.depleted_at.is_some() {
                continue;
            }
            let drained = rate * dt;
            if agent.level <= drained {
                agent.depleted_at = Some(*clock + agent.level / rate);
                agent.level = 0.0;
            } else {
                agent.level -= drained;
            }
        }
        *clock += dt;
    }

    for &task in schedule.tasks() {
        match task {
            Task::ReplenishUser(i) => {
                if i >= n {
                    return Err(PredictionError::UserOutOfRange(i, n));
                }
                let user = &config.users[i];
                let start = clock;
                let distance = config.network.distance(location, user.location);
                let speed = src.draw(config.replenisher.speed);
                drain(config, &mut agents, src, &mut clock, distance / speed, None);
                let setup = src.draw(config.replenisher.setup_time);
                drain(config, &mut agents, src, &mut clock, setup, None);

                // Transfer start: close this agent's empty period, if open.
                if let Some(t_dep) = agents[i].depleted_at.take() {
                    agents[i].empty_total += clock - t_dep;
                }
                let rate = src.draw(config.replenisher.replenish_rate);
                let usage = src.draw(user.usage_rate);
                let net = rate - usage;
                let deficit = (user.capacity - agents[i].level).max(0.0);
                let fill_time = if net > 0.0 {
                    deficit / net
                } else {
                    f64::INFINITY
                };
                let exhaust_time = stock / rate;
                let (tau, fills_user) = if fill_time <= exhaust_time {
                    (fill_time, true)
                } else {
                    (exhaust_time, false)
                };
                let transferred;
                let level_before = agents[i].level;
                drain(config, &mut agents, src, &mut clock, tau, Some(i));
                if fills_user {
                    transferred = rate * tau;
                    agents[i].level = user.capacity;
                    stock = (stock - transferred).max(0.0);
                } else {
                    transferred = stock;
                    agents[i].level = (level_before + net * tau).clamp(0.0, user.capacity);
                    stock = 0.0;
                }

                let packup = src.draw(config.replenisher.packup_time);
                drain(config, &mut agents, src, &mut clock, packup, None);
                location = user.location;
                per_task.push((start, clock, transferred));
            }
            Task::VisitDepot => {
                let start = clock;
                let distance = config.network.distance(location, config.depot.location);
                let speed = src.draw(config.replenisher.speed);
                drain(config, &mut agents, src, &mut clock, distance / speed, None);
                let setup = src.draw(config.depot.setup_time);
                drain(config, &mut agents, src, &mut clock, setup, None);
                let rate = src.draw(config.depot.replenish_rate);
                let deficit = (config.replenisher.capacity - stock).max(0.0);
                drain(config, &mut agents, src, &mut clock, deficit / rate, None);
                stock = config.replenisher.capacity;
                let packup = src.draw(config.depot.packup_time);
                drain(config, &mut agents, src, &mut clock, packup, None);
                location = config.depot.location;
                per_task.push((start, clock, deficit));
            }
        }
    }

    for agent in &mut agents {
        if let Some(t_dep) = agent.depleted_at.take() {
            agent.empty_total += clock - t_dep;
        }
    }

    Ok(ConcreteOutcome {
        empty_time: agents.iter().map(|a| a.empty_total).collect(),
        total_time: clock - state.clock,
        final_levels: agents.iter().map(|a| a.level).collect(),
        final_replenisher: stock,
        per_task,
    })
}

/// Welford accumulator: exact for constant inputs, stable otherwise.
#[derive(Clone, Copy, Default)]
struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    fn moment(&self) -> TimeMoment {
        TimeMoment {
            mean: self.mean,
            variance: self.variance(),
        }
    }
}

/// Sample `samples` trajectories and aggregate their statistics. A fixed
/// seed yields an identical prediction.
pub fn rollout_monte_carlo(
    config: &ScenarioConfig,
    state: &FleetState,
    schedule: &Schedule,
    samples: usize,
    seed: u64,
) -> Result<Prediction, PredictionError> {
    if samples == 0 {
        return Err(PredictionError::NoSamples);
    }
    let n = config.n_users();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut empty = vec![Welford::default(); n];
    let mut total = Welford::default();
    let mut levels = vec![Welford::default(); n];
    let mut replenisher = Welford::default();
    let mut starts = vec![Welford::default(); schedule.len()];
    let mut ends = vec![Welford::default(); schedule.len()];
    let mut transfers = vec![Welford::default(); schedule.len()];
    let mut final_location = state.replenisher_location;
    let mut end_clock = Welford::default();

    for _ in 0..samples {
        let mut src = SampledSource { rng: &mut rng };
        let outcome = rollout_concrete(config, state, schedule, &mut src)?;
        for (acc, x) in empty.iter_mut().zip(&outcome.empty_time) {
            acc.push(*x);
        }
        total.push(outcome.total_time);
        end_clock.push(state.clock + outcome.total_time);
        for (acc, x) in levels.iter_mut().zip(&outcome.final_levels) {
            acc.push(*x);
        }
        replenisher.push(outcome.final_replenisher);
        for (k, &(s, e, t)) in outcome.per_task.iter().enumerate() {
            starts[k].push(s);
            ends[k].push(e);
            transfers[k].push(t);
        }
        final_location = config.task_location(*schedule.tasks().last().unwrap());
    }

    Ok(Prediction {
        per_task: schedule
            .tasks()
            .iter()
            .enumerate()
            .map(|(k, &task)| TaskTimeline {
                task,
                start: starts[k].moment(),
                end: ends[k].moment(),
                transferred: transfers[k].mean,
            })
            .collect(),
        empty_time: empty.iter().map(Welford::moment).collect(),
        total_time: total.moment(),
        end_state: FleetState {
            clock: end_clock.mean,
            user_levels: levels.iter().map(|w| w.mean).collect(),
            replenisher_level: replenisher.mean,
            replenisher_location: final_location,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_config;
    use rand::Rng;

    const EPS: f64 = 1e-9;

    /// Single user 300 m from the depot; replenisher parameters as in the
    /// shipped scenarios.
    fn one_user_config() -> ScenarioConfig {
        load_config(
            r#"
            sim_duration_s = 3600.0

            [[users]]
            id = 0
            capacity = 1000.0
            usage_rate = { mean = 0.5, std_dev = 0.05 }
            location = "a"

            [replenisher]
            capacity = 5000.0
            replenish_rate = { mean = 10.0, std_dev = 0.5 }
            setup_time = { mean = 60.0, std_dev = 20.0 }
            packup_time = { mean = 20.0, std_dev = 5.0 }
            speed = { mean = 15.0, std_dev = 0.5 }

            [depot]
            location = "depot"
            setup_time = { mean = 30.0, std_dev = 10.0 }
            packup_time = { mean = 10.0, std_dev = 1.0 }
            replenish_rate = { mean = 20.0, std_dev = 1.0 }

            [network]
            nodes = [ { id = "depot", x = 0.0, y = 0.0 }, { id = "a", x = 300.0, y = 0.0 } ]
            edges = [ ["depot", "a", 300.0] ]
        "#,
        )
        .unwrap()
    }

    fn schedule(tasks: &[Task]) -> Schedule {
        Schedule::new(tasks.to_vec()).unwrap()
    }

    #[test]
    fn transfer_fill_limited() {
        // Replenisher already at the user with no set-up: the deficit at
        // transfer start is exactly 640 L and the net rate 9.5 L/s.
        let mut cfg = one_user_config();
        cfg.replenisher.setup_time = GaussianParam::new(0.0, 0.0);
        let state = FleetState {
            clock: 0.0,
            user_levels: vec![360.0],
            replenisher_level: 5000.0,
            replenisher_location: cfg.users[0].location,
        };
        let c = task_duration(
            &cfg,
            &state,
            Task::ReplenishUser(0),
            RolloutMode::Deterministic,
        )
        .unwrap();
        assert!((c.transfer.mean - 640.0 / 9.5).abs() < EPS);
        assert!((c.transferred - 6400.0 / 9.5).abs() < 1e-6);
        assert_eq!(c.travel.mean, 0.0);
    }

    #[test]
    fn transfer_exhaustion_limited() {
        let mut cfg = one_user_config();
        cfg.users[0].capacity = 10000.0;
        cfg.replenisher.setup_time = GaussianParam::new(0.0, 0.0);
        let state = FleetState {
            clock: 0.0,
            user_levels: vec![1000.0], // deficit 9000 L
            replenisher_level: 100.0,
            replenisher_location: cfg.users[0].location,
        };
        let c = task_duration(
            &cfg,
            &state,
            Task::ReplenishUser(0),
            RolloutMode::Deterministic,
        )
        .unwrap();
        assert!((c.transfer.mean - 10.0).abs() < EPS);
        assert!((c.transferred - 100.0).abs() < EPS);

        let mut rs = RolloutState::new(&cfg, &state, RolloutMode::Deterministic, false).unwrap();
        rs.apply_task(&cfg, Task::ReplenishUser(0)).unwrap();
        let pred = rs.finish(&cfg);
        assert!(
            pred.end_state.user_levels[0] < cfg.users[0].capacity,
            "user must not be full"
        );
        assert_eq!(pred.end_state.replenisher_level, 0.0);
    }

    #[test]
    fn transfer_zero_deficit() {
        // No travel and no set-up, so the tank is still full when the
        // transfer would begin.
        let mut cfg = one_user_config();
        cfg.replenisher.setup_time = GaussianParam::new(0.0, 0.0);
        let state = FleetState {
            clock: 0.0,
            user_levels: vec![1000.0],
            replenisher_level: 5000.0,
            replenisher_location: cfg.users[0].location,
        };
        let c = task_duration(
            &cfg,
            &state,
            Task::ReplenishUser(0),
            RolloutMode::Deterministic,
        )
        .unwrap();
        assert_eq!(c.transfer.mean, 0.0);
        assert_eq!(c.transferred, 0.0);
    }

    #[test]
    fn one_user_rollout_timing() {
        let cfg = one_user_config();
        let state = FleetState {
            clock: 0.0,
            user_levels: vec![400.0],
            replenisher_level: 5000.0,
            replenisher_location: cfg.depot.location,
        };
        let pred =
            rollout_deterministic(&cfg, &state, &schedule(&[Task::ReplenishUser(0)])).unwrap();
        // travel 20 + setup 60 + transfer 640/9.5 + packup 20
        let expected = 100.0 + 640.0 / 9.5;
        assert!(
            (pred.total_time.mean - expected).abs() < EPS,
            "{}",
            pred.total_time.mean
        );
        assert_eq!(pred.total_time.variance, 0.0);
        assert_eq!(pred.empty_time[0].mean, 0.0);
        // Full at transfer end, then pack-up drains 10 L.
        assert!((pred.end_state.user_levels[0] - 990.0).abs() < EPS);
    }

    #[test]
    fn empty_until_transfer_start() {
        let cfg = one_user_config();
        let state = FleetState {
            clock: 0.0,
            user_levels: vec![0.0],
            replenisher_level: 5000.0,
            replenisher_location: cfg.depot.location,
        };
        let pred =
            rollout_deterministic(&cfg, &state, &schedule(&[Task::ReplenishUser(0)])).unwrap();
        // Empty from clock zero until travel + setup completes.
        assert!((pred.empty_time[0].mean - 80.0).abs() < EPS);
    }

    #[test]
    fn full_fleet_depot_visit_no_tardiness() {
        let text = std::fs::read_to_string(
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/six_users.toml"),
        )
        .unwrap();
        let cfg = load_config(&text).unwrap();
        let state = FleetState::full_at_depot(&cfg);
        let pred = rollout_deterministic(&cfg, &state, &schedule(&[Task::VisitDepot])).unwrap();
        for e in &pred.empty_time {
            assert_eq!(e.mean, 0.0);
        }
    }

    #[test]
    fn positive_part_degenerate_and_standard() {
        assert_eq!(gaussian_positive_part(5.0, 0.0), 5.0);
        assert_eq!(gaussian_positive_part(-3.0, 0.0), 0.0);
        assert!((gaussian_positive_part(0.0, 1.0) - 0.398942).abs() < 1e-5);
    }

    #[test]
    fn positive_part_matches_quadrature() {
        // Independent oracle: trapezoidal integration of max(0, x) phi(x).
        let quadrature = |mu: f64, sigma: f64| {
            let steps = 400_000;
            let lo = mu - 10.0 * sigma;
            let hi = mu + 10.0 * sigma;
            let h = (hi - lo) / steps as f64;
            let f = |x: f64| {
                let z = (x - mu) / sigma;
                x.max(0.0) * std_normal_pdf(z) / sigma
            };
            let mut acc = 0.5 * (f(lo) + f(hi));
            for k in 1..steps {
                acc += f(lo + k as f64 * h);
            }
            acc * h
        };
        for &(mu, sigma) in &[
            (0.0, 1.0),
            (2.0, 3.0),
            (-1.5, 0.7),
            (10.0, 0.5),
            (-4.0, 2.0),
        ] {
            let numeric = quadrature(mu, sigma);
            let closed = gaussian_positive_part(mu, sigma);
            assert!(
                (numeric - closed).abs() < 1e-6,
                "mu={mu} sigma={sigma}: {numeric} vs {closed}"
            );
        }
    }

    #[test]
    fn positive_part_bounds_and_monotonicity() {
        for &mu in &[-5.0, -0.5, 0.0, 0.5, 5.0] {
            let mut prev = gaussian_positive_part(mu, 0.0);
            assert_eq!(prev, mu.max(0.0));
            for &sigma in &[0.001, 0.01, 0.1, 1.0, 10.0, 100.0] {
                let v = gaussian_positive_part(mu, sigma);
                assert!(v >= mu.max(0.0) - 1e-12);
                assert!(v >= prev - 1e-12, "not monotone in sigma at mu={mu}");
                prev = v;
            }
        }
    }

    #[test]
    fn stochastic_at_threshold_smooths_to_sigma_over_sqrt_2pi() {
        // Engineer the state so the mean depletion time equals the mean
        // transfer-start time, with set-up the only uncertain quantity.
        let mut cfg = one_user_config();
        cfg.users[0].usage_rate = GaussianParam::new(0.5, 0.0);
        cfg.replenisher.speed = GaussianParam::new(15.0, 0.0);
        cfg.replenisher.setup_time = GaussianParam::new(60.0, 10.0);
        let state = FleetState {
            clock: 0.0,
            user_levels: vec![40.0], // depletes at 80 s = travel 20 + setup 60
            replenisher_level: 5000.0,
            replenisher_location: cfg.depot.location,
        };
        let pred = rollout_stochastic(&cfg, &state, &schedule(&[Task::ReplenishUser(0)])).unwrap();
        let expected = 10.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!(
            (pred.empty_time[0].mean - expected).abs() < 1e-6,
            "{} vs {expected}",
            pred.empty_time[0].mean
        );
    }

    fn six_user_config() -> ScenarioConfig {
        let text = std::fs::read_to_string(
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/six_users.toml"),
        )
        .unwrap();
        load_config(&text).unwrap()
    }

    #[test]
    fn higher_usage_sigma_accrues_more_risk() {
        // Agents 3 (sigma 0.02) and 4 (sigma 0.08): with each agent's mean
        // depletion placed exactly at its own transfer start, delaying the
        // noisier agent must carry strictly more expected emptiness.
        let cfg = six_user_config();
        let prefix = [Task::ReplenishUser(0), Task::ReplenishUser(1)];

        // Probe the prefix timing; it only touches agents 0 and 1, so the
        // at-risk levels below cannot disturb it.
        let full = FleetState::full_at_depot(&cfg);
        let mut probe = RolloutState::new(&cfg, &full, RolloutMode::Deterministic, false).unwrap();
        for &t in &prefix {
            probe.apply_task(&cfg, t).unwrap();
        }
        let transfer_start = |target: usize| {
            probe.clock().mean
                + cfg
                    .network
                    .distance(probe.location(), cfg.users[target].location)
                    / cfg.replenisher.speed.mean
                + cfg.replenisher.setup_time.mean
        };

        let mut levels: Vec<f64> = cfg.users.iter().map(|u| u.capacity).collect();
        levels[3] = cfg.users[3].usage_rate.mean * transfer_start(3);
        levels[4] = cfg.users[4].usage_rate.mean * transfer_start(4);
        let state = FleetState {
            clock: 0.0,
            user_levels: levels,
            replenisher_level: 5000.0,
            replenisher_location: cfg.depot.location,
        };

        let delay_3 = schedule(&[prefix[0], prefix[1], Task::ReplenishUser(3)]);
        let delay_4 = schedule(&[prefix[0], prefix[1], Task::ReplenishUser(4)]);
        let p3 = rollout_stochastic(&cfg, &state, &delay_3).unwrap();
        let p4 = rollout_stochastic(&cfg, &state, &delay_4).unwrap();
        assert!(
            p4.empty_time[4].mean > p3.empty_time[3].mean,
            "sigma 0.08 agent: {} should exceed sigma 0.02 agent: {}",
            p4.empty_time[4].mean,
            p3.empty_time[3].mean
        );
        // The Monte-Carlo reference agrees on the ordering.
        let m3 = rollout_monte_carlo(&cfg, &state, &delay_3, 10_000, 7).unwrap();
        let m4 = rollout_monte_carlo(&cfg, &state, &delay_4, 10_000, 7).unwrap();
        assert!(
            m4.empty_time[4].mean > m3.empty_time[3].mean,
            "monte carlo: {} vs {}",
            m4.empty_time[4].mean,
            m3.empty_time[3].mean
        );
    }

    fn random_state(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> FleetState {
        FleetState {
            clock: 0.0,
            user_levels: cfg
                .users
                .iter()
                .map(|u| u.capacity * rng.random_range(0.0..=1.0))
                .collect(),
            replenisher_level: cfg.replenisher.capacity * rng.random_range(0.1..=1.0),
            replenisher_location: cfg.depot.location,
        }
    }

    fn random_valid_schedule(cfg: &ScenarioConfig, len: usize, rng: &mut ChaCha8Rng) -> Schedule {
        let n = cfg.n_users();
        let mut tasks: Vec<Task> = Vec::with_capacity(len);
        while tasks.len() < len {
            let pick = rng.random_range(0..=n);
            let task = if pick == n {
                Task::VisitDepot
            } else {
                Task::ReplenishUser(pick)
            };
            if tasks.last() == Some(&task) {
                continue;
            }
            tasks.push(task);
        }
        Schedule::new(tasks).unwrap()
    }

    #[test]
    fn concrete_engine_at_means_matches_moment_engine() {
        // The trajectory engine fed parameter means must agree with the
        // zero-variance moment recursion.
        let cfg = six_user_config();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let state = random_state(&cfg, &mut rng);
            let sched = random_valid_schedule(&cfg, rng.random_range(1..=7), &mut rng);
            let det = rollout_deterministic(&cfg, &state, &sched).unwrap();
            let concrete = rollout_concrete(&cfg, &state, &sched, &mut MeanSource).unwrap();
            assert!((concrete.total_time - det.total_time.mean).abs() < EPS);
            for (a, b) in concrete.empty_time.iter().zip(&det.empty_time) {
                assert!((a - b.mean).abs() < EPS, "empty {a} vs {}", b.mean);
            }
            for (a, b) in concrete.final_levels.iter().zip(&det.end_state.user_levels) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!((concrete.final_replenisher - det.end_state.replenisher_level).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_variance_stochastic_equals_deterministic() {
        let cfg = six_user_config().with_zero_std_devs();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let state = random_state(&cfg, &mut rng);
            let sched = random_valid_schedule(&cfg, rng.random_range(1..=7), &mut rng);
            let det = rollout_deterministic(&cfg, &state, &sched).unwrap();
            let sto = rollout_stochastic(&cfg, &state, &sched).unwrap();
            assert_eq!(det, sto);
        }
    }

    #[test]
    fn zero_variance_monte_carlo_equals_deterministic() {
        let cfg = six_user_config().with_zero_std_devs();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for samples in [1usize, 2, 3, 5] {
            let state = random_state(&cfg, &mut rng);
            let sched = random_valid_schedule(&cfg, 5, &mut rng);
            let det = rollout_deterministic(&cfg, &state, &sched).unwrap();
            let mc = rollout_monte_carlo(&cfg, &state, &sched, samples, 99).unwrap();
            assert!((mc.total_time.mean - det.total_time.mean).abs() < EPS);
            for (a, b) in mc.empty_time.iter().zip(&det.empty_time) {
                assert!((a.mean - b.mean).abs() < EPS);
                assert!(a.variance.abs() < EPS);
            }
            for (a, b) in mc
                .end_state
                .user_levels
                .iter()
                .zip(&det.end_state.user_levels)
            {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn monte_carlo_same_seed_is_bit_identical() {
        let cfg = six_user_config();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let state = random_state(&cfg, &mut rng);
        let sched = random_valid_schedule(&cfg, 6, &mut rng);
        let a = rollout_monte_carlo(&cfg, &state, &sched, 500, 12345).unwrap();
        let b = rollout_monte_carlo(&cfg, &state, &sched, 500, 12345).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_validates_stochastic_estimator() {
        let cfg = six_user_config();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..4 {
            let state = FleetState {
                clock: 0.0,
                user_levels: cfg
                    .users
                    .iter()
                    .map(|u| u.capacity * rng.random_range(0.5..=1.0))
                    .collect(),
                replenisher_level: cfg.replenisher.capacity * rng.random_range(0.5..=1.0),
                replenisher_location: cfg.depot.location,
            };
            let sched = random_valid_schedule(&cfg, 5, &mut rng);
            let sto = rollout_stochastic(&cfg, &state, &sched).unwrap();
            let mc = rollout_monte_carlo(&cfg, &state, &sched, 10_000, 4242).unwrap();
            assert!(
                (sto.total_time.mean - mc.total_time.mean).abs() <= 0.01 * mc.total_time.mean,
                "total time {} vs {}",
                sto.total_time.mean,
                mc.total_time.mean
            );
            for i in 0..cfg.n_users() {
                let diff = (sto.empty_time[i].mean - mc.empty_time[i].mean).abs();
                let tol = (0.10 * mc.empty_time[i].mean).max(2.0);
                assert!(
                    diff <= tol,
                    "agent {i}: estimator {} vs monte-carlo {} (diff {diff:.3}, tol {tol:.3})",
                    sto.empty_time[i].mean,
                    mc.empty_time[i].mean
                );
            }
        }
    }

    #[test]
    fn monte_carlo_converges_with_sample_count() {
        let cfg = six_user_config();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let state = FleetState {
            clock: 0.0,
            user_levels: cfg.users.iter().map(|u| 0.55 * u.capacity).collect(),
            replenisher_level: cfg.replenisher.capacity,
            replenisher_location: cfg.depot.location,
        };
        let sched = random_valid_schedule(&cfg, 6, &mut rng);
        let small = rollout_monte_carlo(&cfg, &state, &sched, 10_000, 31).unwrap();
        let large = rollout_monte_carlo(&cfg, &state, &sched, 20_000, 32).unwrap();
        for i in 0..cfg.n_users() {
            let se = (small.empty_time[i].variance / 10_000.0).sqrt();
            let diff = (small.empty_time[i].mean - large.empty_time[i].mean).abs();
            assert!(
                diff <= 3.0 * se + 1e-9,
                "agent {i}: diff {diff} vs 3 se {}",
                3.0 * se
            );
        }
    }

    #[test]
    fn prefix_empty_time_is_monotone() {
        let cfg = six_user_config();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let state = random_state(&cfg, &mut rng);
            let sched = random_valid_schedule(&cfg, 7, &mut rng);
            let full = rollout_deterministic(&cfg, &state, &sched).unwrap();
            for k in 1..sched.len() {
                let part = rollout_deterministic(&cfg, &state, &sched.prefix(k)).unwrap();
                for i in 0..cfg.n_users() {
                    assert!(
                        part.empty_time[i].mean <= full.empty_time[i].mean + EPS,
                        "prefix {k} agent {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn conservation_and_level_bounds() {
        let cfg = six_user_config();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let state = random_state(&cfg, &mut rng);
            let sched = random_valid_schedule(&cfg, 6, &mut rng);
            let mut rs = RolloutState::new(&cfg, &state, RolloutMode::Deterministic, true).unwrap();
            let mut stock = state.replenisher_level;
            for &task in sched.tasks() {
                let c = rs.apply_task(&cfg, task).unwrap();
                match task {
                    Task::ReplenishUser(i) => {
                        // Gain plus usage during transfer equals litres moved.
                        let gain_plus_usage = c.transfer.mean
                            * (cfg.replenisher.replenish_rate.mean - cfg.users[i].usage_rate.mean)
                            + cfg.users[i].usage_rate.mean * c.transfer.mean;
                        assert!((gain_plus_usage - c.transferred).abs() < 1e-6);
                        stock -= c.transferred;
                        assert!(stock >= -1e-9, "replenisher went negative");
                        stock = stock.max(0.0);
                        assert!((rs.replenisher_level - stock).abs() < 1e-6);
                    }
                    Task::VisitDepot => {
                        stock = cfg.replenisher.capacity;
                        assert_eq!(rs.replenisher_level, stock);
                    }
                }
                for (i, user) in cfg.users.iter().enumerate() {
                    let level = rs.agents[i].level_at(rs.clock.mean, user.usage_rate.mean);
                    assert!((-1e-9..=user.capacity + 1e-9).contains(&level));
                }
            }
        }
    }
}
