//! Optimal finite-horizon schedule search.
//!
//! The schedule space is a tree: each node extends its parent's task prefix
//! by one allowed task, and an artificial goal node sits one level past the
//! horizon. A* pops the frontier by lowest cost estimate; the first goal
//! node popped carries the optimal schedule.
//!
//! Two rules prune undesirable branches: a node never repeats its parent's
//! task, and once the predicted replenisher level falls below the depot
//! threshold the only allowed task is the depot visit.
//!
//! For the tardiness objectives the estimate is simply the cost accrued so
//! far (no future emptiness assumed). For the ratio objectives the remaining
//! schedule time must not be underestimated, so the denominator uses a
//! dynamic-programming table of worst-case remaining durations keyed by the
//! previous task and the number of tasks left.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::objectives::{evaluate, Cost, ObjectiveError, ObjectiveKind};
use crate::prediction::{FleetState, PredictionError, RolloutState};
use crate::scenario::{ScenarioConfig, Schedule, Task};

/// Longest supported horizon; the search space grows exponentially well
/// before this bound bites.
pub const MAX_HORIZON: usize = 24;

/// Brute-force enumeration refuses instances with more than this many
/// candidate schedules.
pub const ENUMERATION_GUARD: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("horizon {0} exceeds the supported maximum {MAX_HORIZON}")]
    HorizonTooLarge(usize),
    #[error("{candidates} candidate schedules exceed the enumeration guard {ENUMERATION_GUARD}")]
    EnumerationGuard { candidates: u64 },
    #[error(transparent)]
    Rollout(#[from] PredictionError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Worst-case duration of one task given the task performed before it,
/// with every user assumed completely empty and all parameters at their
/// means.
pub fn max_task_duration(config: &ScenarioConfig, prev: Task, next: Task) -> f64 {
    let travel = config
        .network
        .distance(config.task_location(prev), config.task_location(next))
        / config.replenisher.speed.mean;
    match next {
        Task::ReplenishUser(i) => {
            let user = &config.users[i];
            let worst_transfer =
                user.capacity / (config.replenisher.replenish_rate.mean - user.usage_rate.mean);
            travel
                + config.replenisher.setup_time.mean
                + worst_transfer
                + config.replenisher.packup_time.mean
        }
        Task::VisitDepot => {
            let worst_transfer = config.replenisher.capacity / config.depot.replenish_rate.mean;
            travel + config.depot.setup_time.mean + worst_transfer + config.depot.packup_time.mean
        }
    }
}

/// Upper bounds on the time to finish a schedule, precomputed by backwards
/// recursion: `max_remaining(last, k)` bounds any `k` further tasks after
/// `last`, honouring the no-repeat rule.
#[derive(Debug, Clone)]
pub struct MaxTimeTable {
    n_users: usize,
    horizon: usize,
    /// Row-major `(n_users + 1) x (horizon + 1)`; row index `n_users` is the
    /// depot task.
    entries: Vec<f64>,
}

impl MaxTimeTable {
    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn task_index(&self, task: Task) -> usize {
        match task {
            Task::ReplenishUser(i) => i,
            Task::VisitDepot => self.n_users,
        }
    }

    pub fn max_remaining(&self, last: Task, remaining: usize) -> f64 {
        debug_assert!(remaining <= self.horizon);
        self.entries[self.task_index(last) * (self.horizon + 1) + remaining]
    }
}

/// Build the max-remaining-time table for schedules of length `h`.
///
/// A greedy pass would underestimate the worst case, so each entry maximises
/// over every allowed successor.
pub fn build_max_time_table(config: &ScenarioConfig, h: usize) -> MaxTimeTable {
    let n = config.n_users();
    let tasks: Vec<Task> = (0..n)
        .map(Task::ReplenishUser)
        .chain(std::iter::once(Task::VisitDepot))
        .collect();
    let m = tasks.len();
    let mut durations = vec![0.0; m * m];
    for (p, &prev) in tasks.iter().enumerate() {
        for (t, &next) in tasks.iter().enumerate() {
            if p != t {
                durations[p * m + t] = max_task_duration(config, prev, next);
            }
        }
    }
    let mut entries = vec![0.0; m * (h + 1)];
    for k in 1..=h {
        for p in 0..m {
            let mut best = 0.0f64;
            for t in 0..m {
                if t != p {
                    best = best.max(durations[p * m + t] + entries[t * (h + 1) + k - 1]);
                }
            }
            entries[p * (h + 1) + k] = best;
        }
    }
    MaxTimeTable {
        n_users: n,
        horizon: h,
        entries,
    }
}

/// One node of the schedule tree: a task prefix plus the rolled-out state
/// and cost accrued along it.
#[derive(Debug, Clone)]
pub struct SearchNode {
    pub schedule: Vec<Task>,
    pub depth: usize,
    pub rollout: RolloutState,
    /// Priority-weighted empty time accrued up to this node's clock.
    pub accrued_weighted: f64,
    /// Task completed immediately before this search, when replanning. The
    /// no-repeat rule spans the executed sequence, so the first planned task
    /// must differ from it.
    pub prior_task: Option<Task>,
}

impl SearchNode {
    pub fn root(
        config: &ScenarioConfig,
        state: &FleetState,
        kind: ObjectiveKind,
    ) -> Result<Self, SearchError> {
        Self::root_after(config, state, kind, None)
    }

    pub fn root_after(
        config: &ScenarioConfig,
        state: &FleetState,
        kind: ObjectiveKind,
        prior_task: Option<Task>,
    ) -> Result<Self, SearchError> {
        let rollout = RolloutState::new(config, state, kind.rollout_mode(), false)?;
        let accrued_weighted = rollout.accrued_weighted_tardiness(config);
        Ok(Self {
            schedule: Vec::new(),
            depth: 0,
            rollout,
            accrued_weighted,
            prior_task,
        })
    }

    pub fn child(&self, config: &ScenarioConfig, task: Task) -> Result<Self, SearchError> {
        let mut rollout = self.rollout.clone();
        rollout.apply_task(config, task)?;
        let accrued_weighted = rollout.accrued_weighted_tardiness(config);
        let mut schedule = self.schedule.clone();
        schedule.push(task);
        Ok(Self {
            schedule,
            depth: self.depth + 1,
            rollout,
            accrued_weighted,
            prior_task: self.prior_task,
        })
    }

    pub fn last_task(&self) -> Option<Task> {
        self.schedule.last().copied().or(self.prior_task)
    }

    /// Successor tasks in canonical order, honouring the no-repeat rule and
    /// the forced depot visit when the predicted replenisher level is below
    /// threshold.
    pub fn allowed_tasks(&self, config: &ScenarioConfig) -> Vec<Task> {
        allowed_tasks(config, self.last_task(), self.rollout.replenisher_level())
    }
}

/// Successors of a schedule position: every task except the one just
/// performed, collapsed to the depot alone whenever the replenisher level
/// sits below the depot threshold (or is exhausted).
pub fn allowed_tasks(
    config: &ScenarioConfig,
    prev: Option<Task>,
    replenisher_level: f64,
) -> Vec<Task> {
    if replenisher_level < config.depot_threshold() && prev != Some(Task::VisitDepot) {
        return vec![Task::VisitDepot];
    }
    let mut tasks = Vec::with_capacity(config.n_users() + 1);
    for i in 0..config.n_users() {
        if prev != Some(Task::ReplenishUser(i)) {
            tasks.push(Task::ReplenishUser(i));
        }
    }
    if prev != Some(Task::VisitDepot) {
        tasks.push(Task::VisitDepot);
    }
    tasks
}

/// Cost estimate for a node: never an overestimate of the cost of any
/// schedule completing its prefix.
///
/// Tardiness kinds assume zero future emptiness. Ratio kinds divide by an
/// upper bound on the total schedule time, built from the node's elapsed
/// time plus the table's worst-case remainder.
pub fn heuristic(node: &SearchNode, kind: ObjectiveKind, table: &MaxTimeTable, h: usize) -> f64 {
    let accrued = node.accrued_weighted;
    if !kind.is_ratio() {
        return accrued;
    }
    if accrued <= 0.0 {
        return 0.0;
    }
    let Some(last) = node.last_task() else {
        // Fresh root with no planning context: no finite bound on the total
        // time is available, so the estimate degenerates to zero.
        return 0.0;
    };
    let remaining = h - node.depth;
    let bound = node.rollout.elapsed().mean + table.max_remaining(last, remaining);
    accrued / (table.n_users() as f64 * bound)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SearchStats {
    /// Nodes popped from the frontier and expanded (goal pops excluded).
    pub nodes_expanded: u64,
    /// Children pushed onto the frontier.
    pub nodes_generated: u64,
    /// Parent-to-child estimate decreases observed (monotonicity findings).
    pub consistency_violations: u64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub schedule: Schedule,
    pub cost: Cost,
    pub stats: SearchStats,
}

const TASK_DEPOT: u8 = u8::MAX;

fn encode_task(task: Task) -> u8 {
    match task {
        Task::ReplenishUser(i) => i as u8,
        Task::VisitDepot => TASK_DEPOT,
    }
}

fn decode_task(byte: u8) -> Task {
    if byte == TASK_DEPOT {
        Task::VisitDepot
    } else {
        Task::ReplenishUser(byte as usize)
    }
}

/// Frontier entry. Pop order: lowest estimate, then greatest depth, then
/// lexicographically smallest task prefix.
struct FrontierEntry {
    f: f64,
    depth: u8,
    tasks: [u8; MAX_HORIZON],
    body: u32,
}

impl PartialEq for FrontierEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for FrontierEntry {}
impl Ord for FrontierEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap pops the maximum, so "greater" means "pops first".
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| self.depth.cmp(&other.depth))
            .then_with(|| other.tasks.cmp(&self.tasks))
    }
}
impl PartialOrd for FrontierEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const F_EPS: f64 = 1e-9;

/// Find a minimum-cost schedule of exactly `h` tasks from `state`.
pub fn astar_schedule(
    config: &ScenarioConfig,
    state: &FleetState,
    h: usize,
    kind: ObjectiveKind,
) -> Result<SearchOutcome, SearchError> {
    astar_schedule_after(config, state, h, kind, None)
}

/// [`astar_schedule`] within a replanning loop: `prior_task` is the task
/// just completed, which the schedule must not repeat immediately.
pub fn astar_schedule_after(
    config: &ScenarioConfig,
    state: &FleetState,
    h: usize,
    kind: ObjectiveKind,
    prior_task: Option<Task>,
) -> Result<SearchOutcome, SearchError> {
    if h == 0 {
        return Err(SearchError::ZeroHorizon);
    }
    if h > MAX_HORIZON {
        return Err(SearchError::HorizonTooLarge(h));
    }
    let table = build_max_time_table(config, h);
    let root = SearchNode::root_after(config, state, kind, prior_task)?;

    // A quick greedy dive yields a feasible cost; children estimated above
    // it can never be optimal and are not queued.
    let mut incumbent = greedy_leaf_cost(config, &root, kind, &table, h)?;

    let mut arena: Vec<Option<SearchNode>> = Vec::with_capacity(1024);
    let mut frontier = BinaryHeap::new();
    let root_f = heuristic(&root, kind, &table, h);
    arena.push(Some(root));
    frontier.push(FrontierEntry {
        f: root_f,
        depth: 0,
        tasks: [0; MAX_HORIZON],
        body: 0,
    });

    let mut stats = SearchStats::default();
    let mut max_popped = f64::NEG_INFINITY;

    while let Some(entry) = frontier.pop() {
        max_popped = max_popped.max(entry.f);
        if entry.depth as usize == h + 1 {
            // Goal: the first completed schedule to pop is optimal.
            let tasks: Vec<Task> = entry.tasks[..h].iter().copied().map(decode_task).collect();
            let schedule = Schedule::new(tasks).expect("search builds valid schedules");
            let cost = evaluate(kind, config, state, &schedule)?;
            assert!(
                (cost.value - entry.f).abs() <= F_EPS.max(1e-9 * cost.value.abs()),
                "incremental cost {} disagrees with full rollout {}",
                entry.f,
                cost.value
            );
            assert!(
                max_popped <= cost.value + F_EPS,
                "inadmissible estimate: popped {} above final cost {}",
                max_popped,
                cost.value
            );
            return Ok(SearchOutcome {
                schedule,
                cost,
                stats,
            });
        }

        let node = arena[entry.body as usize]
            .take()
            .expect("node expanded twice");
        stats.nodes_expanded += 1;

        if node.depth == h {
            // Complete schedule: hand it to the goal level unchanged.
            incumbent = incumbent.min(entry.f);
            frontier.push(FrontierEntry {
                f: entry.f,
                depth: entry.depth + 1,
                tasks: entry.tasks,
                body: entry.body,
            });
            continue;
        }

        for task in node.allowed_tasks(config) {
            let child = node.child(config, task)?;
            let f = heuristic(&child, kind, &table, h);
            if f < entry.f - F_EPS {
                stats.consistency_violations += 1;
            }
            if f <= incumbent + F_EPS {
                let mut tasks = entry.tasks;
                tasks[node.depth] = encode_task(task);
                let body = arena.len() as u32;
                arena.push(Some(child));
                frontier.push(FrontierEntry {
                    f,
                    depth: entry.depth + 1,
                    tasks,
                    body,
                });
                stats.nodes_generated += 1;
            }
        }
    }

    unreachable!("the greedy schedule's path always survives pruning")
}

fn greedy_leaf_cost(
    config: &ScenarioConfig,
    root: &SearchNode,
    kind: ObjectiveKind,
    table: &MaxTimeTable,
    h: usize,
) -> Result<f64, SearchError> {
    let mut node = root.clone();
    let mut f = heuristic(&node, kind, table, h);
    while node.depth < h {
        let mut best: Option<(f64, SearchNode)> = None;
        for task in node.allowed_tasks(config) {
            let child = node.child(config, task)?;
            let child_f = heuristic(&child, kind, table, h);
            if best.as_ref().is_none_or(|(bf, _)| child_f < *bf) {
                best = Some((child_f, child));
            }
        }
        let (best_f, best_node) = best.expect("at least the depot task is always allowed");
        node = best_node;
        f = best_f;
    }
    Ok(f)
}

#[derive(Debug, Clone)]
pub struct BruteForceOutcome {
    pub schedule: Schedule,
    pub cost: Cost,
    /// Number of complete valid schedules enumerated.
    pub schedules_enumerated: u64,
}

/// Exhaustively enumerate every valid schedule of length `h` and return the
/// cheapest (ties broken by lexicographic task order). Costs come from a
/// fresh full rollout per schedule, independent of the incremental math the
/// search relies on.
pub fn brute_force_schedule(
    config: &ScenarioConfig,
    state: &FleetState,
    h: usize,
    kind: ObjectiveKind,
) -> Result<BruteForceOutcome, SearchError> {
    brute_force_schedule_after(config, state, h, kind, None)
}

pub fn brute_force_schedule_after(
    config: &ScenarioConfig,
    state: &FleetState,
    h: usize,
    kind: ObjectiveKind,
    prior_task: Option<Task>,
) -> Result<BruteForceOutcome, SearchError> {
    if h == 0 {
        return Err(SearchError::ZeroHorizon);
    }
    if h > MAX_HORIZON {
        return Err(SearchError::HorizonTooLarge(h));
    }
    let candidates = ((config.n_users() + 1) as f64).powi(h as i32);
    if candidates > ENUMERATION_GUARD as f64 {
        return Err(SearchError::EnumerationGuard {
            candidates: candidates as u64,
        });
    }

    let root = SearchNode::root_after(config, state, kind, prior_task)?;
    let mut best: Option<(f64, Schedule)> = None;
    let mut enumerated = 0u64;
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        if node.depth == h {
            enumerated += 1;
            let schedule = Schedule::new(node.schedule.clone()).expect("enumeration is valid");
            let cost = evaluate(kind, config, state, &schedule)?;
            // Strict improvement keeps the lexicographically-smallest argmin
            // because schedules are visited in lexicographic order.
            if best.as_ref().is_none_or(|(b, _)| cost.value < *b) {
                best = Some((cost.value, schedule));
            }
            continue;
        }
        // Reverse push so the stack pops successors in canonical order.
        for task in node.allowed_tasks(config).into_iter().rev() {
            stack.push(node.child(config, task)?);
        }
    }
    let (value, schedule) = best.expect("the depot task is always available");
    Ok(BruteForceOutcome {
        schedule,
        cost: Cost { value, kind },
        schedules_enumerated: enumerated,
    })
}

/// A uniformly random valid schedule, useful as a baseline and for sampling
/// rollout inputs in tests.
pub fn random_schedule<R: rand::Rng>(
    config: &ScenarioConfig,
    state: &FleetState,
    h: usize,
    rng: &mut R,
) -> Result<Schedule, SearchError> {
    if h == 0 {
        return Err(SearchError::ZeroHorizon);
    }
    let mut node = SearchNode::root(config, state, ObjectiveKind::DT)?;
    for _ in 0..h {
        let options = node.allowed_tasks(config);
        let task = options[rng.random_range(0..options.len())];
        node = node.child(config, task)?;
    }
    Ok(Schedule::new(node.schedule).expect("walk respects schedule rules"))
}
