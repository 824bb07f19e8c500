//! Scenario configuration: the agent fleet, its stochastic parameters, and
//! the road network the replenishment agent travels on.
//!
//! A scenario is loaded from a TOML document with top-level keys `users`,
//! `replenisher`, `depot`, `network` and `sim_duration_s`. Every uncertain
//! quantity is a `{ mean, std_dev }` pair. The loaded [`ScenarioConfig`] is
//! immutable and safe to share across concurrent searches and simulations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while loading or validating a scenario document.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to parse scenario document: {0}")]
    Parse(String),
    #[error("user {user}: {message}")]
    User { user: usize, message: String },
    #[error("replenisher: {0}")]
    Replenisher(String),
    #[error("depot: {0}")]
    Depot(String),
    #[error("network: {0}")]
    Network(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("unknown node id `{0}`")]
    UnknownNode(String),
    #[error("no road path between `{0}` and `{1}`")]
    Unreachable(String, String),
    #[error(
        "replenish rate {rate} L/s must exceed the highest user usage rate {usage} L/s, \
         otherwise replenishment can never complete"
    )]
    ReplenishRateTooLow { rate: f64, usage: f64 },
}

/// Errors raised when constructing a [`Schedule`].
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("schedule must contain at least one task")]
    Empty,
    #[error("schedule repeats the same task at positions {0} and {1}")]
    ConsecutiveRepeat(usize, usize),
}

/// A Gaussian-distributed scenario parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParam {
    pub mean: f64,
    pub std_dev: f64,
}

impl GaussianParam {
    pub fn new(mean: f64, std_dev: f64) -> Self {
        Self { mean, std_dev }
    }

    pub fn variance(&self) -> f64 {
        self.std_dev * self.std_dev
    }

    /// The same parameter with its uncertainty removed.
    pub fn certain(self) -> Self {
        Self {
            mean: self.mean,
            std_dev: 0.0,
        }
    }
}

/// Index of a node in the road network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// One schedule element: replenish a specific user agent, or return to the
/// depot to refill the replenishment agent itself.
///
/// The derived ordering (users by index, depot last) is the canonical task
/// order used for tie-breaking in search and enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    ReplenishUser(usize),
    VisitDepot,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::ReplenishUser(i) => write!(f, "{i}"),
            Task::VisitDepot => write!(f, "r"),
        }
    }
}

/// An ordered, finite-horizon task list for the replenishment agent.
///
/// Tasks may repeat (a user can be replenished many times) and a user may be
/// absent entirely, but the same task never appears twice in a row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule(Vec<Task>);

impl Schedule {
    pub fn new(tasks: Vec<Task>) -> Result<Self, ScheduleError> {
        if tasks.is_empty() {
            return Err(ScheduleError::Empty);
        }
        for (i, pair) in tasks.windows(2).enumerate() {
            if pair[0] == pair[1] {
                return Err(ScheduleError::ConsecutiveRepeat(i, i + 1));
            }
        }
        Ok(Self(tasks))
    }

    pub fn tasks(&self) -> &[Task] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The first `k` tasks as a schedule (`k` must be in `1..=len`).
    pub fn prefix(&self, k: usize) -> Schedule {
        assert!(k >= 1 && k <= self.0.len());
        Schedule(self.0[..k].to_vec())
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, ")")
    }
}

/// A user agent: consumes the resource at a stochastic rate from a finite tank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAgentSpec {
    pub id: usize,
    pub capacity: f64,
    pub usage_rate: GaussianParam,
    /// Priority weight, normalised so the fleet's weights sum to 1.
    pub weight: f64,
    pub location: NodeId,
}

/// The single replenishment agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplenisherSpec {
    pub capacity: f64,
    pub replenish_rate: GaussianParam,
    pub setup_time: GaussianParam,
    pub packup_time: GaussianParam,
    pub speed: GaussianParam,
    /// Fraction of capacity below which the only allowed task is the depot.
    pub depot_threshold_fraction: f64,
}

/// The fixed depot where the replenishment agent refills its own supply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepotSpec {
    pub location: NodeId,
    pub setup_time: GaussianParam,
    pub packup_time: GaussianParam,
    pub replenish_rate: GaussianParam,
}

/// Undirected road network with precomputed shortest-path distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    node_names: Vec<String>,
    coords: Vec<(f64, f64)>,
    edges: Vec<(usize, usize, f64)>,
    /// Row-major `n x n` shortest-path matrix; `f64::INFINITY` = unreachable.
    dist: Vec<f64>,
}

impl RoadNetwork {
    fn build(
        nodes: Vec<(String, f64, f64)>,
        raw_edges: &[(String, String, f64)],
    ) -> Result<Self, ScenarioError> {
        if nodes.is_empty() {
            return Err(ScenarioError::Network("no nodes defined".into()));
        }
        let mut index = HashMap::new();
        for (i, (name, _, _)) in nodes.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(ScenarioError::Network(format!(
                    "duplicate node id `{name}`"
                )));
            }
        }
        let n = nodes.len();
        let mut adjacency = vec![Vec::new(); n];
        let mut edges = Vec::with_capacity(raw_edges.len());
        for (a, b, length) in raw_edges {
            let ia = *index
                .get(a)
                .ok_or_else(|| ScenarioError::UnknownNode(a.clone()))?;
            let ib = *index
                .get(b)
                .ok_or_else(|| ScenarioError::UnknownNode(b.clone()))?;
            if !length.is_finite() || *length <= 0.0 {
                return Err(ScenarioError::Network(format!(
                    "edge {a}-{b} has nonpositive length {length}"
                )));
            }
            adjacency[ia].push((ib, *length));
            adjacency[ib].push((ia, *length));
            edges.push((ia, ib, *length));
        }

        let mut dist = vec![f64::INFINITY; n * n];
        for source in 0..n {
            let row = dijkstra(&adjacency, source);
            dist[source * n..(source + 1) * n].copy_from_slice(&row);
        }
        // Dijkstra from a and from b sum the same edge lengths in opposite
        // orders; copy the upper triangle so d(a,b) == d(b,a) bit-for-bit.
        for a in 0..n {
            for b in (a + 1)..n {
                dist[b * n + a] = dist[a * n + b];
            }
        }

        let (node_names, coords) = nodes.into_iter().map(|(name, x, y)| (name, (x, y))).unzip();
        Ok(Self {
            node_names,
            coords,
            edges,
            dist,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.node_names.iter().position(|n| n == name).map(NodeId)
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.node_names[id.0]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.node_names.len()).map(NodeId)
    }

    /// Shortest road distance in metres (`INFINITY` if unreachable).
    pub fn distance(&self, from: NodeId, to: NodeId) -> f64 {
        self.dist[from.0 * self.node_names.len() + to.0]
    }

    /// Shortest-path travel time in seconds at the given speed.
    pub fn travel_time(&self, from: NodeId, to: NodeId, speed: f64) -> Result<f64, ScenarioError> {
        if !speed.is_finite() || speed <= 0.0 {
            return Err(ScenarioError::Network(format!(
                "nonpositive speed {speed} m/s"
            )));
        }
        let d = self.distance(from, to);
        if !d.is_finite() {
            return Err(ScenarioError::Unreachable(
                self.node_name(from).to_string(),
                self.node_name(to).to_string(),
            ));
        }
        Ok(d / speed)
    }
}

struct HeapItem {
    dist: f64,
    node: usize,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.node == other.node
    }
}
impl Eq for HeapItem {}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap pops the largest, we want the nearest node.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(adjacency: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adjacency.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapItem {
        dist: 0.0,
        node: source,
    });
    while let Some(HeapItem { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, length) in &adjacency[node] {
            let nd = d + length;
            if nd < dist[next] {
                dist[next] = nd;
                heap.push(HeapItem {
                    dist: nd,
                    node: next,
                });
            }
        }
    }
    dist
}

/// The immutable description of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub users: Vec<UserAgentSpec>,
    pub replenisher: ReplenisherSpec,
    pub depot: DepotSpec,
    pub network: RoadNetwork,
    /// Length of one simulation run, seconds.
    pub sim_duration: f64,
}

impl ScenarioConfig {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// Normalised priority weights, indexed by user.
    pub fn weights(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.weight).collect()
    }

    /// Replenisher level below which the only allowed next task is the depot.
    pub fn depot_threshold(&self) -> f64 {
        self.replenisher.depot_threshold_fraction * self.replenisher.capacity
    }

    /// Where the replenishment agent ends up after performing `task`.
    pub fn task_location(&self, task: Task) -> NodeId {
        match task {
            Task::ReplenishUser(i) => self.users[i].location,
            Task::VisitDepot => self.depot.location,
        }
    }

    /// A copy of the scenario with every standard deviation set to zero.
    pub fn with_zero_std_devs(&self) -> Self {
        let mut cfg = self.clone();
        for user in &mut cfg.users {
            user.usage_rate = user.usage_rate.certain();
        }
        cfg.replenisher.replenish_rate = cfg.replenisher.replenish_rate.certain();
        cfg.replenisher.setup_time = cfg.replenisher.setup_time.certain();
        cfg.replenisher.packup_time = cfg.replenisher.packup_time.certain();
        cfg.replenisher.speed = cfg.replenisher.speed.certain();
        cfg.depot.setup_time = cfg.depot.setup_time.certain();
        cfg.depot.packup_time = cfg.depot.packup_time.certain();
        cfg.depot.replenish_rate = cfg.depot.replenish_rate.certain();
        cfg
    }

    /// Serialise back to the TOML document format accepted by [`load_config`].
    pub fn to_document(&self) -> String {
        let doc = ScenarioDoc {
            sim_duration_s: self.sim_duration,
            users: self
                .users
                .iter()
                .map(|u| UserDoc {
                    id: u.id,
                    capacity: u.capacity,
                    usage_rate: u.usage_rate,
                    weight: Some(u.weight),
                    location: self.network.node_name(u.location).to_string(),
                })
                .collect(),
            replenisher: ReplenisherDoc {
                capacity: self.replenisher.capacity,
                replenish_rate: self.replenisher.replenish_rate,
                setup_time: self.replenisher.setup_time,
                packup_time: self.replenisher.packup_time,
                speed: self.replenisher.speed,
                depot_threshold_fraction: Some(self.replenisher.depot_threshold_fraction),
            },
            depot: DepotDoc {
                location: self.network.node_name(self.depot.location).to_string(),
                setup_time: self.depot.setup_time,
                packup_time: self.depot.packup_time,
                replenish_rate: self.depot.replenish_rate,
            },
            network: NetworkDoc {
                nodes: self
                    .network
                    .node_ids()
                    .map(|id| NodeDoc {
                        id: self.network.node_name(id).to_string(),
                        x: self.network.coords[id.0].0,
                        y: self.network.coords[id.0].1,
                    })
                    .collect(),
                edges: self
                    .network
                    .edges
                    .iter()
                    .map(|&(a, b, len)| {
                        (
                            self.network.node_name(NodeId(a)).to_string(),
                            self.network.node_name(NodeId(b)).to_string(),
                            len,
                        )
                    })
                    .collect(),
            },
        };
        toml::to_string(&doc).expect("scenario serialisation cannot fail")
    }
}

// Serde mirror of the on-disk document.

#[derive(Serialize, Deserialize)]
struct ScenarioDoc {
    sim_duration_s: f64,
    users: Vec<UserDoc>,
    replenisher: ReplenisherDoc,
    depot: DepotDoc,
    network: NetworkDoc,
}

#[derive(Serialize, Deserialize)]
struct UserDoc {
    id: usize,
    capacity: f64,
    usage_rate: GaussianParam,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
    location: String,
}

#[derive(Serialize, Deserialize)]
struct ReplenisherDoc {
    capacity: f64,
    replenish_rate: GaussianParam,
    setup_time: GaussianParam,
    packup_time: GaussianParam,
    speed: GaussianParam,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depot_threshold_fraction: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct DepotDoc {
    location: String,
    setup_time: GaussianParam,
    packup_time: GaussianParam,
    replenish_rate: GaussianParam,
}

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    nodes: Vec<NodeDoc>,
    edges: Vec<(String, String, f64)>,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: String,
    x: f64,
    y: f64,
}

const DEFAULT_DEPOT_THRESHOLD_FRACTION: f64 = 0.05;

fn check_gaussian(
    param: &GaussianParam,
    what: &str,
    positive_mean: bool,
    err: impl Fn(String) -> ScenarioError,
) -> Result<(), ScenarioError> {
    if !param.mean.is_finite() || !param.std_dev.is_finite() {
        return Err(err(format!("{what} must be finite")));
    }
    if param.std_dev < 0.0 {
        return Err(err(format!(
            "{what} std_dev must be >= 0 (got {})",
            param.std_dev
        )));
    }
    if positive_mean {
        if param.mean <= 0.0 {
            return Err(err(format!(
                "{what} mean must be positive (got {})",
                param.mean
            )));
        }
    } else if param.mean < 0.0 {
        return Err(err(format!(
            "{what} mean must be >= 0 (got {})",
            param.mean
        )));
    }
    Ok(())
}

/// Parse and validate a scenario document.
///
/// Weights are normalised to sum to 1; when no user specifies a weight every
/// user gets `1/n`.
pub fn load_config(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let doc: ScenarioDoc = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;

    if doc.users.is_empty() {
        return Err(ScenarioError::Scenario(
            "at least one user agent is required".into(),
        ));
    }
    if !doc.sim_duration_s.is_finite() || doc.sim_duration_s <= 0.0 {
        return Err(ScenarioError::Scenario(format!(
            "sim_duration_s must be positive (got {})",
            doc.sim_duration_s
        )));
    }

    let network = RoadNetwork::build(
        doc.network
            .nodes
            .into_iter()
            .map(|n| (n.id, n.x, n.y))
            .collect(),
        &doc.network.edges,
    )?;

    let n = doc.users.len();
    let specified = doc.users.iter().filter(|u| u.weight.is_some()).count();
    if specified != 0 && specified != n {
        return Err(ScenarioError::Scenario(
            "either every user specifies a weight or none do".into(),
        ));
    }
    let raw_weights: Vec<f64> = if specified == 0 {
        vec![1.0; n]
    } else {
        doc.users.iter().map(|u| u.weight.unwrap()).collect()
    };
    for (i, w) in raw_weights.iter().enumerate() {
        if !w.is_finite() || *w < 0.0 {
            return Err(ScenarioError::User {
                user: i,
                message: format!("weight must be >= 0 (got {w})"),
            });
        }
    }
    let weight_sum: f64 = raw_weights.iter().sum();
    if weight_sum <= 0.0 {
        return Err(ScenarioError::Scenario(
            "weights must not all be zero".into(),
        ));
    }

    let mut users = Vec::with_capacity(n);
    let mut max_usage = 0.0f64;
    for (i, u) in doc.users.iter().enumerate() {
        if u.id != i {
            return Err(ScenarioError::User {
                user: i,
                message: format!("ids must be 0..{} in order (got {})", n - 1, u.id),
            });
        }
        if !u.capacity.is_finite() || u.capacity <= 0.0 {
            return Err(ScenarioError::User {
                user: i,
                message: format!("capacity must be positive (got {})", u.capacity),
            });
        }
        check_gaussian(&u.usage_rate, "usage_rate", true, |m| ScenarioError::User {
            user: i,
            message: m,
        })?;
        let location = network
            .node(&u.location)
            .ok_or_else(|| ScenarioError::UnknownNode(u.location.clone()))?;
        max_usage = max_usage.max(u.usage_rate.mean);
        users.push(UserAgentSpec {
            id: i,
            capacity: u.capacity,
            usage_rate: u.usage_rate,
            weight: raw_weights[i] / weight_sum,
            location,
        });
    }

    let r = &doc.replenisher;
    if !r.capacity.is_finite() || r.capacity <= 0.0 {
        return Err(ScenarioError::Replenisher(format!(
            "capacity must be positive (got {})",
            r.capacity
        )));
    }
    check_gaussian(
        &r.replenish_rate,
        "replenish_rate",
        true,
        ScenarioError::Replenisher,
    )?;
    check_gaussian(
        &r.setup_time,
        "setup_time",
        false,
        ScenarioError::Replenisher,
    )?;
    check_gaussian(
        &r.packup_time,
        "packup_time",
        false,
        ScenarioError::Replenisher,
    )?;
    check_gaussian(&r.speed, "speed", true, ScenarioError::Replenisher)?;
    let threshold = r
        .depot_threshold_fraction
        .unwrap_or(DEFAULT_DEPOT_THRESHOLD_FRACTION);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ScenarioError::Replenisher(format!(
            "depot_threshold_fraction must be in (0, 1) (got {threshold})"
        )));
    }
    if r.replenish_rate.mean <= max_usage {
        return Err(ScenarioError::ReplenishRateTooLow {
            rate: r.replenish_rate.mean,
            usage: max_usage,
        });
    }

    let d = &doc.depot;
    check_gaussian(
        &d.replenish_rate,
        "replenish_rate",
        true,
        ScenarioError::Depot,
    )?;
    check_gaussian(&d.setup_time, "setup_time", false, ScenarioError::Depot)?;
    check_gaussian(&d.packup_time, "packup_time", false, ScenarioError::Depot)?;
    let depot_location = network
        .node(&d.location)
        .ok_or_else(|| ScenarioError::UnknownNode(d.location.clone()))?;

    let config = ScenarioConfig {
        users,
        replenisher: ReplenisherSpec {
            capacity: r.capacity,
            replenish_rate: r.replenish_rate,
            setup_time: r.setup_time,
            packup_time: r.packup_time,
            speed: r.speed,
            depot_threshold_fraction: threshold,
        },
        depot: DepotSpec {
            location: depot_location,
            setup_time: d.setup_time,
            packup_time: d.packup_time,
            replenish_rate: d.replenish_rate,
        },
        network,
        sim_duration: doc.sim_duration_s,
    };

    // Every agent location must be able to reach the depot by road.
    for user in &config.users {
        if !config
            .network
            .distance(user.location, config.depot.location)
            .is_finite()
        {
            return Err(ScenarioError::Unreachable(
                config.network.node_name(user.location).to_string(),
                config.network.node_name(config.depot.location).to_string(),
            ));
        }
    }

    Ok(config)
}
