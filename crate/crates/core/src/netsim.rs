//! Round-based network simulator.
//!
//! Time advances in globally sequenced rounds (one inner gossip step each).
//! Within a round the activated agents may transmit; packets cross each
//! directed edge independently, can be dropped, and arrive after a uniform
//! delay of at most `max_staleness` rounds. Caches update in
//! `(sender, send-time)` order, then the activated agents gossip with the
//! round's doubly stochastic rows. Every random draw comes from a ChaCha
//! stream split off one root seed, so runs are reproducible and the channel
//! and activation draws never share a stream.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{AgentState, CommsConfig, Packet, ProtocolError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("topology needs at least one node")]
    Empty,
    #[error("grid {rows}x{cols} is empty")]
    EmptyGrid { rows: usize, cols: usize },
    #[error("graph is disconnected ({reached} of {nodes} nodes reachable from node 0)")]
    Disconnected { reached: usize, nodes: usize },
    #[error("no connected random geometric graph with radius {radius} after {attempts} attempts")]
    RetryBudgetExhausted { radius: f64, attempts: usize },
    #[error("invalid parameter {field}: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
}

/// Graph families understood by [`build_topology`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyKind {
    Grid2d { rows: usize, cols: usize },
    Ring { n: usize },
    Path { n: usize },
    Complete { n: usize },
    RandomGeometric { n: usize, radius: f64, seed: u64 },
}

impl TopologyKind {
    pub fn num_nodes(&self) -> usize {
        match *self {
            TopologyKind::Grid2d { rows, cols } => rows * cols,
            TopologyKind::Ring { n }
            | TopologyKind::Path { n }
            | TopologyKind::Complete { n }
            | TopologyKind::RandomGeometric { n, .. } => n,
        }
    }

    /// Same family with (roughly) `n` nodes; grids become the square with
    /// side `round(sqrt(n))`.
    pub fn resized(&self, n: usize) -> TopologyKind {
        match self {
            TopologyKind::Grid2d { .. } => {
                let side = (n as f64).sqrt().round().max(1.0) as usize;
                TopologyKind::Grid2d {
                    rows: side,
                    cols: side,
                }
            }
            TopologyKind::Ring { .. } => TopologyKind::Ring { n },
            TopologyKind::Path { .. } => TopologyKind::Path { n },
            TopologyKind::Complete { .. } => TopologyKind::Complete { n },
            TopologyKind::RandomGeometric { radius, seed, .. } => TopologyKind::RandomGeometric {
                n,
                radius: *radius,
                seed: *seed,
            },
        }
    }
}

/// Connected undirected graph without self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    kind: TopologyKind,
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds from an explicit edge list; duplicate and reversed edges are
    /// merged, self-loops dropped.
    pub fn from_edges(
        kind: TopologyKind,
        num_nodes: usize,
        raw_edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, NetError> {
        if num_nodes == 0 {
            return Err(NetError::Empty);
        }
        let mut edges: Vec<(usize, usize)> = raw_edges
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(a, b) in &edges {
            if b >= num_nodes {
                return Err(NetError::InvalidParameter {
                    field: "edges",
                    reason: format!("node {b} out of range for {num_nodes} nodes"),
                });
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        adjacency.iter_mut().for_each(|n| n.sort_unstable());
        let topology = Self {
            kind,
            num_nodes,
            edges,
            adjacency,
        };
        let reached = topology.reachable_from_zero();
        if reached != num_nodes {
            return Err(NetError::Disconnected {
                reached,
                nodes: num_nodes,
            });
        }
        Ok(topology)
    }

    fn reachable_from_zero(&self) -> usize {
        let mut seen = vec![false; self.num_nodes];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &k in &self.adjacency[i] {
                if !seen[k] {
                    seen[k] = true;
                    count += 1;
                    queue.push_back(k);
                }
            }
        }
        count
    }

    pub fn kind(&self) -> &TopologyKind {
        &self.kind
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }
}

const GEOMETRIC_ATTEMPTS: usize = 100;

pub fn build_topology(kind: &TopologyKind) -> Result<Topology, NetError> {
    match *kind {
        TopologyKind::Grid2d { rows, cols } => {
            if rows == 0 || cols == 0 {
                return Err(NetError::EmptyGrid { rows, cols });
            }
            let id = |r: usize, c: usize| r * cols + c;
            let mut edges = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if c + 1 < cols {
                        edges.push((id(r, c), id(r, c + 1)));
                    }
                    if r + 1 < rows {
                        edges.push((id(r, c), id(r + 1, c)));
                    }
                }
            }
            Topology::from_edges(kind.clone(), rows * cols, edges)
        }
        TopologyKind::Ring { n } => {
            let edges = (0..n).map(|i| (i, (i + 1) % n));
            Topology::from_edges(kind.clone(), n, edges)
        }
        TopologyKind::Path { n } => {
            let edges = (1..n).map(|i| (i - 1, i));
            Topology::from_edges(kind.clone(), n, edges)
        }
        TopologyKind::Complete { n } => {
            let edges = (0..n).flat_map(|i| (i + 1..n).map(move |k| (i, k)));
            Topology::from_edges(kind.clone(), n, edges)
        }
        TopologyKind::RandomGeometric { n, radius, seed } => {
            if !(radius > 0.0) {
                return Err(NetError::InvalidParameter {
                    field: "radius",
                    reason: format!("must be positive, got {radius}"),
                });
            }
            for attempt in 0..GEOMETRIC_ATTEMPTS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(attempt as u64);
                let points: Vec<(f64, f64)> = (0..n)
                    .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
                    .collect();
                let mut edges = Vec::new();
                for i in 0..n {
                    for k in i + 1..n {
                        let (dx, dy) = (points[i].0 - points[k].0, points[i].1 - points[k].1);
                        if (dx * dx + dy * dy).sqrt() <= radius {
                            edges.push((i, k));
                        }
                    }
                }
                match Topology::from_edges(kind.clone(), n, edges) {
                    Ok(t) => return Ok(t),
                    Err(NetError::Disconnected { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(NetError::RetryBudgetExhausted {
                radius,
                attempts: GEOMETRIC_ATTEMPTS,
            })
        }
    }
}

/// Doubly stochastic averaging matrix with its spectral summary.
#[derive(Debug, Clone)]
pub struct GossipWeights {
    w: DMatrix<f64>,
    sigma2: f64,
    beta: f64,
}

impl GossipWeights {
    /// Wraps a doubly stochastic matrix (row and column sums 1 within 1e-12).
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self, NetError> {
        let n = w.nrows();
        if n == 0 || w.ncols() != n {
            return Err(NetError::InvalidParameter {
                field: "weights",
                reason: "need a nonempty square matrix".into(),
            });
        }
        if w.iter().any(|&x| !(x >= 0.0)) {
            return Err(NetError::InvalidParameter {
                field: "weights",
                reason: "entries must be nonnegative".into(),
            });
        }
        for i in 0..n {
            let row: f64 = w.row(i).sum();
            let col: f64 = w.column(i).sum();
            if (row - 1.0).abs() > 1e-12 || (col - 1.0).abs() > 1e-12 {
                return Err(NetError::InvalidParameter {
                    field: "weights",
                    reason: format!("row/column {i} sums to {row}/{col}"),
                });
            }
        }
        let beta = w
            .iter()
            .cloned()
            .filter(|&x| x > 0.0)
            .fold(f64::INFINITY, f64::min);
        let sigma2 = second_singular_value(&w);
        Ok(Self { w, sigma2, beta })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Smallest positive weight.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn num_nodes(&self) -> usize {
        self.w.nrows()
    }

    /// Nonzero entries of row `i` as `(k, w_ik)`.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        self.w
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(k, &w)| (k, w))
            .collect()
    }
}

/// `σ₂(W) = ‖W - 11ᵀ/N‖₂` for doubly stochastic `W`.
fn second_singular_value(w: &DMatrix<f64>) -> f64 {
    let n = w.nrows();
    if n == 1 {
        return 0.0;
    }
    let centered = w - DMatrix::from_element(n, n, 1.0 / n as f64);
    let sv = centered.singular_values();
    sv.iter().cloned().fold(0.0, f64::max).min(1.0)
}

/// `w_ik = 1/(1 + max(deg_i, deg_k))` on edges, remainder on the diagonal.
pub fn metropolis_weights(topology: &Topology) -> GossipWeights {
    let n = topology.num_nodes();
    let mut w = DMatrix::zeros(n, n);
    for &(a, b) in topology.edges() {
        let x = 1.0 / (1.0 + topology.degree(a).max(topology.degree(b)) as f64);
        w[(a, b)] = x;
        w[(b, a)] = x;
    }
    for i in 0..n {
        let off: f64 = topology.neighbors(i).iter().map(|&k| w[(i, k)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    GossipWeights::from_matrix(w).expect("Metropolis weights are doubly stochastic")
}

/// Returns `(σ₂(W), 1 - σ₂(W))`.
pub fn spectral_gap(weights: &GossipWeights) -> (f64, f64) {
    (weights.sigma2, 1.0 - weights.sigma2)
}

/// Packet loss and delay on every directed edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    pub drop_prob: f64,
    pub max_staleness: u32,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            drop_prob: 0.0,
            max_staleness: 0,
        }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(NetError::InvalidParameter {
                field: "drop_prob",
                reason: format!("must lie in [0, 1], got {}", self.drop_prob),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    #[default]
    Synchronous,
    /// One uniformly drawn edge averages per round.
    RandomizedPairwise,
    /// Every node wakes independently with probability `p_active`.
    RandomizedSubset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationModel {
    pub mode: ActivationMode,
    pub p_active: f64,
}

impl Default for ActivationModel {
    fn default() -> Self {
        Self {
            mode: ActivationMode::Synchronous,
            p_active: 0.5,
        }
    }
}

impl ActivationModel {
    pub fn synchronous() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.mode == ActivationMode::RandomizedSubset
            && !(self.p_active > 0.0 && self.p_active <= 1.0)
        {
            return Err(NetError::InvalidParameter {
                field: "p_active",
                reason: format!("must lie in (0, 1], got {}", self.p_active),
            });
        }
        Ok(())
    }
}

/// Metropolis rows restricted to the active set; the mass of inactive
/// neighbors moves to the diagonal and inactive nodes keep identity rows.
pub fn effective_weights(base: &GossipWeights, active: &[bool]) -> DMatrix<f64> {
    let n = base.num_nodes();
    let w = base.matrix();
    DMatrix::from_fn(n, n, |i, k| {
        if i == k {
            if !active[i] {
                return 1.0;
            }
            1.0 - (0..n)
                .filter(|&j| j != i && active[j])
                .map(|j| w[(i, j)])
                .sum::<f64>()
        } else if active[i] && active[k] {
            w[(i, k)]
        } else {
            0.0
        }
    })
}

/// `E[W⁽ˢ⁾]` under the activation model.
pub fn expected_weights(
    base: &GossipWeights,
    topology: &Topology,
    activation: &ActivationModel,
) -> GossipWeights {
    let n = base.num_nodes();
    let w = base.matrix();
    let mut mean = DMatrix::zeros(n, n);
    match activation.mode {
        ActivationMode::Synchronous => return base.clone(),
        ActivationMode::RandomizedSubset => {
            let p2 = activation.p_active * activation.p_active;
            for i in 0..n {
                for k in 0..n {
                    if i != k {
                        mean[(i, k)] = p2 * w[(i, k)];
                    }
                }
            }
        }
        ActivationMode::RandomizedPairwise => {
            let m = topology.edges().len().max(1) as f64;
            for &(a, b) in topology.edges() {
                mean[(a, b)] = w[(a, b)] / m;
                mean[(b, a)] = w[(b, a)] / m;
            }
        }
    }
    for i in 0..n {
        let off: f64 = mean.row(i).sum();
        mean[(i, i)] = 1.0 - off;
    }
    GossipWeights::from_matrix(mean).expect("expected weights are doubly stochastic")
}

/// `sqrt(Σ_i Σ_j (z_ij - mean_j)²)`.
pub fn consensus_residual(z_all: &[Vec<f64>]) -> f64 {
    let n = z_all.len();
    if n == 0 {
        return 0.0;
    }
    let d = z_all[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let mean = z_all.iter().map(|z| z[j]).sum::<f64>() / n as f64;
        total += z_all.iter().map(|z| (z[j] - mean).powi(2)).sum::<f64>();
    }
    total.sqrt()
}

/// Residual of the agents' current estimates.
pub fn agent_residual(agents: &[AgentState]) -> f64 {
    let z: Vec<Vec<f64>> = agents.iter().map(|a| a.z.clone()).collect();
    consensus_residual(&z)
}

/// A broadcast as seen by the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub round: u64,
    pub packet: Packet,
}

#[derive(Debug, Clone)]
struct InFlight {
    due: u64,
    sent: u64,
    receiver: usize,
    packet: Packet,
}

/// What happened in the exchange half of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub index: u64,
    pub active: Vec<bool>,
    pub sent: usize,
    pub delivered: usize,
    pub dropped: usize,
}

const ACTIVATION_STREAM: u64 = 0;

/// Simulator state: channel randomness, packets in flight and the round clock.
#[derive(Debug)]
pub struct Network {
    topology: Topology,
    weights: GossipWeights,
    channel: ChannelModel,
    activation: ActivationModel,
    activation_rng: ChaCha8Rng,
    /// One stream per directed edge, indexed by `sender * N + receiver`.
    edge_rngs: Vec<Option<ChaCha8Rng>>,
    in_flight: Vec<InFlight>,
    round: u64,
    record: Option<Vec<PacketRecord>>,
}

impl Network {
    pub fn new(
        topology: Topology,
        weights: GossipWeights,
        channel: ChannelModel,
        activation: ActivationModel,
        seed: u64,
    ) -> Self {
        let n = topology.num_nodes();
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        let mut edge_rngs = vec![None; n * n];
        for i in 0..n {
            for &k in topology.neighbors(i) {
                edge_rngs[i * n + k] = Some(stream(1 + (i * n + k) as u64));
            }
        }
        Self {
            activation_rng: stream(ACTIVATION_STREAM),
            topology,
            weights,
            channel,
            activation,
            edge_rngs,
            in_flight: Vec::new(),
            round: 0,
            record: None,
        }
    }

    /// Keep a copy of every broadcast for trace dumps.
    pub fn record_packets(&mut self) {
        self.record.get_or_insert_with(Vec::new);
    }

    pub fn take_records(&mut self) -> Vec<PacketRecord> {
        self.record.take().unwrap_or_default()
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn weights(&self) -> &GossipWeights {
        &self.weights
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    fn draw_active(&mut self) -> Vec<bool> {
        let n = self.topology.num_nodes();
        match self.activation.mode {
            ActivationMode::Synchronous => vec![true; n],
            ActivationMode::RandomizedSubset => (0..n)
                .map(|_| self.activation_rng.random::<f64>() < self.activation.p_active)
                .collect(),
            ActivationMode::RandomizedPairwise => {
                let mut active = vec![false; n];
                let edges = self.topology.edges();
                if !edges.is_empty() {
                    let (a, b) = edges[self.activation_rng.random_range(0..edges.len())];
                    active[a] = true;
                    active[b] = true;
                }
                active
            }
        }
    }

    fn log(&mut self, packet: &Packet) {
        if let Some(record) = &mut self.record {
            record.push(PacketRecord {
                round: self.round,
                packet: packet.clone(),
            });
        }
    }

    /// Mandatory full exchange: every agent transmits and every neighbor
    /// receives, bypassing trigger, activation and channel.
    pub fn bootstrap(
        &mut self,
        agents: &mut [AgentState],
        comms: &CommsConfig,
        outer_iter: u32,
        inner_step: u32,
    ) -> Round {
        let n = agents.len();
        let packets: Vec<Packet> = agents
            .iter_mut()
            .map(|a| a.transmit(comms, outer_iter, inner_step))
            .collect();
        let mut delivered = 0;
        for p in &packets {
            self.log(p);
            for &k in self.topology.neighbors(p.sender) {
                agents[k].receive(p.clone());
                delivered += 1;
            }
        }
        Round {
            index: self.round,
            active: vec![true; n],
            sent: n,
            delivered,
            dropped: 0,
        }
    }

    /// Transmit/deliver half of a round: draws the active set, runs every
/// trigger, pushes packets through the channel and delivers what is due.
    pub fn exchange(
        &mut self,
        agents: &mut [AgentState],
        comms: &CommsConfig,
        outer_iter: u32,
        inner_step: u32,
    ) -> Round {
        let n = agents.len();
        let active = self.draw_active();
        let mut sent = 0;
        let mut dropped = 0;
        // Every node runs its trigger; activation only decides who averages.
        // Gating sends on activation would leave neighbors averaging against
        // values one activation old, and the round would stop being doubly
        // stochastic even on a perfect channel.
        for i in 0..n {
            let Some(packet) = agents[i].maybe_transmit(comms, outer_iter, inner_step) else {
                continue;
            };
            sent += 1;
            self.log(&packet);
            for &k in self.topology.neighbors(i) {
                let rng = self.edge_rngs[i * n + k].as_mut().expect("edge stream");
                // both draws happen every time so drop_prob never shifts delays
                let lost = rng.random::<f64>() < self.channel.drop_prob;
                let delay = rng.random_range(0..=self.channel.max_staleness) as u64;
                if lost {
                    dropped += 1;
                    continue;
                }
                self.in_flight.push(InFlight {
                    due: self.round + delay,
                    sent: self.round,
                    receiver: k,
                    packet: packet.clone(),
                });
            }
        }
        let now = self.round;
        let (mut due, pending): (Vec<InFlight>, Vec<InFlight>) =
            self.in_flight.drain(..).partition(|f| f.due <= now);
        self.in_flight = pending;
        due.sort_by_key(|f| (f.receiver, f.packet.sender, f.sent));
        let delivered = due.len();
        for f in due {
            agents[f.receiver].receive(f.packet);
        }
        Round {
            index: self.round,
            active,
            sent,
            delivered,
            dropped,
        }
    }

    /// Gossip half of a round; advances the clock.
    pub fn gossip(&mut self, agents: &mut [AgentState], round: &Round) -> Result<(), ProtocolError> {
        let all_active = round.active.iter().all(|&a| a);
        if all_active {
            for (i, agent) in agents.iter_mut().enumerate() {
                agent.gossip_step(&self.weights.row(i))?;
            }
        } else {
            let w = effective_weights(&self.weights, &round.active);
            for (i, agent) in agents.iter_mut().enumerate() {
                if !round.active[i] {
                    continue;
                }
                let row: Vec<(usize, f64)> = w
                    .row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x != 0.0)
                    .map(|(k, &x)| (k, x))
                    .collect();
                agent.gossip_step(&row)?;
            }
        }
        self.round += 1;
        Ok(())
    }

    /// Exchange then gossip.
    pub fn schedule_round(
        &mut self,
        agents: &mut [AgentState],
        comms: &CommsConfig,
        outer_iter: u32,
        inner_step: u32,
    ) -> Result<Round, ProtocolError> {
        let round = self.exchange(agents, comms, outer_iter, inner_step);
        self.gossip(agents, &round)?;
        Ok(round)
    }
}
