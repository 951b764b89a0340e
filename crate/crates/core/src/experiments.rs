//! Experiment harness: instances, end-to-end decentralized runs against the
//! centralized oracle, figure tables and the theory verification report.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::config::{
    ConfigError, CostKind, DensityConfig, ProblemConfig, RunConfig, SweepConfig, SweepVariable,
};
use crate::netsim::{
    agent_residual, build_topology, consensus_residual, metropolis_weights, ActivationModel, ChannelModel, NetError,
    Network, PacketRecord, Topology,
};
use crate::ot::{
    barycenter_map, centralized_barycenter, hilbert_distance, l1_distance, linf_distance,
    softmax_normalize, theory_constants, CentralizedSolution, CostMatrix,
    Histogram, OtError, ProblemInstance, TheoryConstants,
};
use crate::protocol::{outer_converged, wire_len, AgentState, Bits, CommsConfig, ProtocolError};
use crate::stats::{self, summarize};

/// Tolerance and cap of the centralized reference every run is judged against.
pub const ORACLE_TOLERANCE: f64 = 1e-12;
pub const ORACLE_ITERATION_CAP: usize = 100_000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("agent {agent} failed in outer iteration {outer_iter}: {source}")]
    Agent {
        agent: usize,
        outer_iter: usize,
        source: ProtocolError,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("centralized oracle hit its cap of {cap} iterations")]
    OracleCap { cap: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Two-component Gaussian mixture on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    /// `(weight, mean, width)` per component.
    pub components: [(f64, f64, f64); 2],
}

impl Mixture {
    pub fn sample(rng: &mut impl Rng, cfg: &DensityConfig) -> Self {
        let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let w = draw(cfg.weight_low, 1.0 - cfg.weight_low);
        let c1 = (w, draw(cfg.mean_low, cfg.mean_high), draw(cfg.width_low, cfg.width_high));
        let c2 = (1.0 - w, draw(cfg.mean_low, cfg.mean_high), draw(cfg.width_low, cfg.width_high));
        Self { components: [c1, c2] }
    }

    pub fn density(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|&(w, m, s)| w * (-0.5 * ((x - m) / s).powi(2)).exp() / s)
            .sum()
    }

    /// Mixture mass on `[a, b]`.
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        let cdf = |x: f64, m: f64, s: f64| 0.5 * (1.0 + erf((x - m) / (s * std::f64::consts::SQRT_2)));
        self.components
            .iter()
            .map(|&(w, m, s)| w * (cdf(b, m, s) - cdf(a, m, s)))
            .sum()
    }

    /// Mass of each grid cell (the points of `[0, 1]` nearest to each grid
    /// point), renormalized. Cell masses make coarse grids consistent with
    /// summing a fine histogram onto them.
    pub fn discretize(&self, d: usize) -> Result<Histogram, OtError> {
        Histogram::normalized(
            (0..d)
                .map(|j| {
                    let (a, b) = grid_cell(j, d);
                    self.mass(a, b).max(0.0)
                })
                .collect(),
        )
    }
}

/// `d` evenly spaced points of `[0, 1]`.
pub fn grid_points(d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![0.5];
    }
    (0..d).map(|j| j as f64 / (d - 1) as f64).collect()
}

pub fn build_cost(kind: CostKind, d: usize) -> CostMatrix {
    match kind {
        CostKind::SquaredEuclidean => CostMatrix::squared_grid(d),
        CostKind::Absolute => {
            let x = grid_points(d);
            CostMatrix::new(nalgebra::DMatrix::from_fn(d, d, |j, k| (x[j] - x[k]).abs()))
                .expect("grid distances are finite and nonnegative")
        }
    }
}

/// Agent densities for one run. They depend on the density seed and the run
/// seed but not on `d`, so support sweeps discretize the same continuum.
pub fn sample_mixtures(problem: &ProblemConfig, n_agents: usize, run_seed: u64) -> Vec<Mixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(problem.density_seed);
    rng.set_stream(run_seed);
    (0..n_agents)
        .map(|_| Mixture::sample(&mut rng, &problem.densities))
        .collect()
}

pub fn build_instance(
    problem: &ProblemConfig,
    n_agents: usize,
    run_seed: u64,
) -> Result<ProblemInstance, ExperimentError> {
    let histograms = sample_mixtures(problem, n_agents, run_seed)
        .iter()
        .map(|m| m.discretize(problem.d))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProblemInstance::new(
        build_cost(problem.cost_kind, problem.d),
        problem.epsilon,
        problem.ridge,
        histograms,
    )?)
}

/// The centralized reference at oracle tolerance.
pub fn oracle(instance: &ProblemInstance) -> Result<CentralizedSolution, ExperimentError> {
    let sol = centralized_barycenter(instance, ORACLE_TOLERANCE, ORACLE_ITERATION_CAP)?;
    if !sol.converged {
        return Err(ExperimentError::OracleCap {
            cap: ORACLE_ITERATION_CAP,
        });
    }
    Ok(sol)
}

/// Everything a decentralized run needs besides the comms settings.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub instance: ProblemInstance,
    pub oracle: CentralizedSolution,
    pub topology: Topology,
    pub channel: ChannelModel,
    pub activation: ActivationModel,
    pub seed: u64,
}

impl RunSetup {
    /// Instance, oracle and topology for `config` at one run seed.
    pub fn from_config(config: &RunConfig, seed: u64) -> Result<Self, ExperimentError> {
        config.validate()?;
        let topology = build_topology(&config.network)?;
        let instance = build_instance(&config.problem, topology.num_nodes(), seed)?;
        let oracle = oracle(&instance)?;
        Ok(Self {
            instance,
            oracle,
            topology,
            channel: config.channel,
            activation: config.activation,
            seed,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep every broadcast for a packet trace dump.
    pub record_packets: bool,
    /// Keep each node's `z` at the end of every outer iteration.
    pub record_log_v: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer_iter: usize,
    pub inner_steps_used: usize,
    /// Residual after the reseed and after every gossip step.
    pub consensus_residual_trace: Vec<f64>,
    /// `max_i ‖z_i - z_i(previous outer)‖∞`.
    pub log_v_change_linf: f64,
    pub messages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub per_outer_iter: Vec<OuterRecord>,
    pub l1_error_per_node: Vec<f64>,
    pub l1_error_max: f64,
    pub l1_error_mean: f64,
    /// Broadcasts; one broadcast reaches every neighbor.
    pub messages_total: u64,
    pub messages_per_agent: Vec<u64>,
    /// Point-to-point transmissions, `Σ deg(sender)` over broadcasts.
    pub link_messages: u64,
    pub bytes_total: u64,
    pub wall_clock_seconds: f64,
    pub bias_bound: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub clip_active: bool,
    /// Cumulative sup-norm variation of each agent's `z`.
    pub variation_per_agent: Vec<f64>,
    pub theory: TheoryConstants,
}

impl RunMetrics {
    /// Broadcast budget `1 + ceil(V_i/δ)` holds for every agent.
    pub fn trigger_budget_holds(&self, delta: f64) -> bool {
        self.messages_per_agent
            .iter()
            .zip(&self.variation_per_agent)
            .all(|(&m, &v)| (m as f64) <= 1.0 + (v / delta).ceil())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub barycenters: Vec<Histogram>,
    pub packets: Vec<PacketRecord>,
    /// `log_v_history[t][i]` is node `i`'s `z` after outer iteration `t`.
    pub log_v_history: Vec<Vec<Vec<f64>>>,
}

/// Full decentralized run: local scaling, triggered quantized gossip, shared
/// projection, until every node's outer change drops below `τ_outer` or the
/// outer cap is hit.
pub fn run_decentralized(
    setup: &RunSetup,
    comms: &CommsConfig,
    options: &RunOptions,
) -> Result<RunOutcome, ExperimentError> {
    comms.validate()?;
    let instance = &setup.instance;
    let n = instance.num_agents();
    let d = instance.support_size();
    if setup.topology.num_nodes() != n {
        return Err(ExperimentError::Dimension(format!(
            "{} histograms on a {}-node topology",
            n,
            setup.topology.num_nodes()
        )));
    }
    let start = Instant::now();
    let weights = metropolis_weights(&setup.topology);
    let mut network = Network::new(
        setup.topology.clone(),
        weights,
        setup.channel,
        setup.activation,
        setup.seed,
    );
    if options.record_packets {
        network.record_packets();
    }
    let mut agents: Vec<AgentState> = (0..n).map(|i| AgentState::new(i, d)).collect();
    let mut per_outer = Vec::new();
    let mut log_v_history = Vec::new();
    let mut converged = false;
    let mut inner_clock: u32 = 0;

    for t in 0..comms.outer_iter_cap {
        let prev: Vec<Vec<f64>> = agents.iter().map(|a| a.z.clone()).collect();
        let sent_before: u64 = agents.iter().map(|a| a.messages_sent).sum();
        for (i, agent) in agents.iter_mut().enumerate() {
            agent
                .local_scaling_update(&instance.histograms()[i], instance.kernel(), instance.ridge())
                .map_err(|source| ExperimentError::Agent {
                    agent: i,
                    outer_iter: t,
                    source,
                })?;
            agent.reseed_inner();
        }
        let mut trace = vec![agent_residual(&agents)];
        let mut steps = 0;
        while steps < comms.inner_step_cap {
            let round = if t == 0 && steps == 0 {
                network.bootstrap(&mut agents, comms, t as u32, inner_clock)
            } else {
                network.exchange(&mut agents, comms, t as u32, inner_clock)
            };
            inner_clock += 1;
            if agents.iter().all(|a| a.inner_converged(comms)) {
                break;
            }
            network
                .gossip(&mut agents, &round)
                .map_err(|source| ExperimentError::Protocol(source))?;
            steps += 1;
            trace.push(agent_residual(&agents));
        }
        if let Some(bad) = agents.iter().find(|a| a.z.iter().any(|x| !x.is_finite())) {
            return Err(ExperimentError::Agent {
                agent: bad.id,
                outer_iter: t,
                source: ProtocolError::NonFiniteEstimate { agent: bad.id },
            });
        }
        let change = agents
            .iter()
            .zip(&prev)
            .map(|(a, p)| linf_distance(&a.z, p))
            .fold(0.0, f64::max);
        let sent_after: u64 = agents.iter().map(|a| a.messages_sent).sum();
        per_outer.push(OuterRecord {
            outer_iter: t,
            inner_steps_used: steps,
            consensus_residual_trace: trace,
            log_v_change_linf: change,
            messages: sent_after - sent_before,
        });
        if options.record_log_v {
            log_v_history.push(agents.iter().map(|a| a.z.clone()).collect());
        }
        if agents
            .iter()
            .zip(&prev)
            .all(|(a, p)| outer_converged(p, &a.z, comms))
        {
            converged = true;
            break;
        }
    }

    let barycenters: Vec<Histogram> = agents.iter().map(|a| softmax_normalize(&a.z)).collect();
    let l1_error_per_node: Vec<f64> = barycenters
        .iter()
        .map(|b| b.l1_distance(&setup.oracle.barycenter))
        .collect();
    let l1_error_max = l1_error_per_node.iter().cloned().fold(0.0, f64::max);
    let l1_error_mean = l1_error_per_node.iter().sum::<f64>() / n as f64;
    let messages_per_agent: Vec<u64> = agents.iter().map(|a| a.messages_sent).collect();
    let messages_total = messages_per_agent.iter().sum();
    let link_messages = agents
        .iter()
        .map(|a| a.messages_sent * setup.topology.degree(a.id) as u64)
        .sum();
    let bytes_total = messages_total * wire_len(d, comms.bits) as u64;
    let theory = theory_constants(instance, comms);
    let metrics = RunMetrics {
        seed: setup.seed,
        outer_iterations: per_outer.len(),
        per_outer_iter: per_outer,
        l1_error_per_node,
        l1_error_max,
        l1_error_mean,
        messages_total,
        messages_per_agent,
        link_messages,
        bytes_total,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        bias_bound: theory.steady_state_bias_bound,
        converged,
        clip_active: agents.iter().any(|a| a.clip_events > 0),
        variation_per_agent: agents.iter().map(|a| a.variation_accum).collect(),
        theory,
    };
    Ok(RunOutcome {
        metrics,
        barycenters,
        packets: network.take_records(),
        log_v_history,
    })
}

/// One row of a residual trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub variant: String,
    /// Global inner-step counter across outer iterations.
    pub round: usize,
    pub outer_iter: usize,
    pub inner_step: usize,
    pub residual: f64,
}

/// Flattens the per-outer residual traces of a run.
pub fn trace_rows(variant: &str, metrics: &RunMetrics) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    let mut round = 0;
    for rec in &metrics.per_outer_iter {
        for (step, &residual) in rec.consensus_residual_trace.iter().enumerate() {
            rows.push(TraceRow {
                variant: variant.to_string(),
                round,
                outer_iter: rec.outer_iter,
                inner_step: step,
                residual,
            });
            round += 1;
        }
    }
    rows
}

#[derive(Debug, Clone)]
pub struct ConvergenceTrace {
    pub always: RunMetrics,
    pub triggered: RunMetrics,
    pub sigma2: f64,
    pub rows: Vec<TraceRow>,
}

/// Residual traces for always-gossip (`δ = 0`) and the configured trigger on
/// the same instance and seed.
pub fn run_convergence_trace(config: &RunConfig, seed: u64) -> Result<ConvergenceTrace, ExperimentError> {
    let setup = RunSetup::from_config(config, seed)?;
    let always_comms = CommsConfig {
        delta: 0.0,
        ..config.comms.clone()
    };
    let always = run_decentralized(&setup, &always_comms, &RunOptions::default())?.metrics;
    let triggered = run_decentralized(&setup, &config.comms, &RunOptions::default())?.metrics;
    let mut rows = trace_rows("always", &always);
    rows.extend(trace_rows("triggered", &triggered));
    Ok(ConvergenceTrace {
        sigma2: metropolis_weights(&setup.topology).sigma2(),
        always,
        triggered,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub support_x: f64,
    pub b_star: f64,
    pub b_tilde_min: f64,
    pub b_tilde_max: f64,
}

#[derive(Debug, Clone)]
pub struct Overlap {
    pub rows: Vec<OverlapRow>,
    pub metrics: RunMetrics,
    pub barycenters: Vec<Histogram>,
    pub oracle: Histogram,
}

impl Overlap {
    /// `max_{i,j} |b*_j - b̃_{i,j}|`.
    pub fn max_pointwise_gap(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.b_star - r.b_tilde_min).abs().max((r.b_tilde_max - r.b_star).abs()))
            .fold(0.0, f64::max)
    }

    /// `max_j (max_i b̃_{i,j} - min_i b̃_{i,j})`.
    pub fn inter_node_spread(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.b_tilde_max - r.b_tilde_min)
            .fold(0.0, f64::max)
    }
}

/// Centralized barycenter next to the range of per-node outputs.
pub fn run_overlap(config: &RunConfig, seed: u64) -> Result<Overlap, ExperimentError> {
    let setup = RunSetup::from_config(config, seed)?;
    let outcome = run_decentralized(&setup, &config.comms, &RunOptions::default())?;
    let x = grid_points(config.problem.d);
    let b_star = setup.oracle.barycenter.weights();
    let rows = (0..config.problem.d)
        .map(|j| {
            let masses = outcome.barycenters.iter().map(|b| b.weights()[j]);
            OverlapRow {
                support_x: x[j],
                b_star: b_star[j],
                b_tilde_min: masses.clone().fold(f64::INFINITY, f64::min),
                b_tilde_max: masses.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(Overlap {
        rows,
        metrics: outcome.metrics,
        barycenters: outcome.barycenters,
        oracle: setup.oracle.barycenter.clone(),
    })
}

/// Runs `f` over `items` on a pool of `jobs` threads, preserving order.
pub fn run_jobs<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool")
        .install(|| items.par_iter().map(&f).collect())
}

/// The base config with one sweep variable set.
pub fn apply_sweep_value(
    base: &RunConfig,
    variable: SweepVariable,
    value: f64,
) -> Result<RunConfig, ConfigError> {
    let mut c = base.clone();
    let as_count = |path: &str| {
        if value >= 1.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(ConfigError::new(path, format!("{value} is not a positive integer")))
        }
    };
    match variable {
        SweepVariable::N => {
            let n = as_count("sweep.values")?;
            c.network = c.network.resized(n);
            if c.network.num_nodes() != n {
                return Err(ConfigError::new(
                    "sweep.values",
                    format!("{n} nodes do not fit {:?}", base.network),
                ));
            }
        }
        SweepVariable::D => c.problem.d = as_count("sweep.values")?,
        SweepVariable::Delta => c.comms.delta = value,
        SweepVariable::Bits => {
            let b = as_count("sweep.values")?;
            c.comms.bits = Bits::Quantized(u8::try_from(b).map_err(|_| {
                ConfigError::new("sweep.values", format!("{b} bits is out of range"))
            })?);
        }
        SweepVariable::TauInner => c.comms.tau_inner = value,
        SweepVariable::Epsilon => c.problem.epsilon = value,
        SweepVariable::DropProb => c.channel.drop_prob = value,
    }
    c.sweep = None;
    c.validate()?;
    Ok(c)
}

/// One (value, seed) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub messages_total: u64,
    pub link_messages: u64,
    pub bytes_total: u64,
    pub l1_error_max: f64,
    pub l1_error_mean: f64,
    pub wall_clock_seconds: f64,
    pub clip_active: bool,
    /// Set when the run failed; the numeric columns are then zero.
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(value: f64, seed: u64, error: String) -> Self {
        Self {
            value,
            seed,
            converged: false,
            outer_iterations: 0,
            messages_total: 0,
            link_messages: 0,
            bytes_total: 0,
            l1_error_max: 0.0,
            l1_error_mean: 0.0,
            wall_clock_seconds: 0.0,
            clip_active: false,
            error: Some(error),
        }
    }

    fn from_metrics(value: f64, m: &RunMetrics) -> Self {
        Self {
            value,
            seed: m.seed,
            converged: m.converged,
            outer_iterations: m.outer_iterations,
            messages_total: m.messages_total,
            link_messages: m.link_messages,
            bytes_total: m.bytes_total,
            l1_error_max: m.l1_error_max,
            l1_error_mean: m.l1_error_mean,
            wall_clock_seconds: m.wall_clock_seconds,
            clip_active: m.clip_active,
            error: None,
        }
    }
}

/// Runs every `(value, seed)` pair of `sweep`; failures are recorded in the
/// rows and do not stop the sweep. Rows come back sorted by `(value, seed)`.
pub fn run_sweep(base: &RunConfig, sweep: &SweepConfig, jobs: usize) -> Vec<SweepRow> {
    let cells: Vec<(f64, u64)> = sweep
        .values
        .iter()
        .flat_map(|&v| base.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let mut rows = run_jobs(&cells, jobs, |&(value, seed)| {
        let result = apply_sweep_value(base, sweep.variable, value)
            .map_err(ExperimentError::from)
            .and_then(|c| {
                let setup = RunSetup::from_config(&c, seed)?;
                run_decentralized(&setup, &c.comms, &RunOptions::default())
            });
        match result {
            Ok(outcome) => SweepRow::from_metrics(value, &outcome.metrics),
            Err(e) => SweepRow::failed(value, seed, e.to_string()),
        }
    });
    rows.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.seed.cmp(&b.seed)));
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub messages_mean: f64,
    pub messages_ci: f64,
    pub runtime_mean: f64,
    pub runtime_ci: f64,
    pub link_messages_mean: f64,
    pub edges: usize,
    pub converged_runs: usize,
    pub failed_runs: usize,
}

/// Aggregates an N-sweep into per-N means with 95% half-widths.
pub fn scaling_table(base: &RunConfig, rows: &[SweepRow]) -> Vec<ScalingRow> {
    group_by_value(rows)
        .into_iter()
        .map(|(value, group)| {
            let ok: Vec<&SweepRow> = group.iter().filter(|r| r.error.is_none()).copied().collect();
            let msgs: Vec<f64> = ok.iter().map(|r| r.messages_total as f64).collect();
            let links: Vec<f64> = ok.iter().map(|r| r.link_messages as f64).collect();
            let wall: Vec<f64> = ok.iter().map(|r| r.wall_clock_seconds).collect();
            let (m, w) = (summarize(&msgs), summarize(&wall));
            let n = value as usize;
            let edges = build_topology(&base.network.resized(n))
                .map(|t| t.edges().len())
                .unwrap_or(0);
            ScalingRow {
                n,
                messages_mean: m.mean,
                messages_ci: m.half_width(),
                runtime_mean: w.mean,
                runtime_ci: w.half_width(),
                link_messages_mean: stats::mean(&links),
                edges,
                converged_runs: ok.iter().filter(|r| r.converged).count(),
                failed_runs: group.len() - ok.len(),
            }
        })
        .collect()
}

pub fn run_scaling_sweep(base: &RunConfig, sizes: &[usize], jobs: usize) -> Vec<ScalingRow> {
    let sweep = SweepConfig {
        variable: SweepVariable::N,
        values: sizes.iter().map(|&n| n as f64).collect(),
    };
    scaling_table(base, &run_sweep(base, &sweep, jobs))
}

fn group_by_value(rows: &[SweepRow]) -> Vec<(f64, Vec<&SweepRow>)> {
    let mut groups: Vec<(f64, Vec<&SweepRow>)> = Vec::new();
    for r in rows {
        match groups.last_mut() {
            Some((v, g)) if *v == r.value => g.push(r),
            _ => groups.push((r.value, vec![r])),
        }
    }
    groups
}

/// Cell of grid point `j` on a `d`-point grid: the part of `[0, 1]` nearest to it.
fn grid_cell(j: usize, d: usize) -> (f64, f64) {
    if d == 1 {
        return (0.0, 1.0);
    }
    let h = 1.0 / (d - 1) as f64;
    let c = j as f64 * h;
    ((c - h / 2.0).max(0.0), (c + h / 2.0).min(1.0))
}

/// Moves fine-grid mass onto a `coarse`-point grid, splitting each fine cell
/// across the coarse cells it overlaps in proportion to the overlap length.
pub fn aggregate_to_grid(fine: &[f64], coarse: usize) -> Vec<f64> {
    let mut out = vec![0.0; coarse];
    for (f, &m) in fine.iter().enumerate() {
        let (a, b) = grid_cell(f, fine.len());
        let width = b - a;
        if width <= 0.0 {
            continue;
        }
        for (c, slot) in out.iter_mut().enumerate() {
            let (lo, hi) = grid_cell(c, coarse);
            let overlap = hi.min(b) - lo.max(a);
            if overlap > 0.0 {
                *slot += m * overlap / width;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportRow {
    pub d: usize,
    /// Mean over seeds of `max_i ‖b̃_i - R_d(b*_fine)‖₁`.
    pub error_mean: f64,
    pub error_ci: f64,
    /// Mean over seeds of the error against the oracle at the same `d`.
    pub same_d_error_mean: f64,
    pub same_d_error_max: f64,
    pub bias_bound: f64,
    pub converged_runs: usize,
    pub failed_runs: usize,
}

/// Accuracy against the centralized barycenter at the largest `d`,
/// aggregated onto each coarser grid.
pub fn run_support_sweep(
    base: &RunConfig,
    sizes: &[usize],
    jobs: usize,
) -> Result<Vec<SupportRow>, ExperimentError> {
    let d_ref = *sizes.iter().max().ok_or_else(|| {
        ExperimentError::Config(ConfigError::new("sweep.values", "must be nonempty"))
    })?;
    let n = base.num_agents();
    let references = run_jobs(&base.seeds, jobs, |&seed| {
        let problem = ProblemConfig {
            d: d_ref,
            ..base.problem.clone()
        };
        build_instance(&problem, n, seed).and_then(|inst| oracle(&inst))
    });
    let references = references.into_iter().collect::<Result<Vec<_>, _>>()?;

    let cells: Vec<(usize, usize)> = sizes
        .iter()
        .flat_map(|&d| (0..base.seeds.len()).map(move |k| (d, k)))
        .collect();
    struct Cell {
        d: usize,
        result: Result<(f64, RunMetrics), ExperimentError>,
    }
    let results = run_jobs(&cells, jobs, |&(d, k)| {
        let result = apply_sweep_value(base, SweepVariable::D, d as f64)
            .map_err(ExperimentError::from)
            .and_then(|c| {
                let setup = RunSetup::from_config(&c, base.seeds[k])?;
                let outcome = run_decentralized(&setup, &c.comms, &RunOptions::default())?;
                let target = aggregate_to_grid(references[k].barycenter.weights(), d);
                let err = outcome
                    .barycenters
                    .iter()
                    .map(|b| l1_distance(b.weights(), &target))
                    .fold(0.0, f64::max);
                Ok((err, outcome.metrics))
            });
        Cell { d, result }
    });

    let mut table = Vec::new();
    for &d in sizes {
        let group: Vec<&Cell> = results.iter().filter(|c| c.d == d).collect();
        let ok: Vec<&(f64, RunMetrics)> = group.iter().filter_map(|c| c.result.as_ref().ok()).collect();
        let errs: Vec<f64> = ok.iter().map(|(e, _)| *e).collect();
        let same: Vec<f64> = ok.iter().map(|(_, m)| m.l1_error_max).collect();
        let s = summarize(&errs);
        table.push(SupportRow {
            d,
            error_mean: s.mean,
            error_ci: s.half_width(),
            same_d_error_mean: stats::mean(&same),
            same_d_error_max: same.iter().cloned().fold(0.0, f64::max),
            bias_bound: ok
                .iter()
                .map(|(_, m)| m.bias_bound)
                .fold(f64::NEG_INFINITY, f64::max),
            converged_runs: ok.iter().filter(|(_, m)| m.converged).count(),
            failed_runs: group.len() - ok.len(),
        });
    }
    Ok(table)
}

/// Outcome of one theory check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// The check had nothing admissible to judge (e.g. clipping was active).
    pub excluded: bool,
    pub summary: String,
    /// Inputs of the first violation, for replay.
    pub witness: Option<serde_json::Value>,
}

impl CheckResult {
    fn new(name: &str, passed: bool, summary: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            excluded: false,
            summary,
            witness: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub warnings: Vec<String>,
    pub theory: TheoryConstants,
    pub sigma2: f64,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || c.excluded)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed && !c.excluded)
            .map(|c| c.name.as_str())
            .collect()
    }
}

/// Random point of the open simplex, Dirichlet(1, …, 1).
pub fn random_simplex_point(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..d).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-300).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionSample {
    pub b: Vec<f64>,
    pub b_prime: Vec<f64>,
    pub ratio: f64,
}

/// Worst ratio `d_H(F b, F b') / d_H(b, b')` over `pairs` random pairs.
pub fn hilbert_contraction_check(
    instance: &ProblemInstance,
    pairs: usize,
    seed: u64,
) -> Result<ContractionSample, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = instance.support_size();
    let mut worst = ContractionSample {
        b: vec![],
        b_prime: vec![],
        ratio: 0.0,
    };
    for _ in 0..pairs {
        let b = random_simplex_point(&mut rng, d);
        let bp = random_simplex_point(&mut rng, d);
        let before = hilbert_distance(&b, &bp)?;
        if before == 0.0 {
            continue;
        }
        let fb = barycenter_map(instance, &b)?;
        let fbp = barycenter_map(instance, &bp)?;
        let ratio = hilbert_distance(fb.weights(), fbp.weights())? / before;
        if ratio > worst.ratio {
            worst = ContractionSample {
                b,
                b_prime: bp,
                ratio,
            };
        }
    }
    Ok(worst)
}

/// Residual trace of plain synchronous gossip from random states.
pub fn consensus_decay_trace(topology: &Topology, d: usize, steps: usize, seed: u64) -> (f64, Vec<f64>) {
    let weights = metropolis_weights(topology);
    let sigma2 = weights.sigma2();
    let n = topology.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let w = weights.matrix();
    let mut trace = vec![consensus_residual(&z)];
    for _ in 0..steps {
        z = (0..n)
            .map(|i| {
                (0..d)
                    .map(|j| (0..n).map(|k| w[(i, k)] * z[k][j]).sum())
                    .collect()
            })
            .collect();
        trace.push(consensus_residual(&z));
    }
    (sigma2, trace)
}

/// Contraction, bridge, consensus, tracking and trigger-budget checks on
/// the config's instance (first seed) and topology.
pub fn verify_theory(config: &RunConfig) -> Result<VerifyReport, ExperimentError> {
    let seed = config.seeds[0];
    let setup = RunSetup::from_config(config, seed)?;
    let instance = &setup.instance;
    let theory = theory_constants(instance, &config.comms);
    let pairs = config.verify.pairs;
    let mut checks = Vec::new();
    let mut warnings = Vec::new();

    if theory.rho_bound > 0.99 {
        warnings.push(format!(
            "rho_bound = {:.6} is close to 1: the centralized map contracts slowly at epsilon = {}",
            theory.rho_bound,
            instance.epsilon()
        ));
    }
    if theory.bias_overflow || theory.steady_state_bias_bound > 1e6 {
        warnings.push(format!(
            "steady-state bias bound {:.3e} is vacuous for this clip range; tighten [s_min, s_max] for a sharper bound",
            theory.steady_state_bias_bound
        ));
    }

    // (a) contraction
    let worst = hilbert_contraction_check(instance, pairs, seed)?;
    let mut a = CheckResult::new(
        "hilbert_contraction",
        worst.ratio <= theory.rho_bound + 1e-9,
        format!(
            "max ratio {:.6} over {pairs} pairs, bound {:.6}",
            worst.ratio, theory.rho_bound
        ),
    );
    if !a.passed {
        a.witness = serde_json::to_value(&worst).ok();
    }
    checks.push(a);

    // (b) bridge on positive vectors inside the clip range
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb41d6e);
    let d = instance.support_size();
    let mut bridge = CheckResult::new("l1_bridge", true, String::new());
    let mut worst_slack = f64::INFINITY;
    for _ in 0..pairs {
        let x: Vec<f64> = (0..d)
            .map(|_| rng.random_range(config.comms.s_min..config.comms.s_max).exp())
            .collect();
        let y: Vec<f64> = (0..d)
            .map(|_| rng.random_range(config.comms.s_min..config.comms.s_max).exp())
            .collect();
        let lhs = l1_distance(
            Histogram::normalized(x.clone())?.weights(),
            Histogram::normalized(y.clone())?.weights(),
        );
        let gamma = hilbert_distance(&x, &y)?;
        let l1_form = theory.l_norm_bound * l1_distance(&x, &y);
        let hilbert_form = theory.l_norm_bound * gamma.exp_m1();
        let rhs = l1_form.min(hilbert_form);
        worst_slack = worst_slack.min(rhs - lhs);
        if lhs > rhs * (1.0 + 1e-12) && bridge.passed {
            bridge.passed = false;
            bridge.witness = Some(serde_json::json!({ "x": x, "y": y, "lhs": lhs, "rhs": rhs }));
        }
    }
    bridge.summary = format!("{pairs} pairs, smallest slack {worst_slack:.3e}");
    checks.push(bridge);

    // (c) consensus decay
    let (sigma2, trace) = consensus_decay_trace(&setup.topology, d, 100, seed);
    let violation = trace
        .iter()
        .enumerate()
        .find(|(s, r)| **r > sigma2.powi(*s as i32) * trace[0] + 1e-9);
    let mut c = CheckResult::new(
        "consensus_decay",
        violation.is_none(),
        format!("sigma2 = {sigma2:.6}, residual {:.3e} -> {:.3e} in 100 steps", trace[0], trace[100]),
    );
    if let Some((s, r)) = violation {
        c.witness = Some(serde_json::json!({ "step": s, "residual": r, "sigma2": sigma2, "seed": seed }));
    }
    checks.push(c);

    // (d) tracking and (e) trigger budget over the (delta, bits) grid
    let mut admissible = Vec::new();
    let mut excluded = 0;
    let mut tracking_violation = None;
    let mut budget_violation = None;
    for &delta in &config.verify.deltas {
        for &bits in &config.verify.bits {
            let comms = CommsConfig {
                delta,
                bits: Bits::Quantized(bits),
                ..config.comms.clone()
            };
            let m = run_decentralized(&setup, &comms, &RunOptions::default())?.metrics;
            if delta > 0.0 && !m.trigger_budget_holds(delta) && budget_violation.is_none() {
                budget_violation = Some(serde_json::json!({
                    "delta": delta, "bits": bits, "seed": seed,
                    "messages_per_agent": m.messages_per_agent,
                    "variation_per_agent": m.variation_per_agent,
                }));
            }
            if m.clip_active {
                excluded += 1;
                log::info!("tracking run delta={delta} bits={bits} excluded: clipping active");
                continue;
            }
            if !m.converged {
                continue;
            }
            if m.l1_error_max > m.bias_bound && tracking_violation.is_none() {
                tracking_violation = Some(serde_json::json!({
                    "delta": delta, "bits": bits, "seed": seed,
                    "l1_error_max": m.l1_error_max, "bias_bound": m.bias_bound,
                }));
            }
            admissible.push((m.theory.perturbation, m.l1_error_max));
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = admissible.iter().cloned().unzip();
    let fit = stats::linear_fit(&xs, &ys);
    let mut track = if admissible.is_empty() {
        CheckResult {
            excluded: true,
            ..CheckResult::new(
                "tracking",
                false,
                format!("no converged clip-free run ({excluded} excluded for active clipping)"),
            )
        }
    } else {
        let slope_ok = fit.map_or(true, |f| f.slope >= 0.0);
        CheckResult::new(
            "tracking",
            tracking_violation.is_none() && slope_ok,
            format!(
                "{} admissible runs, {excluded} excluded for clipping, slope {}",
                admissible.len(),
                fit.map_or("n/a".to_string(), |f| format!("{:.4}", f.slope))
            ),
        )
    };
    if tracking_violation.is_some() {
        track.witness = tracking_violation;
    } else if !track.passed && !track.excluded {
        track.witness = Some(serde_json::json!({ "points": admissible }));
    }
    checks.push(track);
    let mut budget = CheckResult::new(
        "trigger_budget",
        budget_violation.is_none(),
        "messages_i <= 1 + ceil(V_i / delta) for every agent and run".to_string(),
    );
    budget.witness = budget_violation;
    checks.push(budget);

    Ok(VerifyReport {
        checks,
        warnings,
        theory,
        sigma2,
    })
}
