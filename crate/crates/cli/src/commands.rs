use gossip_sinkhorn::config::{RunConfig, SweepVariable};
use gossip_sinkhorn::experiments::{
    build_instance, grid_points, run_decentralized, run_support_sweep, run_sweep, scaling_table,
    trace_rows, verify_theory, ExperimentError, RunMetrics, RunOptions, RunSetup, ORACLE_TOLERANCE,
};
use gossip_sinkhorn::ot::centralized_barycenter;
use gossip_sinkhorn::protocol::CommsConfig;
use serde::Serialize;

use crate::output::{IoError, OutputDir};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_CAP: u8 = 2;
pub const EXIT_SWEEP_FAILED: u8 = 3;
pub const EXIT_VERIFY_FAILED: u8 = 4;

#[derive(Debug)]
pub enum CommandError {
    Io(IoError),
    Experiment(ExperimentError),
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommandError::Io(e) => write!(f, "cannot write output {e}"),
            CommandError::Experiment(e) => e.fmt(f),
        }
    }
}

impl From<IoError> for CommandError {
    fn from(e: IoError) -> Self {
        CommandError::Io(e)
    }
}

impl From<ExperimentError> for CommandError {
    fn from(e: ExperimentError) -> Self {
        CommandError::Experiment(e)
    }
}

type Outcome = Result<u8, CommandError>;

#[derive(Serialize)]
struct MassRow {
    x: f64,
    mass: f64,
}

#[derive(Serialize)]
struct ChangeRow {
    iteration: usize,
    log_v_change_linf: f64,
}

/// Oracle barycenter for the first seed's instance. The cap comes from
/// `comms.outer_iter_cap` so a short cap can be forced from the command line.
pub fn centralized(cfg: &RunConfig, out: &OutputDir) -> Outcome {
    let seed = cfg.seeds[0];
    let instance = build_instance(&cfg.problem, cfg.num_agents(), seed)?;
    let sol = centralized_barycenter(&instance, ORACLE_TOLERANCE, cfg.comms.outer_iter_cap)
        .map_err(ExperimentError::from)?;
    let rows: Vec<MassRow> = grid_points(cfg.problem.d)
        .into_iter()
        .zip(sol.barycenter.weights())
        .map(|(x, &mass)| MassRow { x, mass })
        .collect();
    out.csv("barycenter.csv", &rows)?;
    let trace: Vec<ChangeRow> = sol
        .changes
        .iter()
        .enumerate()
        .map(|(k, &c)| ChangeRow {
            iteration: k + 1,
            log_v_change_linf: c,
        })
        .collect();
    out.csv("centralized_trace.csv", &trace)?;
    println!(
        "centralized: seed={seed} iterations={} converged={} final_change={:.3e}",
        sol.iterations,
        sol.converged,
        sol.changes.last().copied().unwrap_or(0.0)
    );
    Ok(if sol.converged { EXIT_OK } else { EXIT_CAP })
}

#[derive(Serialize)]
struct SeedTraceRow {
    seed: u64,
    variant: String,
    round: usize,
    outer_iter: usize,
    inner_step: usize,
    residual: f64,
}

#[derive(Serialize)]
struct SeedOverlapRow {
    seed: u64,
    support_x: f64,
    b_star: f64,
    b_tilde_min: f64,
    b_tilde_max: f64,
}

#[derive(Serialize)]
struct NodeMassRow {
    seed: u64,
    node: usize,
    x: f64,
    mass: f64,
}

#[derive(Serialize)]
struct PacketRow {
    seed: u64,
    round: u64,
    sender: usize,
    outer_iter: u32,
    inner_step: u32,
    /// Space-separated payload entries.
    payload: String,
}

pub struct RunFlags {
    pub dump_packets: bool,
    /// Also run always-gossip (`δ = 0`) on each seed for the trace table.
    pub baseline: bool,
}

fn seed_trace(seed: u64, variant: &str, m: &RunMetrics) -> impl Iterator<Item = SeedTraceRow> {
    trace_rows(variant, m).into_iter().map(move |r| SeedTraceRow {
        seed,
        variant: r.variant,
        round: r.round,
        outer_iter: r.outer_iter,
        inner_step: r.inner_step,
        residual: r.residual,
    })
}

pub fn run(cfg: &RunConfig, flags: &RunFlags, out: &OutputDir) -> Outcome {
    let x = grid_points(cfg.problem.d);
    let options = RunOptions {
        record_packets: flags.dump_packets,
        ..RunOptions::default()
    };
    let mut metrics = Vec::new();
    let mut trace = Vec::new();
    let mut overlap = Vec::new();
    let mut nodes = Vec::new();
    let mut packets = Vec::new();
    for &seed in &cfg.seeds {
        let setup = RunSetup::from_config(cfg, seed)?;
        let outcome = run_decentralized(&setup, &cfg.comms, &options)?;
        let m = outcome.metrics;
        println!(
            "seed {seed}: error_max={:.3e} messages_total={} bias_bound={:.3e} converged={} outer_iterations={}",
            m.l1_error_max, m.messages_total, m.bias_bound, m.converged, m.outer_iterations
        );
        let variant = if cfg.comms.delta > 0.0 { "triggered" } else { "always" };
        trace.extend(seed_trace(seed, variant, &m));
        if flags.baseline && cfg.comms.delta > 0.0 {
            let always = CommsConfig {
                delta: 0.0,
                ..cfg.comms.clone()
            };
            let b = run_decentralized(&setup, &always, &RunOptions::default())?.metrics;
            trace.extend(seed_trace(seed, "always", &b));
        }
        let b_star = setup.oracle.barycenter.weights();
        for (j, &xj) in x.iter().enumerate() {
            let masses = outcome.barycenters.iter().map(|b| b.weights()[j]);
            overlap.push(SeedOverlapRow {
                seed,
                support_x: xj,
                b_star: b_star[j],
                b_tilde_min: masses.clone().fold(f64::INFINITY, f64::min),
                b_tilde_max: masses.fold(f64::NEG_INFINITY, f64::max),
            });
        }
        for (node, b) in outcome.barycenters.iter().enumerate() {
            for (&xj, &mass) in x.iter().zip(b.weights()) {
                nodes.push(NodeMassRow { seed, node, x: xj, mass });
            }
        }
        packets.extend(outcome.packets.into_iter().map(|p| PacketRow {
            seed,
            round: p.round,
            sender: p.packet.sender,
            outer_iter: p.packet.outer_iter,
            inner_step: p.packet.inner_step,
            payload: p
                .packet
                .payload
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        }));
        metrics.push(m);
    }
    out.json("metrics.json", &metrics)?;
    out.csv("trace.csv", &trace)?;
    out.csv("overlap.csv", &overlap)?;
    out.csv("barycenters.csv", &nodes)?;
    if flags.dump_packets {
        out.csv("packets.csv", &packets)?;
    }
    Ok(if metrics.iter().all(|m| m.converged) {
        EXIT_OK
    } else {
        EXIT_CAP
    })
}

pub fn sweep(cfg: &RunConfig, jobs: usize, out: &OutputDir) -> Outcome {
    let Some(spec) = &cfg.sweep else {
        eprintln!("error: sweep: missing [sweep] section with variable and values");
        return Ok(EXIT_CONFIG);
    };
    let mut failed = 0;
    if spec.variable == SweepVariable::D {
        let mut sizes = Vec::new();
        for &v in &spec.values {
            if !(v >= 2.0 && v.fract() == 0.0) {
                eprintln!("error: sweep.values: support sizes must be integers >= 2, got {v}");
                return Ok(EXIT_CONFIG);
            }
            sizes.push(v as usize);
        }
        let rows = run_support_sweep(cfg, &sizes, jobs)?;
        for r in &rows {
            println!(
                "d={}: error_mean={:.3e} (+/- {:.1e}) converged {}/{}",
                r.d,
                r.error_mean,
                r.error_ci,
                r.converged_runs,
                cfg.seeds.len()
            );
        }
        failed += rows.iter().map(|r| r.failed_runs).sum::<usize>();
        out.csv("support.csv", &rows)?;
    } else {
        let rows = run_sweep(cfg, spec, jobs);
        for r in rows.iter().filter(|r| r.error.is_some()) {
            eprintln!(
                "run value={} seed={} failed: {}",
                r.value,
                r.seed,
                r.error.as_deref().unwrap_or_default()
            );
        }
        failed += rows.iter().filter(|r| r.error.is_some()).count();
        out.csv("sweep.csv", &rows)?;
        if spec.variable == SweepVariable::N {
            let table = scaling_table(cfg, &rows);
            for r in &table {
                println!(
                    "N={}: messages_mean={:.1} (+/- {:.1}) runtime_mean={:.4}s",
                    r.n, r.messages_mean, r.messages_ci, r.runtime_mean
                );
            }
            out.csv("scaling.csv", &table)?;
        } else {
            println!("{} runs written to sweep.csv", rows.len());
        }
    }
    Ok(if failed > 0 {
        eprintln!("{failed} sweep runs failed");
        EXIT_SWEEP_FAILED
    } else {
        EXIT_OK
    })
}

pub fn verify(cfg: &RunConfig, out: &OutputDir) -> Outcome {
    let report = verify_theory(cfg)?;
    out.json("verify.json", &report)?;
    for c in &report.checks {
        let status = if c.excluded {
            "EXCLUDED"
        } else if c.passed {
            "PASS"
        } else {
            "FAIL"
        };
        println!("{status:<8} {}: {}", c.name, c.summary);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if report.all_passed() {
        Ok(EXIT_OK)
    } else {
        eprintln!("failed checks: {}", report.failed().join(", "));
        Ok(EXIT_VERIFY_FAILED)
    }
}
