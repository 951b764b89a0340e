//! `gossip-sinkhorn`: run decentralized barycenter experiments from a config.
//!
//! Exit codes: 0 success, 1 config error, 2 iteration cap reached,
//! 3 some sweep runs failed, 4 a verification check failed.

mod commands;
mod load;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{RunFlags, EXIT_CONFIG};
use output::OutputDir;

#[derive(Parser)]
#[command(name = "gossip-sinkhorn", version, about = "Decentralized entropic Wasserstein barycenters over simulated networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML (or JSON) config; every field has a default.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Set a field, e.g. `--override comms.delta=0 comms.bits=unquantized`.
    #[arg(long = "override", value_name = "K=V", num_args = 1..)]
    overrides: Vec<String>,
    /// Output directory; replaces `output_dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Subcommand)]
enum Command {
    /// Centralized IBP reference barycenter.
    Centralized(Common),
    /// Decentralized run for every seed.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write every broadcast to packets.csv.
        #[arg(long)]
        dump_packets: bool,
        /// Add an always-gossip run per seed to trace.csv.
        #[arg(long)]
        baseline: bool,
    },
    /// One-dimensional sweep described by the config's `[sweep]` section.
    Sweep(Common),
    /// Theory checks: contraction, bridge, consensus decay, tracking, trigger budget.
    Verify(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Centralized(c) | Command::Sweep(c) | Command::Verify(c) => c,
        Command::Run { common, .. } => common,
    };
    let mut cfg = match load::load(common.config.as_deref(), &common.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let out = match OutputDir::create(&cfg.output_dir) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: cannot create output directory {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Err(e) = out.json("config_resolved.json", &cfg) {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let jobs = common.jobs.max(1);
    let result = match &cli.command {
        Command::Centralized(_) => commands::centralized(&cfg, &out),
        Command::Run {
            dump_packets,
            baseline,
            ..
        } => commands::run(
            &cfg,
            &RunFlags {
                dump_packets: *dump_packets,
                baseline: *baseline,
            },
            &out,
        ),
        Command::Sweep(_) => commands::sweep(&cfg, jobs, &out),
        Command::Verify(_) => commands::verify(&cfg, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            // runtime failures (numerical overflow, unwritable outputs) share
            // the input-error code: both mean the inputs need changing
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
