//! Run configuration shared by the library entry points and the CLI.
//!
//! Every section has defaults, so an empty file is a valid config for the
//! 4x4 grid / d = 64 desk setup. Validation reports the dotted path of the
//! first offending field.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{ActivationModel, ChannelModel, NetError, TopologyKind};
use crate::protocol::{CommsConfig, ProtocolError};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{path}: {reason}")]
pub struct ConfigError {
    pub path: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `|x_j - x_k|²` on an even grid of `[0, 1]`.
    #[default]
    SquaredEuclidean,
    /// `|x_j - x_k|` on the same grid.
    Absolute,
}

/// Ranges for the seeded two-component Gaussian mixtures on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub mean_low: f64,
    pub mean_high: f64,
    pub width_low: f64,
    pub width_high: f64,
    /// Lower bound for the first component's weight; the second gets the rest.
    pub weight_low: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            mean_low: 0.15,
            mean_high: 0.85,
            width_low: 0.04,
            width_high: 0.10,
            weight_low: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub d: usize,
    pub epsilon: f64,
    pub ridge: f64,
    pub cost_kind: CostKind,
    pub density_seed: u64,
    pub densities: DensityConfig,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            d: 64,
            epsilon: 0.1,
            ridge: 1e-16,
            cost_kind: CostKind::SquaredEuclidean,
            density_seed: 2024,
            densities: DensityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    #[serde(rename = "N")]
    N,
    D,
    Delta,
    Bits,
    TauInner,
    Epsilon,
    DropProb,
}

/// A one-dimensional sweep over the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

/// Knobs for the theory verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random pairs for the contraction and bridge checks.
    pub pairs: usize,
    pub deltas: Vec<f64>,
    pub bits: Vec<u8>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            deltas: vec![1e-4, 1e-3, 1e-2],
            bits: vec![8, 12, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub network: TopologyKind,
    pub comms: CommsConfig,
    pub channel: ChannelModel,
    pub activation: ActivationModel,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub sweep: Option<SweepConfig>,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            network: TopologyKind::Grid2d { rows: 4, cols: 4 },
            comms: CommsConfig::default(),
            channel: ChannelModel::default(),
            activation: ActivationModel::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("out"),
            sweep: None,
            verify: VerifyConfig::default(),
        }
    }
}

fn positive(path: &str, x: f64) -> Result<(), ConfigError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(path, format!("must be positive and finite, got {x}")))
    }
}

impl RunConfig {
    pub fn num_agents(&self) -> usize {
        self.network.num_nodes()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.problem;
        if p.d < 2 {
            return Err(ConfigError::new("problem.d", format!("need at least 2 support points, got {}", p.d)));
        }
        positive("problem.epsilon", p.epsilon)?;
        if !(p.ridge >= 0.0 && p.ridge.is_finite()) {
            return Err(ConfigError::new("problem.ridge", "must be nonnegative and finite"));
        }
        let dens = &p.densities;
        if !(0.0..=1.0).contains(&dens.mean_low) || !(dens.mean_low..=1.0).contains(&dens.mean_high) {
            return Err(ConfigError::new(
                "problem.densities.mean_low",
                "need 0 <= mean_low <= mean_high <= 1",
            ));
        }
        positive("problem.densities.width_low", dens.width_low)?;
        if dens.width_high < dens.width_low {
            return Err(ConfigError::new("problem.densities.width_high", "must be >= width_low"));
        }
        if !(0.0..=0.5).contains(&dens.weight_low) {
            return Err(ConfigError::new("problem.densities.weight_low", "must lie in [0, 0.5]"));
        }

        self.validate_network()?;
        self.comms.validate().map_err(|e| match e {
            ProtocolError::InvalidConfig { field, reason } => {
                ConfigError::new(format!("comms.{field}"), reason)
            }
            other => ConfigError::new("comms", other.to_string()),
        })?;
        self.channel
            .validate()
            .map_err(|e| net_error("channel", e))?;
        self.activation
            .validate()
            .map_err(|e| net_error("activation", e))?;
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "need at least one seed"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(ConfigError::new("sweep.values", "must be nonempty"));
            }
            if sweep.values.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(ConfigError::new("sweep.values", "must be strictly increasing"));
            }
        }
        if self.verify.pairs == 0 {
            return Err(ConfigError::new("verify.pairs", "must be positive"));
        }
        Ok(())
    }

    fn validate_network(&self) -> Result<(), ConfigError> {
        match self.network {
            TopologyKind::Grid2d { rows, cols } if rows == 0 || cols == 0 => {
                Err(ConfigError::new("network.rows", "grid needs rows, cols >= 1"))
            }
            TopologyKind::RandomGeometric { radius, .. } if !(radius > 0.0) => {
                Err(ConfigError::new("network.radius", "must be positive"))
            }
            _ if self.network.num_nodes() == 0 => {
                Err(ConfigError::new("network.n", "need at least one node"))
            }
            _ => Ok(()),
        }
    }
}

fn net_error(section: &str, e: NetError) -> ConfigError {
    match e {
        NetError::InvalidParameter { field, reason } => {
            ConfigError::new(format!("{section}.{field}"), reason)
        }
        other => ConfigError::new(section, other.to_string()),
    }
}
