//! Numerical primitives for entropic barycenters.
//!
//! Everything here is a pure function of its inputs. The centralized
//! iteration in [`centralized_barycenter`] is the reference oracle that the
//! decentralized runs are judged against.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::CommsConfig;

/// Histograms must sum to one within this absolute tolerance.
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("histogram entry {index} is {value}; entries must be finite and nonnegative")]
    NegativeMass { index: usize, value: f64 },
    #[error("histogram sums to {sum}, expected 1 within {SIMPLEX_TOLERANCE:e}")]
    NotNormalized { sum: f64 },
    #[error("histogram has zero total mass")]
    ZeroMass,
    #[error("cost matrix must be square, got {rows}x{cols}")]
    NonSquareCost { rows: usize, cols: usize },
    #[error("cost entry ({row}, {col}) is {value}; entries must be finite and nonnegative")]
    InvalidCost { row: usize, col: usize, value: f64 },
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("ridge must be positive and finite, got {0}")]
    InvalidRidge(f64),
    #[error(
        "Gibbs kernel underflows to zero at ({row}, {col}): epsilon={epsilon} is too small \
         for a cost of {cost}"
    )]
    KernelUnderflow { row: usize, col: usize, epsilon: f64, cost: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("need at least one histogram")]
    NoHistograms,
    #[error("K^T u has a zero entry at {index}; every contributing scaling is zero")]
    DegenerateScaling { index: usize },
    #[error("vector entry {index} is {value}; expected strictly positive")]
    NonPositive { index: usize, value: f64 },
}

/// A probability vector on the common support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Histogram {
    weights: Vec<f64>,
}

impl Histogram {
    pub fn new(weights: Vec<f64>) -> Result<Self, OtError> {
        check_nonnegative(&weights)?;
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(OtError::NotNormalized { sum });
        }
        Ok(Self { weights })
    }

    /// Scales nonnegative masses so they sum to one.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self, OtError> {
        check_nonnegative(&weights)?;
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(OtError::ZeroMass);
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(Self { weights })
    }

    pub fn uniform(d: usize) -> Self {
        Self {
            weights: vec![1.0 / d as f64; d],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.weights
    }

    pub fn l1_distance(&self, other: &Histogram) -> f64 {
        l1_distance(&self.weights, &other.weights)
    }
}

impl TryFrom<Vec<f64>> for Histogram {
    type Error = OtError;

    fn try_from(weights: Vec<f64>) -> Result<Self, Self::Error> {
        Histogram::new(weights)
    }
}

impl From<Histogram> for Vec<f64> {
    fn from(h: Histogram) -> Self {
        h.weights
    }
}

fn check_nonnegative(weights: &[f64]) -> Result<(), OtError> {
    match weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
    {
        Some((index, &value)) => Err(OtError::NegativeMass { index, value }),
        None => Ok(()),
    }
}

/// Ground cost between support points.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: DMatrix<f64>,
}

impl CostMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self, OtError> {
        if entries.nrows() != entries.ncols() {
            return Err(OtError::NonSquareCost {
                rows: entries.nrows(),
                cols: entries.ncols(),
            });
        }
        for col in 0..entries.ncols() {
            for row in 0..entries.nrows() {
                let value = entries[(row, col)];
                if !(value.is_finite() && value >= 0.0) {
                    return Err(OtError::InvalidCost { row, col, value });
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, OtError> {
        let d = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(OtError::NonSquareCost {
                rows: d,
                cols: bad.len(),
            });
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    /// Squared distance on `d` evenly spaced points of `[0, 1]`, so the
    /// largest entry is 1.
    pub fn squared_grid(d: usize) -> Self {
        let scale = if d > 1 { ((d - 1) * (d - 1)) as f64 } else { 1.0 };
        let entries = DMatrix::from_fn(d, d, |j, k| {
            let diff = j as f64 - k as f64;
            diff * diff / scale
        });
        Self { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// `‖C‖∞` as the largest entry.
    pub fn max_entry(&self) -> f64 {
        self.entries.iter().cloned().fold(0.0, f64::max)
    }

    /// Relabels the support: entry `(j, k)` of the result is entry
    /// `(perm[j], perm[k])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim();
        Self {
            entries: DMatrix::from_fn(d, d, |j, k| self.entries[(perm[j], perm[k])]),
        }
    }
}

/// `K = exp(-C/ε)` together with its logarithm.
#[derive(Debug, Clone)]
pub struct GibbsKernel {
    entries: DMatrix<f64>,
    log_entries: DMatrix<f64>,
    epsilon: f64,
}

impl GibbsKernel {
    pub fn new(cost: &CostMatrix, epsilon: f64) -> Result<Self, OtError> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(OtError::InvalidEpsilon(epsilon));
        }
        let log_entries = cost.entries().map(|c| -c / epsilon);
        let entries = log_entries.map(f64::exp);
        let d = cost.dim();
        for col in 0..d {
            for row in 0..d {
                if entries[(row, col)] <= 0.0 {
                    return Err(OtError::KernelUnderflow {
                        row,
                        col,
                        epsilon,
                        cost: cost.entries()[(row, col)],
                    });
                }
            }
        }
        Ok(Self {
            entries,
            log_entries,
            epsilon,
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn log_entries(&self) -> &DMatrix<f64> {
        &self.log_entries
    }

    /// `K v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        // column-major: accumulate column by column
        for (k, &vk) in v.iter().enumerate() {
            if vk == 0.0 {
                continue;
            }
            let col = self.entries.column(k);
            for (o, &kjk) in out.iter_mut().zip(col.iter()) {
                *o += kjk * vk;
            }
        }
        out
    }
}

/// Problem data every agent agrees on offline.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    cost: CostMatrix,
    kernel: GibbsKernel,
    ridge: f64,
    histograms: Vec<Histogram>,
}

impl ProblemInstance {
    pub fn new(
        cost: CostMatrix,
        epsilon: f64,
        ridge: f64,
        histograms: Vec<Histogram>,
    ) -> Result<Self, OtError> {
        if !(ridge.is_finite() && ridge > 0.0) {
            return Err(OtError::InvalidRidge(ridge));
        }
        if histograms.is_empty() {
            return Err(OtError::NoHistograms);
        }
        let d = cost.dim();
        if let Some(h) = histograms.iter().find(|h| h.len() != d) {
            return Err(OtError::DimensionMismatch {
                expected: d,
                actual: h.len(),
            });
        }
        let kernel = GibbsKernel::new(&cost, epsilon)?;
        Ok(Self {
            cost,
            kernel,
            ridge,
            histograms,
        })
    }

    pub fn support_size(&self) -> usize {
        self.cost.dim()
    }

    pub fn num_agents(&self) -> usize {
        self.histograms.len()
    }

    pub fn cost(&self) -> &CostMatrix {
        &self.cost
    }

    pub fn kernel(&self) -> &GibbsKernel {
        &self.kernel
    }

    pub fn epsilon(&self) -> f64 {
        self.kernel.epsilon
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn histograms(&self) -> &[Histogram] {
        &self.histograms
    }
}

/// Numerically stable `log Σ exp(x)`; `-inf` terms are skipped.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values
        .filter(|x| *x > f64::NEG_INFINITY)
        .map(|x| (x - max).exp())
        .sum();
    max + sum.ln()
}

/// `s = log(Kᵀ u)`, reduced with log-sum-exp over `log K + log u`.
pub fn log_message(u: &[f64], kernel: &GibbsKernel) -> Result<Vec<f64>, OtError> {
    let d = kernel.dim();
    if u.len() != d {
        return Err(OtError::DimensionMismatch {
            expected: d,
            actual: u.len(),
        });
    }
    let log_u: Vec<f64> = u
        .iter()
        .map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY })
        .collect();
    let log_k = kernel.log_entries();
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let col = log_k.column(j);
        let terms = col.iter().zip(log_u.iter()).map(|(&lk, &lu)| lk + lu);
        let s = log_sum_exp(terms);
        if !s.is_finite() {
            return Err(OtError::DegenerateScaling { index: j });
        }
        out.push(s);
    }
    Ok(out)
}

/// `exp(z) / ⟨1, exp(z)⟩` with max subtraction.
pub fn softmax_normalize(log_v: &[f64]) -> Histogram {
    let max = log_v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Histogram {
        weights: exps.into_iter().map(|e| e / sum).collect(),
    }
}

/// Hilbert projective distance `log max(x/y) - log min(x/y)`.
pub fn hilbert_distance(x: &[f64], y: &[f64]) -> Result<f64, OtError> {
    if x.len() != y.len() {
        return Err(OtError::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (index, (&a, &b)) in x.iter().zip(y).enumerate() {
        if !(a > 0.0) {
            return Err(OtError::NonPositive { index, value: a });
        }
        if !(b > 0.0) {
            return Err(OtError::NonPositive { index, value: b });
        }
        let r = a.ln() - b.ln();
        hi = hi.max(r);
        lo = lo.min(r);
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(hi - lo)
}

/// `osc(log K) = max_{j,j'} max_ℓ (log K_ℓj - log K_ℓj')`.
///
/// For a fixed row ℓ the inner maximum over column pairs is the row's range,
/// so the exact value is the largest row range.
pub fn osc_log_kernel(kernel: &GibbsKernel) -> f64 {
    kernel
        .log_entries()
        .row_iter()
        .map(|row| {
            let (lo, hi) = row
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                });
            hi - lo
        })
        .fold(0.0, f64::max)
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Scalings produced by one centralized IBP step.
#[derive(Debug, Clone)]
pub struct IbpStep {
    pub u: Vec<Vec<f64>>,
    pub log_v_next: Vec<f64>,
    pub v_next: Vec<f64>,
}

/// `u_i = μ_i ⊘ (K v + η)` for every agent, then `log v' = mean_i log(Kᵀ u_i)`.
pub fn centralized_ibp_step(
    histograms: &[Histogram],
    kernel: &GibbsKernel,
    ridge: f64,
    v: &[f64],
) -> Result<IbpStep, OtError> {
    if histograms.is_empty() {
        return Err(OtError::NoHistograms);
    }
    let d = kernel.dim();
    if v.len() != d {
        return Err(OtError::DimensionMismatch {
            expected: d,
            actual: v.len(),
        });
    }
    let kv = kernel.apply(v);
    let mut log_sum = vec![0.0; d];
    let mut us = Vec::with_capacity(histograms.len());
    for mu in histograms {
        let u: Vec<f64> = mu
            .weights()
            .iter()
            .zip(&kv)
            .map(|(m, k)| m / (k + ridge))
            .collect();
        let s = log_message(&u, kernel)?;
        log_sum.iter_mut().zip(&s).for_each(|(acc, x)| *acc += x);
        us.push(u);
    }
    let n = histograms.len() as f64;
    let log_v_next: Vec<f64> = log_sum.into_iter().map(|x| x / n).collect();
    let v_next = log_v_next.iter().map(|x| x.exp()).collect();
    Ok(IbpStep {
        u: us,
        log_v_next,
        v_next,
    })
}

/// One full barycenter cycle on log scalings: the input is projected onto
/// the simplex before the step, so the returned `log v` has a stable scale.
pub fn ibp_cycle(instance: &ProblemInstance, log_v: &[f64]) -> Result<Vec<f64>, OtError> {
    let b = softmax_normalize(log_v);
    let step = centralized_ibp_step(
        instance.histograms(),
        instance.kernel(),
        instance.ridge(),
        b.weights(),
    )?;
    Ok(step.log_v_next)
}

/// The normalized barycenter map `b ↦ softmax(log v')`.
pub fn barycenter_map(instance: &ProblemInstance, b: &[f64]) -> Result<Histogram, OtError> {
    let step = centralized_ibp_step(instance.histograms(), instance.kernel(), instance.ridge(), b)?;
    Ok(softmax_normalize(&step.log_v_next))
}

#[derive(Debug, Clone, Serialize)]
pub struct CentralizedSolution {
    pub barycenter: Histogram,
    pub log_v: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖log v⁽ᵗ⁺¹⁾ - log v⁽ᵗ⁾‖∞` per iteration.
    pub changes: Vec<f64>,
}

/// Runs [`ibp_cycle`] from `log v = 0` until successive log scalings differ
/// by less than `tol` in the sup norm, or `max_iter` cycles have run.
///
/// Hitting the cap is not an error: the last iterate comes back with
/// `converged == false`.
pub fn centralized_barycenter(
    instance: &ProblemInstance,
    tol: f64,
    max_iter: usize,
) -> Result<CentralizedSolution, OtError> {
    let d = instance.support_size();
    let mut log_v = vec![0.0; d];
    let mut changes = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = ibp_cycle(instance, &log_v)?;
        let change = linf_distance(&next, &log_v);
        log_v = next;
        iterations += 1;
        changes.push(change);
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(CentralizedSolution {
        barycenter: softmax_normalize(&log_v),
        log_v,
        iterations,
        converged,
        changes,
    })
}

/// Contraction and steady-state bias constants for an instance and channel.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TheoryConstants {
    pub osc_log_k: f64,
    pub theta: f64,
    pub rho: f64,
    /// `tanh²(‖C‖∞ / 2ε)`.
    pub rho_bound: f64,
    pub l_exp: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub l_norm_bound: f64,
    pub quant_step: f64,
    /// `τ_inner + δ + Δq`.
    pub perturbation: f64,
    pub steady_state_bias_bound: f64,
    /// Set when the bias bound overflowed to `+inf`.
    pub bias_overflow: bool,
}

pub fn theory_constants(instance: &ProblemInstance, comms: &CommsConfig) -> TheoryConstants {
    let osc_log_k = osc_log_kernel(instance.kernel());
    let theta = (osc_log_k / 4.0).tanh();
    let rho = theta * theta;
    let rho_bound = (instance.cost().max_entry() / (2.0 * instance.epsilon()))
        .tanh()
        .powi(2);
    let l_exp = comms.s_max.exp();
    let v_min = comms.s_min.exp();
    let v_max = l_exp;
    let l_norm_bound = 2.0 / v_min;
    let quant_step = comms.quant_step();
    let perturbation = comms.tau_inner + comms.delta + quant_step;
    // e^{s_max} * 2 e^{-s_min} in one exponent to delay overflow
    let amplification = 2.0 * (comms.s_max - comms.s_min).exp();
    let mut steady_state_bias_bound = amplification / (1.0 - rho) * perturbation;
    let bias_overflow = !steady_state_bias_bound.is_finite();
    if bias_overflow {
        log::warn!("steady-state bias bound overflowed; reporting +inf");
        steady_state_bias_bound = f64::INFINITY;
    }
    TheoryConstants {
        osc_log_k,
        theta,
        rho,
        rho_bound,
        l_exp,
        v_min,
        v_max,
        l_norm_bound,
        quant_step,
        perturbation,
        steady_state_bias_bound,
        bias_overflow,
    }
}
