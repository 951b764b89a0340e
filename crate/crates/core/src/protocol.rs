//! Per-agent state machine of the decentralized barycenter iteration.
//!
//! An agent alternates a local Sinkhorn scaling with an inner gossip phase
//! that averages log-messages with its neighbors. Outgoing packets are
//! clipped to `[s_min, s_max]`, quantized to `bits` bits and only sent when
//! the agent's estimate has moved more than `delta` since its last send.
//! Receivers keep the latest packet from each neighbor and reuse it.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ot::{self, linf_distance, GibbsKernel, Histogram, OtError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid comms config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error(
        "agent {agent}: non-finite estimate in local scaling; tighten the clip range \
         (s_max too large)"
    )]
    NonFiniteEstimate { agent: usize },
    #[error("agent {agent}: no cached packet from neighbor {neighbor}")]
    MissingCache { agent: usize, neighbor: usize },
    #[error("malformed packet: {0}")]
    Wire(String),
    #[error(transparent)]
    Ot(#[from] OtError),
}

/// Bit width of the channel quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bits {
    Quantized(u8),
    Unquantized,
}

impl Bits {
    pub const MAX: u8 = 32;

    /// Bytes per payload entry on the wire.
    pub fn entry_bytes(self) -> usize {
        match self {
            Bits::Quantized(b) => (b as usize).div_ceil(8),
            Bits::Unquantized => 8,
        }
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bits::Quantized(b) => write!(f, "{b}"),
            Bits::Unquantized => f.write_str("unquantized"),
        }
    }
}

impl Serialize for Bits {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Bits::Quantized(b) => serializer.serialize_u8(*b),
            Bits::Unquantized => serializer.serialize_str("unquantized"),
        }
    }
}

impl<'de> Deserialize<'de> for Bits {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(i64),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Int(b) if (1..=Bits::MAX as i64).contains(&b) => Ok(Bits::Quantized(b as u8)),
            Repr::Int(b) => Err(serde::de::Error::custom(format!(
                "bits must be in 1..={} or \"unquantized\", got {b}",
                Bits::MAX
            ))),
            Repr::Text(s) if s == "unquantized" => Ok(Bits::Unquantized),
            Repr::Text(s) => s
                .parse::<i64>()
                .ok()
                .filter(|b| (1..=Bits::MAX as i64).contains(b))
                .map(|b| Bits::Quantized(b as u8))
                .ok_or_else(|| {
                    serde::de::Error::custom(format!(
                        "bits must be in 1..={} or \"unquantized\", got {s:?}",
                        Bits::MAX
                    ))
                }),
        }
    }
}

/// Trigger, tolerances, quantizer and step caps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommsConfig {
    pub delta: f64,
    pub tau_inner: f64,
    pub tau_outer: f64,
    pub bits: Bits,
    pub s_min: f64,
    pub s_max: f64,
    pub inner_step_cap: usize,
    pub outer_iter_cap: usize,
}

impl Default for CommsConfig {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            tau_inner: 1e-4,
            tau_outer: 1e-6,
            bits: Bits::Quantized(16),
            s_min: -30.0,
            s_max: 30.0,
            inner_step_cap: 200,
            outer_iter_cap: 500,
        }
    }
}

impl CommsConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |field, reason: &str| {
            Err(ProtocolError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.delta.is_nan() || self.delta < 0.0 {
            return bad("delta", "must be nonnegative");
        }
        if !(self.tau_inner > 0.0) {
            return bad("tau_inner", "must be positive");
        }
        if !(self.tau_outer > 0.0) {
            return bad("tau_outer", "must be positive");
        }
        if let Bits::Quantized(b) = self.bits {
            if b == 0 || b > Bits::MAX {
                return bad("bits", "must be in 1..=32 or \"unquantized\"");
            }
        }
        if !(self.s_min.is_finite() && self.s_max.is_finite() && self.s_min < self.s_max) {
            return bad("s_min", "need finite s_min < s_max");
        }
        if self.inner_step_cap == 0 {
            return bad("inner_step_cap", "must be positive");
        }
        if self.outer_iter_cap == 0 {
            return bad("outer_iter_cap", "must be positive");
        }
        Ok(())
    }

    /// Worst-case per-entry quantization error `(s_max - s_min) / (2 (2^b - 1))`.
    pub fn quant_step(&self) -> f64 {
        match self.quantizer() {
            Some(q) => q.max_error(),
            None => 0.0,
        }
    }

    pub fn quantizer(&self) -> Option<Quantizer> {
        match self.bits {
            Bits::Quantized(b) => Some(Quantizer::new(b, self.s_min, self.s_max)),
            Bits::Unquantized => None,
        }
    }
}

/// Uniform quantizer with `2^bits` levels spanning `[s_min, s_max]`,
/// endpoints included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    bits: u8,
    s_min: f64,
    s_max: f64,
    max_index: u64,
}

impl Quantizer {
    pub fn new(bits: u8, s_min: f64, s_max: f64) -> Self {
        assert!((1..=Bits::MAX).contains(&bits), "bits out of range: {bits}");
        assert!(s_min < s_max, "empty quantizer range");
        Self {
            bits,
            s_min,
            s_max,
            max_index: (1u64 << bits) - 1,
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn level(&self, index: u64) -> f64 {
        if index >= self.max_index {
            return self.s_max;
        }
        self.s_min + (self.s_max - self.s_min) * (index as f64 / self.max_index as f64)
    }

    /// Index of the nearest level; ties go to the lower level.
    pub fn index(&self, value: f64) -> u64 {
        let t = (value - self.s_min) / (self.s_max - self.s_min) * self.max_index as f64;
        if !(t > 0.0) {
            return 0;
        }
        let lower = (t.floor() as u64).min(self.max_index);
        if lower == self.max_index {
            return lower;
        }
        // decide on the reconstructed levels so the error bound holds as computed
        let below = value - self.level(lower);
        let above = self.level(lower + 1) - value;
        if above < below {
            lower + 1
        } else {
            lower
        }
    }

    pub fn quantize(&self, value: f64) -> f64 {
        self.level(self.index(value))
    }

    pub fn max_error(&self) -> f64 {
        (self.s_max - self.s_min) / (2.0 * self.max_index as f64)
    }
}

/// Elementwise clamp into `[s_min, s_max]`.
pub fn clip_log(values: &[f64], s_min: f64, s_max: f64) -> Vec<f64> {
    values.iter().map(|v| v.clamp(s_min, s_max)).collect()
}

/// Maps already clipped values to their reconstruction levels. Identity when
/// the channel is unquantized.
pub fn quantize(values: &[f64], config: &CommsConfig) -> Vec<f64> {
    match config.quantizer() {
        Some(q) => values.iter().map(|&v| q.quantize(v)).collect(),
        None => values.to_vec(),
    }
}

/// One broadcast. `payload` holds reconstruction levels, i.e. exactly what
/// receivers see.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub sender: usize,
    pub outer_iter: u32,
    pub inner_step: u32,
    pub payload: Vec<f64>,
}

/// Fixed header: sender, outer_iter, inner_step (u32 each), bits (u8), d (u32).
pub const HEADER_BYTES: usize = 4 + 4 + 4 + 1 + 4;

pub fn wire_len(d: usize, bits: Bits) -> usize {
    HEADER_BYTES + d * bits.entry_bytes()
}

impl Packet {
    /// Send-time key used to discard packets older than the cached one.
    pub fn send_time(&self) -> (u32, u32) {
        (self.outer_iter, self.inner_step)
    }

    /// Little-endian wire encoding. Quantized entries are written as level
    /// indices in `ceil(bits/8)` bytes; unquantized ones as IEEE-754 doubles.
    pub fn encode(&self, config: &CommsConfig) -> Vec<u8> {
        let mut out = Vec::with_capacity(wire_len(self.payload.len(), config.bits));
        out.extend_from_slice(&(self.sender as u32).to_le_bytes());
        out.extend_from_slice(&self.outer_iter.to_le_bytes());
        out.extend_from_slice(&self.inner_step.to_le_bytes());
        let bits_tag = match config.bits {
            Bits::Quantized(b) => b,
            Bits::Unquantized => 0,
        };
        out.push(bits_tag);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        match config.quantizer() {
            Some(q) => {
                let width = config.bits.entry_bytes();
                for &v in &self.payload {
                    let idx = q.index(v);
                    out.extend_from_slice(&idx.to_le_bytes()[..width]);
                }
            }
            None => {
                for &v in &self.payload {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Inverse of [`Packet::encode`]; the clip range is shared configuration
    /// and does not travel with the packet.
    pub fn decode(bytes: &[u8], s_min: f64, s_max: f64) -> Result<Packet, ProtocolError> {
        if bytes.len() < HEADER_BYTES {
            return Err(ProtocolError::Wire(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let sender = u32_at(0) as usize;
        let outer_iter = u32_at(4);
        let inner_step = u32_at(8);
        let bits = match bytes[12] {
            0 => Bits::Unquantized,
            b if b <= Bits::MAX => Bits::Quantized(b),
            b => return Err(ProtocolError::Wire(format!("bits tag {b} out of range"))),
        };
        let d = u32_at(13) as usize;
        let width = bits.entry_bytes();
        let body = &bytes[HEADER_BYTES..];
        if body.len() != d * width {
            return Err(ProtocolError::Wire(format!(
                "expected {} payload bytes, found {}",
                d * width,
                body.len()
            )));
        }
        let payload = match bits {
            Bits::Quantized(b) => {
                let q = Quantizer::new(b, s_min, s_max);
                body.chunks_exact(width)
                    .map(|chunk| {
                        let mut buf = [0u8; 8];
                        buf[..width].copy_from_slice(chunk);
                        q.level(u64::from_le_bytes(buf))
                    })
                    .collect()
            }
            Bits::Unquantized => body
                .chunks_exact(8)
                .map(|chunk| f64::from_le_bytes(chunk.try_into().unwrap()))
                .collect(),
        };
        Ok(Packet {
            sender,
            outer_iter,
            inner_step,
            payload,
        })
    }
}

/// State owned by one agent.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub id: usize,
    /// Scaling `u_i`.
    pub u: Vec<f64>,
    /// Own log-message `log(Kᵀ u_i)`, full precision.
    pub s: Vec<f64>,
    /// Running estimate of the network average of the log-messages.
    pub z: Vec<f64>,
    /// Payload of the most recent transmission (clipped and quantized).
    pub z_last_tx: Option<Vec<f64>>,
    /// Full-precision `z` at the most recent transmission; the trigger
    /// measures movement against this.
    pub tx_reference: Option<Vec<f64>>,
    pub neighbor_cache: BTreeMap<usize, Packet>,
    pub messages_sent: u64,
    /// Cumulative sup-norm variation of `z` over reseeds and gossip steps.
    pub variation_accum: f64,
    /// Number of transmissions in which clipping changed at least one entry.
    pub clip_events: u64,
}

impl AgentState {
    /// Fresh agent with `u = 1` and `log v = z = 0`.
    pub fn new(id: usize, d: usize) -> Self {
        Self {
            id,
            u: vec![1.0; d],
            s: vec![0.0; d],
            z: vec![0.0; d],
            z_last_tx: None,
            tx_reference: None,
            neighbor_cache: BTreeMap::new(),
            messages_sent: 0,
            variation_accum: 0.0,
            clip_events: 0,
        }
    }

    /// `v = softmax(z)`, `u = μ ⊘ (K v + η)`, `s = log(Kᵀ u)`.
    ///
    /// `v` is the normalized shared iterate; the scaling recursion is
    /// homogeneous of degree -1, so feeding it unnormalized `exp(z)` would
    /// only flip the overall scale from one iteration to the next.
    pub fn local_scaling_update(
        &mut self,
        histogram: &Histogram,
        kernel: &GibbsKernel,
        ridge: f64,
    ) -> Result<(), ProtocolError> {
        if self.z.iter().any(|x| !x.is_finite()) {
            return Err(ProtocolError::NonFiniteEstimate { agent: self.id });
        }
        let v = ot::softmax_normalize(&self.z);
        let kv = kernel.apply(v.weights());
        self.u = histogram
            .weights()
            .iter()
            .zip(&kv)
            .map(|(m, k)| m / (k + ridge))
            .collect();
        self.s = ot::log_message(&self.u, kernel)?;
        Ok(())
    }

    /// Starts an inner phase from the own log-message: `z ← s`.
    pub fn reseed_inner(&mut self) {
        self.variation_accum += linf_distance(&self.s, &self.z);
        self.z.clone_from(&self.s);
    }

    fn trigger_fires(&self, config: &CommsConfig) -> bool {
        match &self.tx_reference {
            None => true,
            Some(reference) => linf_distance(&self.z, reference) > config.delta,
        }
    }

    /// Sends `quantize(clip(z))` iff `‖z - z_at_last_send‖∞ > δ`.
    pub fn maybe_transmit(
        &mut self,
        config: &CommsConfig,
        outer_iter: u32,
        inner_step: u32,
    ) -> Option<Packet> {
        if !self.trigger_fires(config) {
            return None;
        }
        Some(self.transmit(config, outer_iter, inner_step))
    }

    /// Sends unconditionally; used for the bootstrap exchange.
    pub fn transmit(&mut self, config: &CommsConfig, outer_iter: u32, inner_step: u32) -> Packet {
        let clipped = clip_log(&self.z, config.s_min, config.s_max);
        if clipped != self.z {
            self.clip_events += 1;
        }
        let payload = quantize(&clipped, config);
        self.z_last_tx = Some(payload.clone());
        self.tx_reference = Some(self.z.clone());
        self.messages_sent += 1;
        Packet {
            sender: self.id,
            outer_iter,
            inner_step,
            payload,
        }
    }

    /// Caches `packet` unless an equally new or newer one from the same
    /// sender is already held. Returns whether the cache changed.
    pub fn receive(&mut self, packet: Packet) -> bool {
        match self.neighbor_cache.get(&packet.sender) {
            Some(cached) if cached.send_time() >= packet.send_time() => false,
            _ => {
                self.neighbor_cache.insert(packet.sender, packet);
                true
            }
        }
    }

    /// `z ← w_ii z + Σ_k w_ik z̃_k` over the weight row `(k, w_ik)`.
    pub fn gossip_step(&mut self, row: &[(usize, f64)]) -> Result<(), ProtocolError> {
        let mut next = vec![0.0; self.z.len()];
        for &(k, w) in row {
            if w == 0.0 {
                continue;
            }
            let source = if k == self.id {
                &self.z
            } else {
                match self.neighbor_cache.get(&k) {
                    Some(p) => &p.payload,
                    None => {
                        return Err(ProtocolError::MissingCache {
                            agent: self.id,
                            neighbor: k,
                        })
                    }
                }
            };
            next.iter_mut().zip(source).for_each(|(n, x)| *n += w * x);
        }
        self.variation_accum += linf_distance(&next, &self.z);
        self.z = next;
        Ok(())
    }

    /// Largest sup-norm gap between own `z` and any cached neighbor payload.
    pub fn max_neighbor_gap(&self) -> f64 {
        self.neighbor_cache
            .values()
            .map(|p| linf_distance(&self.z, &p.payload))
            .fold(0.0, f64::max)
    }

    pub fn inner_converged(&self, config: &CommsConfig) -> bool {
        self.max_neighbor_gap() < config.tau_inner
    }
}

/// Strict test `‖log v_curr - log v_prev‖∞ < τ_outer`.
pub fn outer_converged(log_v_prev: &[f64], log_v_curr: &[f64], config: &CommsConfig) -> bool {
    linf_distance(log_v_prev, log_v_curr) < config.tau_outer
}
