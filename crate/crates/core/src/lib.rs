//! Decentralized entropic Wasserstein barycenters by log-domain gossip.
//!
//! Each agent holds a histogram on a shared support. The Sinkhorn/IBP
//! barycenter iteration needs a geometric mean of per-agent vectors; in the
//! log domain that mean becomes an arithmetic average, which neighbors can
//! approximate by gossip. Transmissions are event-triggered and quantized.
//!
//! * [`ot`] - Gibbs kernels, the centralized reference solver, log-domain
//!   helpers, the Hilbert metric and the contraction/bias constants.
//! * [`protocol`] - the per-agent state machine: local scaling, triggers,
//!   clipping, quantization, cached-neighbor gossip and stopping tests.
//! * [`netsim`] - topologies, Metropolis weights, spectral diagnostics and a
//!   seeded round-based channel with drops, delays and random activation.
//! * [`experiments`] - end-to-end runs, figure tables and theory checks.
//! * [`config`] - the run configuration shared by the harness and the CLI.

pub mod config;
pub mod experiments;
pub mod netsim;
pub mod ot;
pub mod protocol;
pub mod stats;
