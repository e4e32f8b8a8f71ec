//! Long-lived lattice agreement and atomic snapshot over asynchronous
//! message passing, plus the round-latency toolkit used to measure them.
//!
//! The crate is organized bottom-up:
//!
//! - [`lattice`] — the join-semilattice of register cells and snapshot
//!   counters that every protocol here exchanges.
//! - [`protocol`] — the long-lived lattice agreement node automaton
//!   (request / propose / accept, quorum validation, learn reporting).
//! - [`aso`] — the atomic snapshot client that drives the agreement layer
//!   with update / snapshot / multi-writer update calls.
//! - [`sim`] — a deterministic discrete-event simulator: FIFO channels,
//!   seeded fair schedules, scripted and adversarial schedules, crash
//!   plans, and a reproducible trace file format.
//! - [`metrics`] — round assignments over traces (incremental rounds,
//!   network-timed rounds, causal chains), hole detection, and minimum
//!   message-hop covers.
//! - [`checkers`] — agreement property checks (validity, stability,
//!   consistency, liveness) and snapshot linearizability checkers.
//! - [`baselines`] — two one-shot lattice agreement protocols used for
//!   latency comparison.
//! - [`scenarios`] — the named scenario library, latency reports, and the
//!   comparison table behind the CLI.
//!
//! Every run is reproducible: the same seed and configuration produce a
//! bit-identical trace file.

pub mod aso;
pub mod baselines;
pub mod checkers;
pub mod lattice;
pub mod metrics;
pub mod protocol;
pub mod scenarios;
pub mod sim;

/// Process identifier, `0..n`.
pub type NodeId = usize;

/// Index of an event in a trace, assigned in execution order from 0.
pub type EventId = usize;

/// Unique message identifier within one trace.
pub type MsgId = u64;

/// Unique application-operation identifier within one trace.
pub type OpId = u64;
