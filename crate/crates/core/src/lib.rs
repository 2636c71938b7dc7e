//! Desk-scale global-accelerator overlay stack.
//!
//! The crate is organized around one module per subsystem:
//!
//! - [`model`] — shared domain types (nodes, topology, slot clock, counters)
//! - [`srheader`] — segment-routing header and merge-frame wire codec
//! - [`tunnel`] — pooling, multiplexing and packet-merge forwarding engine
//! - [`tuner`] — LinUCB bandit over the (S_p, C_p, T_p) parameter grid
//! - [`lastmile`] — virtual stability queues, drift-plus-penalty scheduler
//! - [`midmile`] — constrained max-flow router with carousel greedy search
//! - [`telemetry`] — outlier partitioning and digest compression
//! - [`resilience`] — backup paths, failover state machine, recovery
//! - [`sim`] — deterministic slot-driven simulator binding it all together

mod util;
pub mod lastmile;
pub mod midmile;
pub mod model;
pub mod resilience;
pub mod sim;
pub mod srheader;
pub mod telemetry;
pub mod tuner;
pub mod tunnel;
