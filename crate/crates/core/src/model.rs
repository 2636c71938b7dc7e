//! Shared domain types: proxy nodes, the latency-weighted topology, the slot
//! clock and the per-node performance counters consumed by the tuner.
//!
//! Everything here is immutable after construction and safe to share across
//! threads.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

/// A proxy node: compute capacity, placement and pricing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    /// Opaque node identifier.
    pub id: String,
    /// CPU core count; must be >= 1.
    pub cores: u32,
    /// Free-form region label.
    pub region: String,
    /// Provider tier label (e.g. "tier1", "tier2").
    #[serde(default)]
    pub tier: String,
    /// Hourly compute cost in currency units; must be >= 0.
    #[serde(default)]
    pub cost_per_hour: f64,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, cores: u32, region: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            cores,
            region: region.into(),
            tier: String::new(),
            cost_per_hour: 0.0,
        }
    }
}

/// Directed arc between two nodes with a measured latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoArc {
    pub src: String,
    pub dst: String,
    pub latency_ms: f64,
}

impl TopoArc {
    pub fn new(src: impl Into<String>, dst: impl Into<String>, latency_ms: f64) -> Self {
        Self {
            src: src.into(),
            dst: dst.into(),
            latency_ms,
        }
    }
}

/// The shared world model: proxy nodes plus latency-weighted arcs, with
/// optional source/sink designations for routing problems.
///
/// The JSON schema is the interchange format for the `midmile` and `sim`
/// subcommands:
///
/// ```json
/// {
///   "nodes": [{"id": "s", "cores": 8, "region": "us-west", "tier": "tier2", "cost_per_hour": 0.132}],
///   "arcs":  [{"src": "s", "dst": "t", "latency_ms": 42.0}],
///   "source": "s",
///   "sink": "t"
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    pub arcs: Vec<TopoArc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink: Option<String>,
}

/// A single invariant violation found by [`validate_topology`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    UnknownEndpoint { src: String, dst: String, missing: String },
    NegativeLatency { src: String, dst: String, latency_ms: f64 },
    SelfLoop { node: String },
    DuplicateNodeId { id: String },
    ZeroCores { id: String },
    NegativeCost { id: String, cost_per_hour: f64 },
    UnknownTerminal { role: &'static str, id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownEndpoint { src, dst, missing } => {
                write!(f, "arc ({src} -> {dst}) references unknown node {missing}")
            }
            Violation::NegativeLatency { src, dst, latency_ms } => {
                write!(f, "arc ({src} -> {dst}) has negative latency {latency_ms}")
            }
            Violation::SelfLoop { node } => write!(f, "self-loop arc on node {node}"),
            Violation::DuplicateNodeId { id } => write!(f, "duplicate node id {id}"),
            Violation::ZeroCores { id } => write!(f, "node {id} has zero cores"),
            Violation::NegativeCost { id, cost_per_hour } => {
                write!(f, "node {id} has negative cost_per_hour {cost_per_hour}")
            }
            Violation::UnknownTerminal { role, id } => {
                write!(f, "designated {role} {id} is not in the node set")
            }
        }
    }
}

/// Checks every topology invariant and returns the violations found.
/// An empty list means the topology is well-formed.
pub fn validate_topology(topo: &Topology) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for n in &topo.nodes {
        if !seen.insert(n.id.as_str()) {
            out.push(Violation::DuplicateNodeId { id: n.id.clone() });
        }
        if n.cores == 0 {
            out.push(Violation::ZeroCores { id: n.id.clone() });
        }
        if n.cost_per_hour < 0.0 {
            out.push(Violation::NegativeCost {
                id: n.id.clone(),
                cost_per_hour: n.cost_per_hour,
            });
        }
    }
    for a in &topo.arcs {
        for end in [&a.src, &a.dst] {
            if !seen.contains(end.as_str()) {
                out.push(Violation::UnknownEndpoint {
                    src: a.src.clone(),
                    dst: a.dst.clone(),
                    missing: end.clone(),
                });
            }
        }
        if a.src == a.dst {
            out.push(Violation::SelfLoop { node: a.src.clone() });
        }
        if a.latency_ms < 0.0 {
            out.push(Violation::NegativeLatency {
                src: a.src.clone(),
                dst: a.dst.clone(),
                latency_ms: a.latency_ms,
            });
        }
    }
    for (role, term) in [("source", &topo.source), ("sink", &topo.sink)] {
        if let Some(id) = term {
            if !seen.contains(id.as_str()) {
                out.push(Violation::UnknownTerminal { role, id: id.clone() });
            }
        }
    }
    out
}

impl Topology {
    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Outgoing arcs of `id`, in declaration order.
    pub fn out_arcs<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a TopoArc> + 'a {
        self.arcs.iter().filter(move |a| a.src == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn from_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_json(&raw).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Slot clock shared by data sync and computation cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotClock {
    pub slot_index: u64,
    pub slot_length_ms: u64,
}

impl Default for SlotClock {
    fn default() -> Self {
        Self { slot_index: 0, slot_length_ms: 5000 }
    }
}

impl SlotClock {
    pub fn new(slot_length_ms: u64) -> Self {
        assert!(slot_length_ms > 0, "slot length must be positive");
        Self { slot_index: 0, slot_length_ms }
    }

    pub fn advance(&mut self) {
        self.slot_index += 1;
    }

    /// Slot index containing the given absolute time.
    pub fn slot_of(&self, now_ms: u64) -> u64 {
        now_ms / self.slot_length_ms
    }

    pub fn slot_length_s(&self) -> f64 {
        self.slot_length_ms as f64 / 1000.0
    }
}

/// Per-node performance counters sampled once per slot: CPU utilization as a
/// fraction, request arrival rate, requests processed per unit time and
/// average request processing time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerfCounters {
    /// CPU utilization in [0, 1]. Rendered as a percentage only at
    /// presentation boundaries.
    pub cpu: f64,
    /// Request arrival rate, requests/s.
    pub rps: f64,
    /// Requests processed per unit time, requests/s.
    pub rqpt: f64,
    /// Average request processing time, ms.
    pub art_ms: f64,
}

impl PerfCounters {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cpu)
            && self.rps >= 0.0
            && self.rqpt >= 0.0
            && self.art_ms >= 0.0
    }
}
