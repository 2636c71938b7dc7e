//! Deterministic slot-driven simulator binding the whole stack together:
//! workload generation with spikes, per-node ground-truth CPU curves, probe
//! latencies with jitter, failure injection with probe-driven detection,
//! last-mile scheduling, and the failover state machine.
//!
//! A run is a pure function of (scenario, seed): simulated time only, no
//! wall clock, and every iteration order is fixed, so the full metrics log
//! is bit-identical across runs.
//!
//! Per-slot phase order:
//! 1. scheduled node additions
//! 2. physical failure/heal transitions
//! 3. flow path recomputation against the *detected* health view
//! 4. workload delta allocation (redistribution scheduler or baseline)
//! 5. probes, detection events, telemetry digests and the sync round
//! 6. failover handling for newly detected failures, revert probes
//! 7. request accounting against physical health
//! 8. CPU transition, queue updates, trajectory recording

use crate::lastmile::{
    bpr_schedule, compute_dpp, init_placeholder, update_queue, CpuModel, DppParams,
    NodeSchedState, Trajectory, TrajectoryStep, VirtualQueue,
};
use crate::midmile::{carousel_greedy, path_diversity, transform, CarouselParams};
use crate::model::{validate_topology, NodeSpec, SlotClock, Topology};
use crate::resilience::{
    compute_backups, on_better_path, on_failure, on_probe, BackupContext, BackupPlan,
    FailedElement, FlowState, HealthView, RerouteAction, RoutePath,
};
use crate::telemetry::{compress, sync_round, Digest, PartitionParams, TelemetrySample};
use crate::util::mean;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Probe reading reported for a failed element.
pub const PROBE_TIMEOUT_MS: f64 = 1.0e9;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("config error at {location}: {message}")]
    ConfigError { location: String, message: String },
}

fn config_err(location: impl Into<String>, message: impl Into<String>) -> SimError {
    SimError::ConfigError { location: location.into(), message: message.into() }
}

/// Ground-truth rps -> cpu curve: piecewise linear through (0, idle),
/// (0.6 max_rps, 0.6) and (0.8 max_rps, 0.8), saturating at 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpuGroundTruth {
    pub idle: f64,
    pub max_rps: f64,
}

impl Default for CpuGroundTruth {
    fn default() -> Self {
        Self::profile_8c16g()
    }
}

impl CpuGroundTruth {
    /// The stress-tested 8C16G profile: about 25k requests/s at full tilt.
    pub fn profile_8c16g() -> Self {
        Self { idle: 0.05, max_rps: 25_000.0 }
    }

    pub fn cpu(&self, rps: f64) -> f64 {
        let rps = rps.max(0.0);
        let knee1 = 0.6 * self.max_rps;
        let knee2 = 0.8 * self.max_rps;
        let cpu = if rps <= knee1 {
            self.idle + (0.6 - self.idle) * rps / knee1
        } else if rps <= knee2 {
            0.6 + 0.2 * (rps - knee1) / (knee2 - knee1)
        } else if rps <= self.max_rps {
            0.8 + 0.2 * (rps - knee2) / (self.max_rps - knee2)
        } else {
            1.0
        };
        cpu.clamp(0.0, 1.0)
    }

    /// Inverse of [`Self::cpu`] on its strictly increasing range.
    pub fn rps_at(&self, cpu: f64) -> f64 {
        let cpu = cpu.clamp(self.idle, 1.0);
        let knee1 = 0.6 * self.max_rps;
        let knee2 = 0.8 * self.max_rps;
        if cpu <= 0.6 {
            knee1 * (cpu - self.idle) / (0.6 - self.idle)
        } else if cpu <= 0.8 {
            knee1 + (knee2 - knee1) * (cpu - 0.6) / 0.2
        } else {
            knee2 + (self.max_rps - knee2) * (cpu - 0.8) / 0.2
        }
    }
}

/// Fits the predictor's calibration constant against a ground-truth curve by
/// least squares over the fitted bands' own operating points.
pub fn calibrate_cpu_model(model: &mut CpuModel, truth: &CpuGroundTruth) {
    let mut num = 0.0;
    let mut den = 0.0;
    for band in &model.bands {
        let mid = 0.5 * (band.cpu_low + band.cpu_high);
        let r0 = truth.rps_at(mid);
        for dreq in [100.0, 150.0, 200.0, 250.0, 300.0] {
            let raw = (band.slope * dreq + band.intercept).max(0.0);
            let actual = truth.cpu(r0 + dreq) - truth.cpu(r0);
            num += raw * actual;
            den += raw * raw;
        }
    }
    if den > 0.0 {
        model.kappa = num / den;
    }
}

/// A calibrated 8C16G predictor matching the default ground truth.
pub fn calibrated_model_8c16g() -> CpuModel {
    let mut m = CpuModel::profile_8c16g();
    calibrate_cpu_model(&mut m, &CpuGroundTruth::profile_8c16g());
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeConfig {
    pub at_slot: u64,
    pub multiplier: f64,
    pub duration_slots: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomSpikeConfig {
    /// Per-slot probability that a spike starts.
    pub probability: f64,
    /// Multiplier drawn uniformly from [2, 5].
    pub max_multiplier: f64,
    /// Duration drawn uniformly from [1, 10] slots.
    pub max_duration_slots: u64,
}

/// Offered-load profile: diurnal sinusoid, mean-one lognormal noise, and
/// scheduled or random spikes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub base_rps: f64,
    #[serde(default)]
    pub diurnal_amplitude: f64,
    #[serde(default = "default_period")]
    pub diurnal_period_slots: u64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub spikes: Vec<SpikeConfig>,
    #[serde(default)]
    pub random_spikes: Option<RandomSpikeConfig>,
}

fn default_period() -> u64 {
    17_280 // one day of 5-second slots
}

impl WorkloadProfile {
    pub fn flat(base_rps: f64) -> Self {
        Self {
            base_rps,
            diurnal_amplitude: 0.0,
            diurnal_period_slots: default_period(),
            noise_sigma: 0.0,
            spikes: Vec::new(),
            random_spikes: None,
        }
    }
}

/// Mean-one lognormal draw via Box-Muller.
fn lognormal_unit(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    (sigma * z - 0.5 * sigma * sigma).exp()
}

/// Generates the offered-load trace. Deterministic in (profile, seed).
pub fn generate_workload(profile: &WorkloadProfile, seed: u64, slots: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut multiplier = vec![1.0f64; slots as usize];
    for s in &profile.spikes {
        for t in s.at_slot..(s.at_slot + s.duration_slots).min(slots) {
            multiplier[t as usize] *= s.multiplier;
        }
    }
    if let Some(rs) = &profile.random_spikes {
        let mut t = 0;
        while t < slots {
            if rng.gen_bool(rs.probability.clamp(0.0, 1.0)) {
                let m = rng.gen_range(2.0..=rs.max_multiplier.max(2.0));
                let d = rng.gen_range(1..=rs.max_duration_slots.max(1));
                for u in t..(t + d).min(slots) {
                    multiplier[u as usize] *= m;
                }
                t += d;
            } else {
                t += 1;
            }
        }
    }
    (0..slots)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * t as f64
                / profile.diurnal_period_slots.max(1) as f64;
            let diurnal = 1.0 + profile.diurnal_amplitude * phase.sin();
            let noise = lognormal_unit(&mut rng, profile.noise_sigma);
            (profile.base_rps * diurnal * noise * multiplier[t as usize]).max(0.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSchedule {
    pub element: FailedElement,
    pub from_slot: u64,
    pub duration_slots: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulerKind {
    /// Drift-plus-penalty redistribution scheduler.
    Bpr,
    /// Baseline: the whole increment goes to the lowest-delay active node.
    LatencyGreedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub id: String,
    pub ingress: String,
    pub dest_region: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddNodeConfig {
    pub node: NodeSpec,
    pub at_slot: u64,
    /// Start the queue at the group median instead of zero.
    pub placeholder_init: bool,
    #[serde(default)]
    pub access_delay_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidmileConfig {
    pub k: u32,
    pub theta_a: f64,
    pub theta_l: f64,
    pub carousel: CarouselParams,
    #[serde(default = "default_recompute")]
    pub recompute_every: u64,
}

fn default_recompute() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResilienceConfig {
    /// Consecutive healthy probes before a flow reverts to its primary.
    pub revert_after: u32,
    pub load_threshold: f64,
    pub n_backups: usize,
    pub theta_l: f64,
}

impl Default for ResilienceConfig {
    fn default() -> Self {
        Self { revert_after: 3, load_threshold: 0.5, n_backups: 3, theta_l: 1000.0 }
    }
}

/// Complete description of a run; with the seed it fully determines the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub topology: Topology,
    pub workload: WorkloadProfile,
    pub duration_slots: u64,
    pub seed: u64,
    #[serde(default = "default_scheduler")]
    pub scheduler: SchedulerKind,
    #[serde(default)]
    pub dpp: DppParams,
    /// Ground-truth CPU curve per node id; missing nodes use the default.
    #[serde(default)]
    pub cpu_truth: BTreeMap<String, CpuGroundTruth>,
    /// Predictor override per node id; missing nodes use the fitted-band
    /// profile calibrated against the node's ground truth.
    #[serde(default)]
    pub cpu_models: BTreeMap<String, CpuModel>,
    /// User-access latency per node id; missing nodes draw a seeded value.
    #[serde(default)]
    pub access_delay_ms: BTreeMap<String, f64>,
    #[serde(default)]
    pub cpu_noise: f64,
    #[serde(default = "default_probe_sigma")]
    pub probe_jitter_sigma: f64,
    #[serde(default)]
    pub telemetry: PartitionParams,
    #[serde(default)]
    pub flows: Vec<FlowConfig>,
    #[serde(default)]
    pub failures: Vec<FailureSchedule>,
    #[serde(default)]
    pub add_node: Option<AddNodeConfig>,
    #[serde(default)]
    pub midmile: Option<MidmileConfig>,
    #[serde(default)]
    pub resilience: ResilienceConfig,
}

fn default_scheduler() -> SchedulerKind {
    SchedulerKind::Bpr
}

fn default_probe_sigma() -> f64 {
    0.05
}

impl Scenario {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Typed event stream; serialized as JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SimEvent {
    FailureStart { slot: u64, element: FailedElement },
    FailureEnd { slot: u64, element: FailedElement },
    Detection { slot: u64, element: FailedElement },
    RecoveryDetected { slot: u64, element: FailedElement },
    Failover { slot: u64, action: RerouteAction },
    NodeAdded { slot: u64, node: String, initial_backlog: f64 },
    Deactivated { slot: u64, node: String },
}

impl SimEvent {
    pub fn slot(&self) -> u64 {
        match self {
            SimEvent::FailureStart { slot, .. }
            | SimEvent::FailureEnd { slot, .. }
            | SimEvent::Detection { slot, .. }
            | SimEvent::RecoveryDetected { slot, .. }
            | SimEvent::Failover { slot, .. }
            | SimEvent::NodeAdded { slot, .. }
            | SimEvent::Deactivated { slot, .. } => *slot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSlotRow {
    pub slot: u64,
    pub node: String,
    pub cpu: f64,
    pub rps: f64,
    pub backlog: f64,
    pub v_dpp: f64,
    pub delta_req: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingRow {
    pub slot: u64,
    pub admitted: u64,
    pub delivered: u64,
    pub dropped_failure: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub slot: u64,
    pub path_count: usize,
    pub cos_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub slot: u64,
    pub flow: String,
    pub latency_ms: f64,
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Everything a run produces. Append-only while the run executes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub schema_version: u32,
    pub scenario_name: String,
    pub seed: u64,
    pub node_rows: Vec<NodeSlotRow>,
    pub accounting: Vec<AccountingRow>,
    pub routing: Vec<RoutingRow>,
    pub latency: Vec<LatencyRow>,
    pub events: Vec<SimEvent>,
    pub trajectory: Trajectory,
    /// Invariant violations found during the run; empty on a clean run.
    pub violations: Vec<String>,
}

impl MetricsLog {
    pub fn nodes_csv(&self) -> String {
        let mut out = String::from("slot,node,cpu,rps,backlog,v_dpp,delta_req\n");
        for r in &self.node_rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.slot, r.node, r.cpu, r.rps, r.backlog, r.v_dpp, r.delta_req
            ));
        }
        out
    }

    pub fn accounting_csv(&self) -> String {
        let mut out = String::from("slot,admitted,delivered,dropped_failure\n");
        for r in &self.accounting {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.slot, r.admitted, r.delivered, r.dropped_failure
            ));
        }
        out
    }

    pub fn routing_csv(&self) -> String {
        let mut out = String::from("slot,path_count,cos_sim\n");
        for r in &self.routing {
            out.push_str(&format!("{},{},{}\n", r.slot, r.path_count, r.cos_sim));
        }
        out
    }

    pub fn latency_csv(&self) -> String {
        let mut out = String::from("slot,flow,latency_ms\n");
        for r in &self.latency {
            out.push_str(&format!("{},{},{}\n", r.slot, r.flow, r.latency_ms));
        }
        out
    }

    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// Backlog trace of one node, by slot.
    pub fn backlog_of(&self, node: &str) -> Vec<f64> {
        self.node_rows
            .iter()
            .filter(|r| r.node == node)
            .map(|r| r.backlog)
            .collect()
    }

    pub fn summary(&self) -> RunSummary {
        let cpus: Vec<f64> = self.node_rows.iter().map(|r| r.cpu).collect();
        let mut lats: Vec<f64> = self.latency.iter().map(|r| r.latency_ms).collect();
        lats.sort_by(|a, b| a.total_cmp(b));
        let pct = |q: f64| -> f64 {
            if lats.is_empty() {
                return 0.0;
            }
            let idx = ((lats.len() as f64 - 1.0) * q).round() as usize;
            lats[idx]
        };
        let failovers = self
            .events
            .iter()
            .filter(|e| matches!(e, SimEvent::Failover { action: RerouteAction::Reroute { .. }, .. }))
            .count();
        RunSummary {
            mean_cpu: mean(&cpus),
            p50_latency_ms: pct(0.50),
            p95_latency_ms: pct(0.95),
            max_backlog: self.node_rows.iter().map(|r| r.backlog).fold(0.0, f64::max),
            failovers,
            violations: self.violations.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean_cpu: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub max_backlog: f64,
    pub failovers: usize,
    pub violations: usize,
}

struct NodeRuntime {
    spec: NodeSpec,
    truth: CpuGroundTruth,
    model: CpuModel,
    queue: VirtualQueue,
    req: f64,
    cpu: f64,
    delay_ms: f64,
}

fn validate_scenario(s: &Scenario) -> Result<(), SimError> {
    let topo_violations = validate_topology(&s.topology);
    if !topo_violations.is_empty() {
        return Err(config_err("topology", topo_violations[0].to_string()));
    }
    if s.topology.nodes.is_empty() {
        return Err(config_err("topology.nodes", "at least one node required"));
    }
    let known = |id: &str| s.topology.node(id).is_some();
    for (i, f) in s.flows.iter().enumerate() {
        if !known(&f.ingress) {
            return Err(config_err(format!("flows[{i}].ingress"), format!("unknown node {}", f.ingress)));
        }
        if !s.topology.nodes.iter().any(|n| n.region == f.dest_region) {
            return Err(config_err(
                format!("flows[{i}].dest_region"),
                format!("no node in region {}", f.dest_region),
            ));
        }
    }
    for (i, f) in s.failures.iter().enumerate() {
        let ok = match &f.element {
            FailedElement::Node(n) => known(n),
            FailedElement::Link { src, dst } => {
                s.topology.arcs.iter().any(|a| &a.src == src && &a.dst == dst)
            }
        };
        if !ok {
            return Err(config_err(format!("failures[{i}]"), "unknown target element"));
        }
    }
    if let Some(mm) = &s.midmile {
        if s.topology.source.is_none() || s.topology.sink.is_none() {
            return Err(config_err("midmile", "topology must designate source and sink"));
        }
        if mm.theta_a <= 0.0 || mm.theta_a > 1.0 {
            return Err(config_err("midmile.theta_a", "must lie in (0, 1]"));
        }
    }
    Ok(())
}

/// Minimum-latency healthy path from a node to the nearest node of a region,
/// by static topology latencies over the detected-health view.
fn optimal_flow_path(
    topo: &Topology,
    health: &HealthView,
    from: &str,
    dest_region: &str,
) -> Option<RoutePath> {
    let ids: Vec<&str> = topo.nodes.iter().map(|n| n.id.as_str()).collect();
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let start = *index.get(from)?;
    let mut dist = vec![f64::INFINITY; ids.len()];
    let mut parent: Vec<Option<usize>> = vec![None; ids.len()];
    let mut visited = vec![false; ids.len()];
    dist[start] = 0.0;
    loop {
        let mut u = None;
        let mut best = f64::INFINITY;
        for i in 0..ids.len() {
            if !visited[i] && dist[i] < best {
                best = dist[i];
                u = Some(i);
            }
        }
        let Some(u) = u else { break };
        visited[u] = true;
        for arc in topo.out_arcs(ids[u]) {
            if !health.link_healthy(&arc.src, &arc.dst) {
                continue;
            }
            let Some(&v) = index.get(arc.dst.as_str()) else { continue };
            if dist[u] + arc.latency_ms < dist[v] {
                dist[v] = dist[u] + arc.latency_ms;
                parent[v] = Some(u);
            }
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, n) in topo.nodes.iter().enumerate() {
        if n.region == dest_region && n.id != from && dist[i].is_finite() {
            match best {
                Some((_, d)) if d <= dist[i] => {}
                _ => best = Some((i, dist[i])),
            }
        }
    }
    let (target, _) = best?;
    let mut hops = Vec::new();
    let mut v = target;
    loop {
        hops.push(ids[v].to_string());
        match parent[v] {
            Some(p) => v = p,
            None => break,
        }
    }
    hops.reverse();
    Some(RoutePath::new(hops))
}

fn path_latency(topo: &Topology, path: &RoutePath) -> f64 {
    path.hops
        .windows(2)
        .map(|w| {
            topo.arcs
                .iter()
                .find(|a| a.src == w[0] && a.dst == w[1])
                .map_or(f64::INFINITY, |a| a.latency_ms)
        })
        .sum()
}

/// Executes the scenario slot by slot and returns the full metrics log.
pub fn run_scenario(scenario: &Scenario) -> Result<MetricsLog, SimError> {
    validate_scenario(scenario)?;
    let slot_clock = SlotClock::default();
    let slot_s = slot_clock.slot_length_s();

    // Independent deterministic streams per concern.
    let workload = generate_workload(&scenario.workload, scenario.seed ^ 0x5731_9a00, scenario.duration_slots);
    let mut access_rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x00ac_ce55);
    let mut cpu_rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x0c90_0000);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x0970_0b00);

    let mut nodes: Vec<NodeRuntime> = Vec::new();
    for spec in &scenario.topology.nodes {
        let truth = scenario
            .cpu_truth
            .get(&spec.id)
            .copied()
            .unwrap_or_default();
        let model = scenario.cpu_models.get(&spec.id).cloned().unwrap_or_else(|| {
            let mut m = CpuModel::profile_8c16g();
            calibrate_cpu_model(&mut m, &truth);
            m
        });
        let delay = scenario
            .access_delay_ms
            .get(&spec.id)
            .copied()
            .unwrap_or_else(|| access_rng.gen_range(10.0..80.0));
        nodes.push(NodeRuntime {
            spec: spec.clone(),
            truth,
            model,
            queue: VirtualQueue::new(spec.cores),
            req: 0.0,
            cpu: truth.cpu(0.0),
            delay_ms: delay,
        });
    }

    let mut physical = HealthView::default();
    let mut detected = HealthView::default();
    let mut flows: Vec<FlowState> = Vec::new();
    for fc in &scenario.flows {
        let primary = optimal_flow_path(&scenario.topology, &detected, &fc.ingress, &fc.dest_region)
            .ok_or_else(|| config_err(format!("flows.{}", fc.id), "no path to destination region"))?;
        flows.push(FlowState::new(fc.id.clone(), primary, fc.dest_region.clone()));
    }

    let mut log = MetricsLog {
        schema_version: METRICS_SCHEMA_VERSION,
        scenario_name: scenario.name.clone(),
        seed: scenario.seed,
        node_rows: Vec::new(),
        accounting: Vec::new(),
        routing: Vec::new(),
        latency: Vec::new(),
        events: Vec::new(),
        trajectory: Trajectory {
            weights: Vec::new(),
            theta: scenario.dpp.theta,
            steps: Vec::new(),
        },
        violations: Vec::new(),
    };

    let mut broadcast: Option<Digest> = None;
    let mut node_added = false;

    for t in 0..scenario.duration_slots {
        // 1. Node addition.
        if let Some(add) = &scenario.add_node {
            if add.at_slot == t && !node_added {
                node_added = true;
                let backlogs: Vec<f64> = nodes.iter().map(|n| n.queue.backlog).collect();
                let q0 = if add.placeholder_init { init_placeholder(&backlogs) } else { 0.0 };
                let truth = scenario.cpu_truth.get(&add.node.id).copied().unwrap_or_default();
                let model = scenario.cpu_models.get(&add.node.id).cloned().unwrap_or_else(|| {
                    let mut m = CpuModel::profile_8c16g();
                    calibrate_cpu_model(&mut m, &truth);
                    m
                });
                let delay = add
                    .access_delay_ms
                    .unwrap_or_else(|| access_rng.gen_range(10.0..80.0));
                nodes.push(NodeRuntime {
                    spec: add.node.clone(),
                    truth,
                    model,
                    queue: VirtualQueue::with_backlog(add.node.cores, q0),
                    req: 0.0,
                    cpu: truth.cpu(0.0),
                    delay_ms: delay,
                });
                log.events.push(SimEvent::NodeAdded {
                    slot: t,
                    node: add.node.id.clone(),
                    initial_backlog: q0,
                });
            }
        }

        // 2. Physical failure transitions.
        for f in &scenario.failures {
            if f.from_slot == t {
                physical.fail(&f.element);
                log.events.push(SimEvent::FailureStart { slot: t, element: f.element.clone() });
            }
            if f.from_slot + f.duration_slots == t {
                physical.heal(&f.element);
                log.events.push(SimEvent::FailureEnd { slot: t, element: f.element.clone() });
            }
        }

        // 3. Flow path recomputation against detected health: flows on
        // backup move to a strictly better healthy path when one exists.
        for flow in flows.iter_mut() {
            if !matches!(flow.state, crate::resilience::FailoverState::OnBackup { .. }) {
                continue;
            }
            if let Some(best) =
                optimal_flow_path(&scenario.topology, &detected, &flow.ingress, &flow.dest_region)
            {
                if best != flow.primary
                    && path_latency(&scenario.topology, &best)
                        < path_latency(&scenario.topology, &flow.current) - 1e-9
                {
                    if let Some(action) = on_better_path(flow, best, t) {
                        log.events.push(SimEvent::Failover { slot: t, action });
                    }
                }
            }
        }

        // 4. Allocation of the workload delta over detected-healthy nodes.
        let target = workload[t as usize];
        let current: f64 = nodes.iter().map(|n| n.req).sum();
        let delta = target - current;
        let active: Vec<usize> = (0..nodes.len())
            .filter(|&i| detected.node_healthy(&nodes[i].spec.id))
            .collect();
        let mut delta_req = vec![0.0; nodes.len()];
        let mut v_dpp = vec![0.0; nodes.len()];
        if !active.is_empty() {
            if delta >= 0.0 {
                match scenario.scheduler {
                    SchedulerKind::Bpr => {
                        let states: Vec<NodeSchedState> = active
                            .iter()
                            .map(|&i| {
                                let n = &nodes[i];
                                NodeSchedState {
                                    node_id: n.spec.id.clone(),
                                    cores: n.spec.cores,
                                    queue: n.queue,
                                    cpu_onset: n.cpu,
                                    req_onset: n.req,
                                    delay_ms: n.delay_ms,
                                    active: true,
                                    v_dpp: 0.0,
                                    cpu_model: n.model.clone(),
                                }
                            })
                            .collect();
                        match bpr_schedule(delta, &states, &scenario.dpp) {
                            Ok(decision) => {
                                let dpp = compute_dpp(&states, &decision.delta_req, &scenario.dpp);
                                for (pos, &i) in active.iter().enumerate() {
                                    delta_req[i] = decision.delta_req[pos];
                                    v_dpp[i] = dpp.per_node[pos];
                                }
                                for id in &decision.deactivated {
                                    log.events.push(SimEvent::Deactivated { slot: t, node: id.clone() });
                                }
                            }
                            Err(_) => {
                                log.violations.push(format!("slot {t}: no active nodes to schedule"));
                            }
                        }
                    }
                    SchedulerKind::LatencyGreedy => {
                        let best = *active
                            .iter()
                            .min_by(|&&a, &&b| nodes[a].delay_ms.total_cmp(&nodes[b].delay_ms))
                            .expect("active nonempty");
                        delta_req[best] = delta;
                    }
                }
            } else {
                // Load decline: proportional shrink over current holders.
                let held: f64 = nodes.iter().map(|n| n.req).sum();
                if held > 0.0 {
                    for (i, n) in nodes.iter().enumerate() {
                        delta_req[i] = delta * n.req / held;
                    }
                }
            }
        }

        // 5. Probes, detection, telemetry.
        let mut samples_by_src: BTreeMap<String, Vec<TelemetrySample>> = BTreeMap::new();
        let mut newly_detected: Vec<FailedElement> = Vec::new();
        for arc in &scenario.topology.arcs {
            let healthy = physical.link_healthy(&arc.src, &arc.dst);
            let jitter = lognormal_unit(&mut probe_rng, scenario.probe_jitter_sigma);
            let latency = if healthy { arc.latency_ms * jitter } else { PROBE_TIMEOUT_MS };
            samples_by_src.entry(arc.src.clone()).or_default().push(TelemetrySample {
                src: arc.src.clone(),
                dst: arc.dst.clone(),
                latency_ms: latency,
                slot: t,
            });
            let link = FailedElement::Link { src: arc.src.clone(), dst: arc.dst.clone() };
            if !healthy && detected.link_healthy(&arc.src, &arc.dst) {
                detected.fail(&link);
                newly_detected.push(link.clone());
                log.events.push(SimEvent::Detection { slot: t, element: link });
            } else if healthy && !detected.link_healthy(&arc.src, &arc.dst) {
                detected.heal(&link);
                log.events.push(SimEvent::RecoveryDetected { slot: t, element: link });
            }
        }
        for n in &nodes {
            let id = &n.spec.id;
            let node_el = FailedElement::Node(id.clone());
            let healthy = physical.node_healthy(id);
            if !healthy && detected.node_healthy(id) {
                detected.fail(&node_el);
                newly_detected.push(node_el.clone());
                log.events.push(SimEvent::Detection { slot: t, element: node_el });
            } else if healthy && !detected.node_healthy(id) {
                detected.heal(&node_el);
                log.events.push(SimEvent::RecoveryDetected { slot: t, element: node_el });
            }
        }
        let digests: Vec<Digest> = samples_by_src
            .values()
            .map(|samples| compress(samples, &scenario.telemetry))
            .collect();
        if !digests.is_empty() {
            if let Ok(out) = sync_round(&digests, t) {
                broadcast = Some(out.broadcast);
            }
        }

        // 6. Failover handling for newly detected failures, then revert
        // probes for flows on backup.
        if !flows.is_empty() && (!newly_detected.is_empty() || broadcast.is_some()) {
            let mut plans: HashMap<(String, String), BackupPlan> = HashMap::new();
            let empty = compress(&[], &scenario.telemetry);
            let digest = broadcast.as_ref().unwrap_or(&empty);
            // Traffic share toward each region by next hop, over flows.
            for fc in &flows {
                let key = (fc.ingress.clone(), fc.dest_region.clone());
                if plans.contains_key(&key) {
                    continue;
                }
                let mut share: HashMap<String, f64> = HashMap::new();
                let toward: Vec<&FlowState> =
                    flows.iter().filter(|f| f.dest_region == fc.dest_region).collect();
                let total = toward.len() as f64;
                for f in &toward {
                    if let Some(h) = f.current.first_hop() {
                        *share.entry(h.to_string()).or_default() += 1.0 / total;
                    }
                }
                let ctx = BackupContext {
                    topo: &scenario.topology,
                    digest,
                    theta_l: scenario.resilience.theta_l,
                    load_threshold: scenario.resilience.load_threshold,
                    traffic_share: share,
                    primary_next_hop: fc.primary.first_hop().map(String::from),
                };
                if let Ok(plan) =
                    compute_backups(&ctx, &fc.ingress, &fc.dest_region, scenario.resilience.n_backups)
                {
                    plans.insert(key, plan);
                }
            }
            for element in &newly_detected {
                for action in on_failure(element, t, &mut flows, &plans, &detected) {
                    log.events.push(SimEvent::Failover { slot: t, action });
                }
            }
            for flow in flows.iter_mut() {
                let primary_ok = flow.primary.healthy(&physical);
                if let Some(action) = on_probe(flow, primary_ok, t, scenario.resilience.revert_after)
                {
                    log.events.push(SimEvent::Failover { slot: t, action });
                }
            }
        }

        // 7. Apply allocation, then account requests against physical
        // health. A failed node's traffic in its failure slot counts as
        // dropped and its rate is shed to the survivors afterward.
        for (i, d) in delta_req.iter().enumerate() {
            nodes[i].req = (nodes[i].req + d).max(0.0);
        }
        let mut admitted = 0u64;
        let mut delivered = 0u64;
        let mut dropped = 0u64;
        let mut shed = 0.0;
        for n in &mut nodes {
            let requests = (n.req * slot_s).round() as u64;
            admitted += requests;
            if physical.node_healthy(&n.spec.id) {
                delivered += requests;
            } else {
                dropped += requests;
                shed += n.req;
                n.req = 0.0;
            }
        }
        if shed > 0.0 {
            let healthy_req: f64 = nodes
                .iter()
                .filter(|n| physical.node_healthy(&n.spec.id))
                .map(|n| n.req)
                .sum();
            for n in nodes.iter_mut() {
                if physical.node_healthy(&n.spec.id) {
                    let w = if healthy_req > 0.0 {
                        n.req / healthy_req
                    } else {
                        1.0 / active.len().max(1) as f64
                    };
                    n.req += shed * w;
                }
            }
        }
        if admitted != delivered + dropped {
            log.violations.push(format!(
                "slot {t}: conservation broken ({admitted} != {delivered} + {dropped})"
            ));
        }

        // Flow latency samples over healthy current paths.
        for flow in &flows {
            if flow.degraded {
                continue;
            }
            if flow.current.healthy(&physical) {
                let lat = path_latency(&scenario.topology, &flow.current);
                if lat.is_finite() {
                    log.latency.push(LatencyRow { slot: t, flow: flow.id.clone(), latency_ms: lat });
                }
            }
        }

        // Mid-mile routing on the detected-healthy subgraph.
        if let Some(mm) = &scenario.midmile {
            if t % mm.recompute_every.max(1) == 0 {
                let mut sub = scenario.topology.clone();
                sub.arcs.retain(|a| detected.link_healthy(&a.src, &a.dst));
                sub.nodes.retain(|n| detected.node_healthy(&n.id));
                if let Ok(graph) = transform(&sub, mm.k, mm.theta_a, mm.theta_l) {
                    let sol = carousel_greedy(&graph, &mm.carousel);
                    let (count, cos) = path_diversity(&sol.paths);
                    log.routing.push(RoutingRow { slot: t, path_count: count, cos_sim: cos });
                }
            }
        }

        // 8. CPU transition with the next onset measurement, queue updates,
        // trajectory recording.
        let cpu_onset: Vec<f64> = nodes.iter().map(|n| n.cpu).collect();
        let backlogs: Vec<f64> = nodes.iter().map(|n| n.queue.backlog).collect();
        let mut delta_cpu = Vec::with_capacity(nodes.len());
        for n in nodes.iter_mut() {
            let noise = if scenario.cpu_noise > 0.0 {
                cpu_rng.gen_range(-scenario.cpu_noise..scenario.cpu_noise)
            } else {
                0.0
            };
            let next = (n.truth.cpu(n.req) + noise).clamp(0.0, 1.0);
            delta_cpu.push(next - n.cpu);
            n.cpu = next;
            if !(0.0..=1.0).contains(&n.cpu) {
                log.violations.push(format!("slot {t}: cpu out of range on {}", n.spec.id));
            }
            n.queue = update_queue(&n.queue, n.cpu, 0.0, scenario.dpp.theta);
        }
        // Trajectory uses a fixed node set; record only once the roster is
        // final so the weight vector stays rectangular.
        let roster_final = scenario
            .add_node
            .as_ref()
            .map_or(true, |a| t >= a.at_slot);
        if roster_final {
            if log.trajectory.weights.len() != nodes.len() {
                log.trajectory.weights = nodes.iter().map(|n| n.queue.weight).collect();
                log.trajectory.steps.clear();
            }
            log.trajectory.steps.push(TrajectoryStep {
                backlogs,
                cpu_onset,
                delta_cpu,
            });
        }

        // 9. Per-node rows.
        for (i, n) in nodes.iter().enumerate() {
            log.node_rows.push(NodeSlotRow {
                slot: t,
                node: n.spec.id.clone(),
                cpu: n.cpu,
                rps: n.req,
                backlog: n.queue.backlog,
                v_dpp: v_dpp[i],
                delta_req: delta_req[i],
            });
        }

        // Flows must never sit on a failed element after detection handling.
        for flow in &flows {
            if !flow.degraded && !flow.current.healthy(&detected) {
                log.violations.push(format!(
                    "slot {t}: flow {} routed over a detected-failed element",
                    flow.id
                ));
            }
        }
    }

    Ok(log)
}

/// Random strongly-seeded topology: every ordered pair becomes an arc with
/// probability `density`; node 0 is the source and the last node the sink.
pub fn random_topology(n_nodes: usize, density: f64, seed: u64) -> Topology {
    use crate::model::TopoArc;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<NodeSpec> = (0..n_nodes)
        .map(|i| {
            let mut n = NodeSpec::new(format!("n{i}"), 8, format!("r{}", i % 7));
            n.tier = "tier2".into();
            n.cost_per_hour = 0.132;
            n
        })
        .collect();
    let mut arcs = Vec::new();
    for i in 0..n_nodes {
        for j in 0..n_nodes {
            if i != j && rng.gen_bool(density) {
                arcs.push(TopoArc::new(
                    format!("n{i}"),
                    format!("n{j}"),
                    rng.gen_range(5.0..100.0),
                ));
            }
        }
    }
    Topology {
        nodes,
        arcs,
        source: Some("n0".into()),
        sink: Some(format!("n{}", n_nodes - 1)),
    }
}

/// Canned scenario builders shared by the CLI and the test suites.
pub mod scenarios {
    use super::*;
    use crate::model::TopoArc;

    fn uniform_nodes(n: usize, cores: u32) -> Vec<NodeSpec> {
        (0..n)
            .map(|i| {
                let mut s = NodeSpec::new(format!("n{i}"), cores, "us-west");
                s.tier = "tier2".into();
                s.cost_per_hour = 0.132;
                s
            })
            .collect()
    }

    /// Identical-node group driven at a mean CPU level, no failures.
    pub fn steady_group(
        name: &str,
        n_nodes: usize,
        per_node_rps: f64,
        duration_slots: u64,
        seed: u64,
    ) -> Scenario {
        let nodes = uniform_nodes(n_nodes, 8);
        let topology = Topology { nodes, arcs: Vec::new(), source: None, sink: None };
        let mut access = BTreeMap::new();
        for (i, n) in topology.nodes.iter().enumerate() {
            access.insert(n.id.clone(), 20.0 + 4.0 * i as f64);
        }
        Scenario {
            name: name.into(),
            topology,
            workload: WorkloadProfile {
                noise_sigma: 0.02,
                ..WorkloadProfile::flat(per_node_rps * n_nodes as f64)
            },
            duration_slots,
            seed,
            scheduler: SchedulerKind::Bpr,
            dpp: DppParams::default(),
            cpu_truth: BTreeMap::new(),
            cpu_models: BTreeMap::new(),
            access_delay_ms: access,
            cpu_noise: 0.01,
            probe_jitter_sigma: 0.05,
            telemetry: PartitionParams::default(),
            flows: Vec::new(),
            failures: Vec::new(),
            add_node: None,
            midmile: None,
            resilience: ResilienceConfig::default(),
        }
    }

    /// 50-node stability run: a hot opening phase that settles near the
    /// threshold, long enough to watch the backlog statistic shrink.
    pub fn stability_50(seed: u64) -> Scenario {
        let mut s = steady_group("stability-50", 50, 14_600.0, 2000, seed);
        s.workload.spikes = vec![SpikeConfig { at_slot: 0, multiplier: 1.12, duration_slots: 150 }];
        s
    }

    /// Paired-comparison scenario for the redistribution scheduler against
    /// the latency-greedy baseline.
    pub fn baseline_comparison(seed: u64, scheduler: SchedulerKind) -> Scenario {
        let mut s = steady_group("baseline-comparison", 10, 15_000.0, 400, seed);
        s.scheduler = scheduler;
        s.workload.noise_sigma = 0.05;
        s
    }

    /// Node addition at a 60%-utilization operating point, with or without
    /// the place-holder backlog. Two slow relays keep the redistribution
    /// loop active so the newcomer sees a steady inflow of shifted load.
    pub fn placeholder_ab(seed: u64, placeholder_init: bool) -> Scenario {
        // The group idles exactly at the stability threshold, so backlogs
        // persist; a warm-up window builds the median backlog the newcomer
        // inherits, and three spike pulses after the addition probe how hard
        // the newcomer gets flooded.
        let mut s = steady_group("placeholder-ab", 10, 15_000.0, 240, seed);
        s.workload.noise_sigma = 0.015;
        s.dpp.v = 1.2e-7;
        for (i, n) in s.topology.nodes.iter().enumerate() {
            s.access_delay_ms.insert(n.id.clone(), 20.0 + 0.5 * i as f64);
        }
        let mut newcomer = NodeSpec::new("fresh", 8, "us-west");
        newcomer.tier = "tier2".into();
        newcomer.cost_per_hour = 0.132;
        s.add_node = Some(AddNodeConfig {
            node: newcomer,
            at_slot: 120,
            placeholder_init,
            access_delay_ms: Some(22.0),
        });
        s.workload.spikes = vec![
            SpikeConfig { at_slot: 20, multiplier: 1.025, duration_slots: 100 },
            SpikeConfig { at_slot: 122, multiplier: 1.18, duration_slots: 20 },
            SpikeConfig { at_slot: 160, multiplier: 1.18, duration_slots: 20 },
            SpikeConfig { at_slot: 198, multiplier: 1.18, duration_slots: 20 },
        ];
        s
    }

    /// Relay outage narrative: a 180-slot outbound link failure with a
    /// backup via a longer route, a better path available at the next
    /// scheduling cycle, and hysteresis-gated revert after recovery.
    pub fn relay_outage(seed: u64) -> Scenario {
        let nodes = vec![
            ("tokyo", "apac"),
            ("osaka", "apac"),
            ("london", "europe"),
            ("singapore", "apac-south"),
            ("newjersey", "us-east"),
        ];
        let topology = Topology {
            nodes: nodes
                .iter()
                .map(|(id, region)| {
                    let mut n = NodeSpec::new(*id, 8, *region);
                    n.tier = "tier1".into();
                    n
                })
                .collect(),
            arcs: vec![
                TopoArc::new("tokyo", "newjersey", 80.0),
                TopoArc::new("tokyo", "london", 95.0),
                TopoArc::new("london", "newjersey", 55.0),
                TopoArc::new("tokyo", "singapore", 40.0),
                TopoArc::new("singapore", "newjersey", 80.0),
                TopoArc::new("osaka", "singapore", 30.0),
            ],
            source: None,
            sink: None,
        };
        Scenario {
            name: "relay-outage".into(),
            topology,
            workload: WorkloadProfile::flat(30_000.0),
            duration_slots: 260,
            seed,
            scheduler: SchedulerKind::Bpr,
            dpp: DppParams::default(),
            cpu_truth: BTreeMap::new(),
            cpu_models: BTreeMap::new(),
            access_delay_ms: BTreeMap::new(),
            cpu_noise: 0.0,
            probe_jitter_sigma: 0.02,
            telemetry: PartitionParams::default(),
            flows: vec![
                FlowConfig { id: "f-main".into(), ingress: "tokyo".into(), dest_region: "us-east".into() },
                FlowConfig { id: "f-osaka1".into(), ingress: "osaka".into(), dest_region: "us-east".into() },
                FlowConfig { id: "f-osaka2".into(), ingress: "osaka".into(), dest_region: "us-east".into() },
            ],
            failures: vec![FailureSchedule {
                element: FailedElement::Link { src: "tokyo".into(), dst: "newjersey".into() },
                from_slot: 30,
                duration_slots: 180,
            }],
            add_node: None,
            midmile: None,
            resilience: ResilienceConfig::default(),
        }
    }

    /// Small end-to-end scenario exercising every subsystem; the bundled
    /// default for the CLI.
    pub fn quickstart(seed: u64) -> Scenario {
        let mut topo = random_topology(8, 0.45, seed ^ 0x51c0);
        topo.source = Some("n0".into());
        topo.sink = Some("n7".into());
        let mut s = steady_group("quickstart", 8, 11_000.0, 120, seed);
        s.topology = topo;
        s.workload.noise_sigma = 0.05;
        s.workload.spikes = vec![SpikeConfig { at_slot: 60, multiplier: 1.5, duration_slots: 8 }];
        s.midmile = Some(MidmileConfig {
            k: 6,
            theta_a: 0.5,
            theta_l: 400.0,
            carousel: CarouselParams::default(),
            recompute_every: 10,
        });
        s.flows = vec![FlowConfig { id: "f0".into(), ingress: "n0".into(), dest_region: "r3".into() }];
        s
    }
}
