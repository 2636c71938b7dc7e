//! Backup-path computation, the failure-triggered rerouting state machine,
//! and recovery back to the optimal path once it has been healthy long
//! enough.
//!
//! Plans avoid next hops already carrying a heavy share of the traffic
//! toward the destination region, so a failover never piles onto an
//! already-busy neighbor. A flow reverts to its primary only after H
//! consecutive healthy probes, which keeps an oscillating fault from
//! flapping it back and forth.

use crate::model::Topology;
use crate::telemetry::{estimate, Digest};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ResilienceError {
    #[error("no latency-feasible backup path from {node} toward {dest_region}")]
    NoBackup { node: String, dest_region: String },
}

/// A failed network element.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailedElement {
    Node(String),
    Link { src: String, dst: String },
}

/// Current failure state of the world, maintained by the failure injector.
#[derive(Debug, Clone, Default)]
pub struct HealthView {
    failed_nodes: HashSet<String>,
    failed_links: HashSet<(String, String)>,
}

impl HealthView {
    pub fn fail(&mut self, element: &FailedElement) {
        match element {
            FailedElement::Node(n) => {
                self.failed_nodes.insert(n.clone());
            }
            FailedElement::Link { src, dst } => {
                self.failed_links.insert((src.clone(), dst.clone()));
            }
        }
    }

    pub fn heal(&mut self, element: &FailedElement) {
        match element {
            FailedElement::Node(n) => {
                self.failed_nodes.remove(n);
            }
            FailedElement::Link { src, dst } => {
                self.failed_links.remove(&(src.clone(), dst.clone()));
            }
        }
    }

    pub fn node_healthy(&self, id: &str) -> bool {
        !self.failed_nodes.contains(id)
    }

    pub fn link_healthy(&self, src: &str, dst: &str) -> bool {
        !self.failed_links.contains(&(src.to_string(), dst.to_string()))
            && self.node_healthy(src)
            && self.node_healthy(dst)
    }

    pub fn anything_failed(&self) -> bool {
        !self.failed_nodes.is_empty() || !self.failed_links.is_empty()
    }
}

/// A forwarding path as the full node sequence, origin first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoutePath {
    pub hops: Vec<String>,
}

impl RoutePath {
    pub fn new(hops: Vec<String>) -> Self {
        Self { hops }
    }

    pub fn first_hop(&self) -> Option<&str> {
        self.hops.get(1).map(String::as_str)
    }

    pub fn destination(&self) -> Option<&str> {
        self.hops.last().map(String::as_str)
    }

    /// True when every hop past the origin and every link is healthy.
    pub fn healthy(&self, health: &HealthView) -> bool {
        for (i, hop) in self.hops.iter().enumerate() {
            if i > 0 && !health.node_healthy(hop) {
                return false;
            }
            if i + 1 < self.hops.len() && !health.link_healthy(hop, &self.hops[i + 1]) {
                return false;
            }
        }
        true
    }

    pub fn uses(&self, element: &FailedElement) -> bool {
        match element {
            FailedElement::Node(n) => self.hops[1..].contains(n),
            FailedElement::Link { src, dst } => self
                .hops
                .windows(2)
                .any(|w| &w[0] == src && &w[1] == dst),
        }
    }
}

/// Everything backup computation reads: the topology, the latest digest for
/// latency estimates, the latency bound, and the current traffic picture.
pub struct BackupContext<'a> {
    pub topo: &'a Topology,
    pub digest: &'a Digest,
    pub theta_l: f64,
    /// Next hops carrying more than this share of traffic toward the
    /// destination region are excluded from backup plans.
    pub load_threshold: f64,
    /// Share of the node's traffic toward the region, by next hop.
    pub traffic_share: HashMap<String, f64>,
    pub primary_next_hop: Option<String>,
}

/// Ordered backup paths for one (node, destination region) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackupPlan {
    pub node: String,
    pub dest_region: String,
    /// Latency-sorted; every first hop differs from the primary's.
    pub backups: Vec<RoutePath>,
}

fn arc_latency(ctx: &BackupContext, src: &str, dst: &str, fallback: f64) -> f64 {
    match estimate(ctx.digest, src, dst) {
        Ok((lat, _)) => lat,
        Err(_) => fallback,
    }
}

/// Cheapest path from `from` to any node of `dest_region`, never revisiting
/// `origin`. Returns the node sequence starting at `from` plus its latency.
fn best_path_to_region(
    ctx: &BackupContext,
    origin: &str,
    from: &str,
    dest_region: &str,
) -> Option<(Vec<String>, f64)> {
    let ids: Vec<&str> = ctx.topo.nodes.iter().map(|n| n.id.as_str()).collect();
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let start = *index.get(from)?;
    let mut dist = vec![f64::INFINITY; ids.len()];
    let mut parent: Vec<Option<usize>> = vec![None; ids.len()];
    dist[start] = 0.0;
    let mut visited = vec![false; ids.len()];
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
        for arc in ctx.topo.out_arcs(ids[u]) {
            if arc.dst == origin {
                continue;
            }
            let Some(&v) = index.get(arc.dst.as_str()) else { continue };
            let w = arc_latency(ctx, &arc.src, &arc.dst, arc.latency_ms);
            if dist[u] + w < dist[v] {
                dist[v] = dist[u] + w;
                parent[v] = Some(u);
            }
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, node) in ctx.topo.nodes.iter().enumerate() {
        if node.region == dest_region && dist[i].is_finite() {
            match best {
                Some((_, d)) if d <= dist[i] => {}
                _ => best = Some((i, dist[i])),
            }
        }
    }
    let (target, total) = best?;
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
    Some((hops, total))
}

/// Computes up to `n_backups` latency-feasible paths toward the region,
/// skipping the primary next hop and any neighbor past the load threshold,
/// sorted by estimated latency.
pub fn compute_backups(
    ctx: &BackupContext,
    node: &str,
    dest_region: &str,
    n_backups: usize,
) -> Result<BackupPlan, ResilienceError> {
    let mut candidates: Vec<(RoutePath, f64)> = Vec::new();
    let mut seen_first_hops = HashSet::new();
    for arc in ctx.topo.out_arcs(node) {
        let hop = arc.dst.clone();
        if Some(hop.as_str()) == ctx.primary_next_hop.as_deref() {
            continue;
        }
        if ctx.traffic_share.get(&hop).copied().unwrap_or(0.0) > ctx.load_threshold {
            continue;
        }
        if !seen_first_hops.insert(hop.clone()) {
            continue;
        }
        let first_leg = arc_latency(ctx, node, &hop, arc.latency_ms);
        let dest_node = ctx.topo.node(&hop);
        if dest_node.map(|n| n.region == dest_region).unwrap_or(false) {
            // The neighbor itself sits in the destination region.
            if first_leg <= ctx.theta_l + 1e-9 {
                candidates.push((RoutePath::new(vec![node.to_string(), hop]), first_leg));
            }
            continue;
        }
        if let Some((tail, tail_lat)) = best_path_to_region(ctx, node, &hop, dest_region) {
            let total = first_leg + tail_lat;
            if total <= ctx.theta_l + 1e-9 {
                let mut hops = vec![node.to_string()];
                hops.extend(tail);
                candidates.push((RoutePath::new(hops), total));
            }
        }
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.hops.cmp(&b.0.hops)));
    candidates.truncate(n_backups);
    if candidates.is_empty() {
        return Err(ResilienceError::NoBackup {
            node: node.to_string(),
            dest_region: dest_region.to_string(),
        });
    }
    Ok(BackupPlan {
        node: node.to_string(),
        dest_region: dest_region.to_string(),
        backups: candidates.into_iter().map(|(p, _)| p).collect(),
    })
}

/// Per-flow failover state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FailoverState {
    Primary,
    OnBackup { since_slot: u64 },
    Reverted { since_slot: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub id: String,
    pub ingress: String,
    pub dest_region: String,
    pub primary: RoutePath,
    pub current: RoutePath,
    pub state: FailoverState,
    pub healthy_streak: u32,
    pub degraded: bool,
}

impl FlowState {
    pub fn new(id: impl Into<String>, primary: RoutePath, dest_region: impl Into<String>) -> Self {
        let ingress = primary.hops.first().cloned().unwrap_or_default();
        Self {
            id: id.into(),
            ingress,
            dest_region: dest_region.into(),
            current: primary.clone(),
            primary,
            state: FailoverState::Primary,
            healthy_streak: 0,
            degraded: false,
        }
    }

    pub fn on_primary(&self) -> bool {
        self.current == self.primary
    }
}

/// One recorded effect of failure handling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RerouteAction {
    /// Traffic moved onto a backup path.
    Reroute { flow: String, path: Vec<String> },
    /// Reverse notification toward the ingress over the surviving hops.
    ReverseNotify { flow: String, ingress: String, reverse_hops: Vec<String> },
    /// Controller informed of the event.
    ControllerNotify { flow: String, element: FailedElement },
    /// No backup available; the flow is marked degraded.
    Degraded { flow: String },
    /// Scheduler delivered a better path while on backup.
    Improve { flow: String, path: Vec<String> },
    /// Primary healthy for H probes; traffic moved back.
    Revert { flow: String },
}

/// Hops that survive a failure: the prefix of the path strictly before the
/// failed element, reversed so it points back at the ingress.
fn surviving_reverse_hops(path: &RoutePath, element: &FailedElement) -> Vec<String> {
    let cut = match element {
        FailedElement::Node(n) => path.hops.iter().position(|h| h == n),
        FailedElement::Link { src, dst } => path
            .hops
            .windows(2)
            .position(|w| &w[0] == src && &w[1] == dst)
            .map(|i| i + 1),
    };
    let cut = cut.unwrap_or(path.hops.len());
    let mut prefix: Vec<String> = path.hops[..cut].to_vec();
    prefix.reverse();
    prefix
}

/// Handles one failure event: every affected flow moves to its first backup
/// that avoids all currently failed elements, the ingress is notified in
/// reverse, and the controller is informed. Flows without a usable backup
/// are marked degraded.
pub fn on_failure(
    element: &FailedElement,
    slot: u64,
    flows: &mut [FlowState],
    plans: &HashMap<(String, String), BackupPlan>,
    health: &HealthView,
) -> Vec<RerouteAction> {
    let mut actions = Vec::new();
    for flow in flows.iter_mut() {
        if !flow.current.uses(element) {
            continue;
        }
        let plan = plans.get(&(flow.ingress.clone(), flow.dest_region.clone()));
        let backup = plan.and_then(|p| p.backups.iter().find(|b| b.healthy(health)));
        match backup {
            Some(path) => {
                let reverse = surviving_reverse_hops(&flow.current, element);
                flow.current = path.clone();
                flow.state = FailoverState::OnBackup { since_slot: slot };
                flow.healthy_streak = 0;
                flow.degraded = false;
                actions.push(RerouteAction::Reroute {
                    flow: flow.id.clone(),
                    path: path.hops.clone(),
                });
                actions.push(RerouteAction::ReverseNotify {
                    flow: flow.id.clone(),
                    ingress: flow.ingress.clone(),
                    reverse_hops: reverse,
                });
                actions.push(RerouteAction::ControllerNotify {
                    flow: flow.id.clone(),
                    element: element.clone(),
                });
            }
            None => {
                flow.degraded = true;
                actions.push(RerouteAction::Degraded { flow: flow.id.clone() });
            }
        }
    }
    actions
}

/// Scheduler handed the flow a better path while it is on backup.
pub fn on_better_path(flow: &mut FlowState, path: RoutePath, slot: u64) -> Option<RerouteAction> {
    match flow.state {
        FailoverState::OnBackup { .. } if path != flow.current => {
            flow.current = path.clone();
            flow.state = FailoverState::OnBackup { since_slot: slot };
            Some(RerouteAction::Improve { flow: flow.id.clone(), path: path.hops })
        }
        _ => None,
    }
}

/// One probe observation of the flow's primary path. After `revert_after`
/// consecutive healthy probes the flow returns to its primary; any
/// unhealthy probe resets the streak.
pub fn on_probe(
    flow: &mut FlowState,
    primary_healthy: bool,
    slot: u64,
    revert_after: u32,
) -> Option<RerouteAction> {
    if !matches!(flow.state, FailoverState::OnBackup { .. }) {
        return None;
    }
    if !primary_healthy {
        flow.healthy_streak = 0;
        return None;
    }
    flow.healthy_streak += 1;
    if flow.healthy_streak >= revert_after {
        flow.current = flow.primary.clone();
        flow.state = FailoverState::Reverted { since_slot: slot };
        flow.healthy_streak = 0;
        Some(RerouteAction::Revert { flow: flow.id.clone() })
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NodeSpec, TopoArc};
    use crate::telemetry::{compress, PartitionParams};

    fn topo(nodes: &[(&str, &str)], arcs: &[(&str, &str, f64)]) -> Topology {
        Topology {
            nodes: nodes.iter().map(|(id, region)| {
                let mut n = NodeSpec::new(*id, 8, *region);
                n.tier = "tier2".into();
                n
            }).collect(),
            arcs: arcs.iter().map(|(s, d, l)| TopoArc::new(*s, *d, *l)).collect(),
            source: None,
            sink: None,
        }
    }

    fn empty_digest() -> Digest {
        compress(&[], &PartitionParams::default())
    }

    fn ctx<'a>(topo: &'a Topology, digest: &'a Digest, primary: Option<&str>) -> BackupContext<'a> {
        BackupContext {
            topo,
            digest,
            theta_l: 500.0,
            load_threshold: 0.5,
            traffic_share: HashMap::new(),
            primary_next_hop: primary.map(String::from),
        }
    }

    fn diamond() -> Topology {
        topo(
            &[("s", "west"), ("a", "mid"), ("b", "mid"), ("t", "east")],
            &[("s", "a", 10.0), ("s", "b", 20.0), ("a", "t", 10.0), ("b", "t", 20.0)],
        )
    }

    #[test]
    fn diamond_backup_goes_around_the_primary() {
        let t = diamond();
        let d = empty_digest();
        let plan = compute_backups(&ctx(&t, &d, Some("a")), "s", "east", 3).unwrap();
        assert_eq!(plan.backups.len(), 1);
        assert_eq!(plan.backups[0].hops, vec!["s", "b", "t"]);
    }

    #[test]
    fn latency_bound_can_exhaust_backups() {
        let t = diamond();
        let d = empty_digest();
        let mut c = ctx(&t, &d, Some("a"));
        c.theta_l = 25.0; // s->b->t needs 40
        let err = compute_backups(&c, "s", "east", 3).unwrap_err();
        assert_eq!(
            err,
            ResilienceError::NoBackup { node: "s".into(), dest_region: "east".into() }
        );
    }

    #[test]
    fn overloaded_next_hop_is_excluded() {
        let t = diamond();
        let d = empty_digest();
        let mut c = ctx(&t, &d, Some("a"));
        c.traffic_share.insert("b".into(), 0.8);
        assert!(compute_backups(&c, "s", "east", 3).is_err());
        c.traffic_share.insert("b".into(), 0.4);
        assert!(compute_backups(&c, "s", "east", 3).is_ok());
    }

    #[test]
    fn mesh_backups_never_share_the_primary_first_hop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut nodes = vec![("src".to_string(), "west".to_string())];
        for i in 0..7 {
            nodes.push((format!("m{i}"), "mid".into()));
        }
        nodes.push(("d0".into(), "east".into()));
        nodes.push(("d1".into(), "east".into()));
        let mut arcs = Vec::new();
        for (a, _) in &nodes {
            for (b, _) in &nodes {
                if a != b && rng.gen_bool(0.5) {
                    arcs.push(TopoArc::new(a.clone(), b.clone(), rng.gen_range(5.0..50.0)));
                }
            }
        }
        let t = Topology {
            nodes: nodes
                .iter()
                .map(|(id, r)| NodeSpec::new(id.clone(), 8, r.clone()))
                .collect(),
            arcs,
            source: None,
            sink: None,
        };
        let d = empty_digest();
        let primary = "m0";
        let c = ctx(&t, &d, Some(primary));
        if let Ok(plan) = compute_backups(&c, "src", "east", 4) {
            for b in &plan.backups {
                assert_eq!(b.hops[0], "src");
                assert_ne!(b.first_hop(), Some(primary));
                assert!(b.latency_feasible_for_test(&t, c.theta_l));
            }
        }
    }

    impl RoutePath {
        /// Test helper: recompute latency straight from the topology.
        fn latency_feasible_for_test(&self, t: &Topology, bound: f64) -> bool {
            let mut total = 0.0;
            for w in self.hops.windows(2) {
                let arc = t
                    .arcs
                    .iter()
                    .find(|a| a.src == w[0] && a.dst == w[1])
                    .expect("path uses topology arcs");
                total += arc.latency_ms;
            }
            total <= bound + 1e-9
        }
    }

    fn flow_over(path: &[&str]) -> FlowState {
        FlowState::new("f1", RoutePath::new(path.iter().map(|s| s.to_string()).collect()), "east")
    }

    fn plan_with(backups: &[&[&str]]) -> HashMap<(String, String), BackupPlan> {
        let mut m = HashMap::new();
        m.insert(
            ("s".to_string(), "east".to_string()),
            BackupPlan {
                node: "s".into(),
                dest_region: "east".into(),
                backups: backups
                    .iter()
                    .map(|b| RoutePath::new(b.iter().map(|s| s.to_string()).collect()))
                    .collect(),
            },
        );
        m
    }

    #[test]
    fn unused_link_failure_produces_no_actions() {
        let mut flows = vec![flow_over(&["s", "a", "t"])];
        let mut health = HealthView::default();
        let element = FailedElement::Link { src: "x".into(), dst: "y".into() };
        health.fail(&element);
        let actions = on_failure(&element, 3, &mut flows, &plan_with(&[&["s", "b", "t"]]), &health);
        assert!(actions.is_empty());
        assert!(flows[0].on_primary());
    }

    #[test]
    fn failure_triggers_reroute_notify_and_controller_event() {
        let mut flows = vec![flow_over(&["s", "a", "t"])];
        let plans = plan_with(&[&["s", "b", "t"]]);
        let mut health = HealthView::default();
        let element = FailedElement::Node("a".into());
        health.fail(&element);
        let actions = on_failure(&element, 7, &mut flows, &plans, &health);
        assert_eq!(actions.len(), 3);
        assert!(matches!(&actions[0], RerouteAction::Reroute { path, .. } if path == &vec!["s".to_string(), "b".into(), "t".into()]));
        assert!(matches!(&actions[1], RerouteAction::ReverseNotify { reverse_hops, .. } if reverse_hops == &vec!["s".to_string()]));
        assert!(matches!(&actions[2], RerouteAction::ControllerNotify { .. }));
        assert_eq!(flows[0].state, FailoverState::OnBackup { since_slot: 7 });
    }

    #[test]
    fn double_failure_falls_through_to_the_second_backup() {
        let mut flows = vec![flow_over(&["s", "a", "t"])];
        let plans = plan_with(&[&["s", "b", "t"], &["s", "c", "t"]]);
        let mut health = HealthView::default();
        // Primary and first backup fail simultaneously.
        let e1 = FailedElement::Node("a".into());
        let e2 = FailedElement::Node("b".into());
        health.fail(&e1);
        health.fail(&e2);
        let actions = on_failure(&e1, 1, &mut flows, &plans, &health);
        assert!(matches!(&actions[0], RerouteAction::Reroute { path, .. } if path[1] == "c"));
    }

    #[test]
    fn no_backup_marks_the_flow_degraded() {
        let mut flows = vec![flow_over(&["s", "a", "t"])];
        let plans = plan_with(&[&["s", "b", "t"]]);
        let mut health = HealthView::default();
        let e1 = FailedElement::Node("a".into());
        let e2 = FailedElement::Node("b".into());
        health.fail(&e1);
        health.fail(&e2);
        let actions = on_failure(&e1, 1, &mut flows, &plans, &health);
        assert_eq!(actions, vec![RerouteAction::Degraded { flow: "f1".into() }]);
        assert!(flows[0].degraded);
    }

    #[test]
    fn better_path_applies_only_while_on_backup() {
        let mut flow = flow_over(&["s", "a", "t"]);
        let better = RoutePath::new(vec!["s".into(), "c".into(), "t".into()]);
        assert!(on_better_path(&mut flow, better.clone(), 2).is_none());
        flow.state = FailoverState::OnBackup { since_slot: 1 };
        let action = on_better_path(&mut flow, better.clone(), 2);
        assert!(matches!(action, Some(RerouteAction::Improve { .. })));
        assert_eq!(flow.current, better);
    }

    #[test]
    fn revert_waits_for_h_consecutive_healthy_probes() {
        let mut flow = flow_over(&["s", "a", "t"]);
        flow.state = FailoverState::OnBackup { since_slot: 0 };
        flow.current = RoutePath::new(vec!["s".into(), "b".into(), "t".into()]);
        assert!(on_probe(&mut flow, true, 1, 3).is_none());
        assert!(on_probe(&mut flow, true, 2, 3).is_none());
        // An unhealthy probe resets the streak.
        assert!(on_probe(&mut flow, false, 3, 3).is_none());
        assert!(on_probe(&mut flow, true, 4, 3).is_none());
        assert!(on_probe(&mut flow, true, 5, 3).is_none());
        let action = on_probe(&mut flow, true, 6, 3);
        assert!(matches!(action, Some(RerouteAction::Revert { .. })));
        assert!(flow.on_primary());
        assert_eq!(flow.state, FailoverState::Reverted { since_slot: 6 });
    }

    #[test]
    fn oscillating_health_never_reverts() {
        let mut flow = flow_over(&["s", "a", "t"]);
        flow.state = FailoverState::OnBackup { since_slot: 0 };
        flow.current = RoutePath::new(vec!["s".into(), "b".into(), "t".into()]);
        for slot in 0..50 {
            let healthy = slot % 3 != 2; // never 3 healthy in a row
            assert!(on_probe(&mut flow, healthy, slot, 3).is_none());
        }
        assert!(!flow.on_primary());
    }

    #[test]
    fn surviving_hops_stop_at_the_failure_point() {
        let path = RoutePath::new(vec!["s".into(), "a".into(), "b".into(), "t".into()]);
        let rev = surviving_reverse_hops(&path, &FailedElement::Node("b".into()));
        assert_eq!(rev, vec!["a".to_string(), "s".into()]);
        let rev = surviving_reverse_hops(
            &path,
            &FailedElement::Link { src: "a".into(), dst: "b".into() },
        );
        assert_eq!(rev, vec!["a".to_string(), "s".into()]);
    }
}
