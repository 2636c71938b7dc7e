//! Middle-mile router: the node-splitting transform onto a constrained
//! max-flow formulation, a latency-greedy initial solution, the carousel
//! re-growth search, a brute-force oracle for small instances, and the
//! path-diversity metrics.
//!
//! Every relay node becomes a capacity-K virtual arc so node admission
//! limits turn into edge capacities; original arcs stay unbounded. Each
//! selected path carries one unit of flow toward the requested count K.
//! All searches are deterministic: identical graph and parameters produce
//! identical solutions.

use crate::model::Topology;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MidmileError {
    #[error("topology must designate both a source and a sink")]
    MissingTerminals,
    #[error("instance too large for exhaustive search: {vertices} vertices (cap {cap})")]
    TooLarge { vertices: usize, cap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArcKind {
    /// Arc present in the input topology; unbounded capacity.
    Original,
    /// Node-split arc carrying a relay node's admission limit.
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfpcArc {
    pub src: usize,
    pub dst: usize,
    /// `None` is unbounded (original arcs); virtual arcs carry K.
    pub capacity: Option<u32>,
    pub latency_ms: f64,
    pub kind: ArcKind,
}

impl MfpcArc {
    /// Units of flow admitted on this arc: `floor(theta_a * u)`, unbounded
    /// arcs admit everything.
    pub fn admission_cap(&self, theta_a: f64) -> u32 {
        match self.capacity {
            None => u32::MAX,
            Some(u) => (theta_a * f64::from(u) + 1e-9).floor() as u32,
        }
    }
}

/// The transformed routing instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfpcGraph {
    /// Vertex labels; relay node `n` splits into `n.in` / `n.out`.
    pub vertices: Vec<String>,
    pub source: usize,
    pub sink: usize,
    pub arcs: Vec<MfpcArc>,
    /// Requested path count; the source's input flow.
    pub k: u32,
    /// Admission threshold in [0, 1].
    pub theta_a: f64,
    /// Per-path latency bound, ms.
    pub theta_l: f64,
}

impl MfpcGraph {
    fn out_arcs(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (i, a) in self.arcs.iter().enumerate() {
            adj[a.src].push(i);
        }
        adj
    }
}

/// One selected forwarding path, as arc indices into the graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Path {
    pub arcs: Vec<usize>,
}

impl Path {
    pub fn latency_ms(&self, g: &MfpcGraph) -> f64 {
        self.arcs.iter().map(|&i| g.arcs[i].latency_ms).sum()
    }

    /// Vertex labels along the path, source to sink.
    pub fn vertex_route(&self, g: &MfpcGraph) -> Vec<String> {
        let mut out = Vec::with_capacity(self.arcs.len() + 1);
        if let Some(&first) = self.arcs.first() {
            out.push(g.vertices[g.arcs[first].src].clone());
        }
        for &i in &self.arcs {
            out.push(g.vertices[g.arcs[i].dst].clone());
        }
        out
    }
}

/// A routing solution: ordered paths (oldest first), their generation
/// frequencies, and the flow value F = number of paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSolution {
    pub paths: Vec<Path>,
    /// How often each path's pattern had been generated when the solution
    /// was captured.
    pub frequencies: Vec<u32>,
    pub flow: u32,
}

impl PathSolution {
    pub fn empty() -> Self {
        Self { paths: Vec::new(), frequencies: Vec::new(), flow: 0 }
    }

    fn from_paths(paths: Vec<Path>, frequencies: Vec<u32>) -> Self {
        let flow = paths.len() as u32;
        Self { paths, frequencies, flow }
    }

    pub fn max_latency_ms(&self, g: &MfpcGraph) -> f64 {
        self.paths.iter().map(|p| p.latency_ms(g)).fold(0.0, f64::max)
    }

    pub fn objective(&self, g: &MfpcGraph) -> Objective {
        let (_, cos_sim) = path_diversity(&self.paths);
        Objective { flow: self.flow, cos_sim, max_latency_ms: self.max_latency_ms(g) }
    }
}

/// Best-tracking objective: flow first, then lower mean cosine similarity,
/// then lower maximum latency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub flow: u32,
    pub cos_sim: f64,
    pub max_latency_ms: f64,
}

impl Objective {
    /// True when `self` is at least as good as `other`.
    pub fn at_least(&self, other: &Objective) -> bool {
        if self.flow != other.flow {
            return self.flow > other.flow;
        }
        if (self.cos_sim - other.cos_sim).abs() > 1e-12 {
            return self.cos_sim < other.cos_sim;
        }
        self.max_latency_ms <= other.max_latency_ms + 1e-12
    }
}

/// Carousel parameters: `alpha` scales the iteration count, `beta` is the
/// fraction of newest paths removed before iterating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarouselParams {
    pub alpha: u32,
    pub beta: f64,
}

impl Default for CarouselParams {
    fn default() -> Self {
        Self { alpha: 2, beta: 0.7 }
    }
}

/// Number of newest paths the carousel removes up front.
pub fn removed_path_count(beta: f64, solution_len: usize) -> usize {
    ((beta * solution_len as f64) + 1e-9).floor() as usize
}

/// Splits every relay node into a virtual arc and remaps the original arcs.
pub fn transform(topo: &Topology, k: u32, theta_a: f64, theta_l: f64) -> Result<MfpcGraph, MidmileError> {
    let (Some(src_id), Some(sink_id)) = (&topo.source, &topo.sink) else {
        return Err(MidmileError::MissingTerminals);
    };
    if topo.node(src_id).is_none() || topo.node(sink_id).is_none() {
        return Err(MidmileError::MissingTerminals);
    }
    let mut vertices = Vec::with_capacity(2 * topo.nodes.len());
    let mut in_vertex = HashMap::new();
    let mut out_vertex = HashMap::new();
    let mut arcs = Vec::new();
    vertices.push(src_id.clone());
    vertices.push(sink_id.clone());
    for n in &topo.nodes {
        if &n.id == src_id || &n.id == sink_id {
            continue;
        }
        let i_k = vertices.len();
        vertices.push(format!("{}.in", n.id));
        let j_k = vertices.len();
        vertices.push(format!("{}.out", n.id));
        in_vertex.insert(n.id.clone(), i_k);
        out_vertex.insert(n.id.clone(), j_k);
        arcs.push(MfpcArc {
            src: i_k,
            dst: j_k,
            capacity: Some(k),
            // Per-node processing latency is zero unless a topology supplies
            // one; arc latencies dominate.
            latency_ms: 0.0,
            kind: ArcKind::Virtual,
        });
    }
    let map_src = |id: &str| -> usize {
        if id == src_id { 0 } else if id == sink_id { 1 } else { out_vertex[id] }
    };
    let map_dst = |id: &str| -> usize {
        if id == src_id { 0 } else if id == sink_id { 1 } else { in_vertex[id] }
    };
    for a in &topo.arcs {
        arcs.push(MfpcArc {
            src: map_src(&a.src),
            dst: map_dst(&a.dst),
            capacity: None,
            latency_ms: a.latency_ms,
            kind: ArcKind::Original,
        });
    }
    Ok(MfpcGraph { vertices, source: 0, sink: 1, arcs, k, theta_a, theta_l })
}

#[derive(PartialEq)]
struct HeapEntry {
    cost: f64,
    vertex: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed for a min-heap; vertex index breaks cost ties so pops are
        // deterministic.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-latency s->t path over arcs with residual capacity, skipping
/// banned arcs and pruning at the latency bound.
fn shortest_feasible_path(
    g: &MfpcGraph,
    adj: &[Vec<usize>],
    residual: &[u32],
    banned: &HashSet<usize>,
) -> Option<Path> {
    let n = g.vertices.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = std::collections::BinaryHeap::new();
    dist[g.source] = 0.0;
    heap.push(HeapEntry { cost: 0.0, vertex: g.source });
    while let Some(HeapEntry { cost, vertex }) = heap.pop() {
        if done[vertex] {
            continue;
        }
        done[vertex] = true;
        if vertex == g.sink {
            break;
        }
        for &ai in &adj[vertex] {
            if residual[ai] == 0 || banned.contains(&ai) {
                continue;
            }
            let a = &g.arcs[ai];
            let nd = cost + a.latency_ms;
            if nd > g.theta_l + 1e-9 {
                continue;
            }
            if nd < dist[a.dst] {
                dist[a.dst] = nd;
                parent[a.dst] = Some(ai);
                heap.push(HeapEntry { cost: nd, vertex: a.dst });
            }
        }
    }
    if !dist[g.sink].is_finite() {
        return None;
    }
    let mut arcs = Vec::new();
    let mut v = g.sink;
    while v != g.source {
        let ai = parent[v].expect("parent chain reaches the source");
        arcs.push(ai);
        v = g.arcs[ai].src;
    }
    arcs.reverse();
    Some(Path { arcs })
}

fn admission_caps(g: &MfpcGraph) -> Vec<u32> {
    g.arcs.iter().map(|a| a.admission_cap(g.theta_a)).collect()
}

fn consume(residual: &mut [u32], path: &Path) {
    for &ai in &path.arcs {
        if residual[ai] != u32::MAX {
            residual[ai] -= 1;
        }
    }
}

fn restore(residual: &mut [u32], caps: &[u32], path: &Path) {
    for &ai in &path.arcs {
        if residual[ai] != u32::MAX {
            residual[ai] = (residual[ai] + 1).min(caps[ai]);
        }
    }
}

/// Repeatedly takes the minimum-latency feasible residual path until no
/// feasible path remains or the flow reaches K. Every path gets frequency 1.
pub fn greedy_initial(g: &MfpcGraph) -> PathSolution {
    let adj = g.out_arcs();
    let mut residual = admission_caps(g);
    let banned = HashSet::new();
    let mut paths = Vec::new();
    while (paths.len() as u32) < g.k {
        let Some(p) = shortest_feasible_path(g, &adj, &residual, &banned) else { break };
        consume(&mut residual, &p);
        paths.push(p);
    }
    let n = paths.len();
    PathSolution::from_paths(paths, vec![1; n])
}

/// Distinct-path catalog tracking generation frequencies.
#[derive(Default)]
struct PathCatalog {
    index: HashMap<Vec<usize>, usize>,
    entries: Vec<(Path, u32)>,
}

impl PathCatalog {
    fn bump(&mut self, path: &Path) -> u32 {
        match self.index.get(&path.arcs) {
            Some(&i) => {
                self.entries[i].1 += 1;
                self.entries[i].1
            }
            None => {
                self.index.insert(path.arcs.clone(), self.entries.len());
                self.entries.push((path.clone(), 1));
                1
            }
        }
    }

    fn freq(&self, path: &Path) -> u32 {
        self.index.get(&path.arcs).map_or(0, |&i| self.entries[i].1)
    }

    /// Highest-frequency path; ties prefer the earliest-generated entry.
    fn most_frequent(&self) -> Option<&Path> {
        let mut best: Option<(&Path, u32)> = None;
        for (p, f) in &self.entries {
            match best {
                Some((_, bf)) if *f <= bf => {}
                _ => best = Some((p, *f)),
            }
        }
        best.map(|(p, _)| p)
    }
}

/// Carousel search: drop the newest beta fraction of the greedy solution,
/// then for alpha * |S| rounds retire the oldest path, ban its first arc and
/// every arc of the most frequent path for the round, and re-grow; the best
/// solution seen by the (flow, diversity, latency) objective is returned.
pub fn carousel_greedy(g: &MfpcGraph, params: &CarouselParams) -> PathSolution {
    assert!(params.alpha >= 1, "alpha is a positive iteration multiplier");
    assert!(params.beta > 0.0 && params.beta < 1.0, "beta is a fraction in (0, 1)");
    let initial = greedy_initial(g);
    if initial.paths.is_empty() {
        return initial;
    }
    let adj = g.out_arcs();
    let caps = admission_caps(g);
    let mut residual = caps.clone();
    let mut catalog = PathCatalog::default();
    for p in &initial.paths {
        consume(&mut residual, p);
        if catalog.freq(p) == 0 {
            catalog.bump(p);
        }
    }

    let mut best = initial.clone();
    let mut best_z = initial.objective(g);

    let mut current: VecDeque<Path> = initial.paths.iter().cloned().collect();
    for _ in 0..removed_path_count(params.beta, initial.paths.len()) {
        if let Some(p) = current.pop_back() {
            restore(&mut residual, &caps, &p);
        }
    }

    let rounds = params.alpha as usize * initial.paths.len();
    for _ in 0..rounds {
        let mut banned = HashSet::new();
        if let Some(oldest) = current.pop_front() {
            restore(&mut residual, &caps, &oldest);
            if let Some(&first) = oldest.arcs.first() {
                banned.insert(first);
            }
        }
        if let Some(frequent) = catalog.most_frequent() {
            banned.extend(frequent.arcs.iter().copied());
        }
        while (current.len() as u32) < g.k {
            let Some(p) = shortest_feasible_path(g, &adj, &residual, &banned) else { break };
            consume(&mut residual, &p);
            catalog.bump(&p);
            current.push_back(p);
        }
        let candidate = PathSolution::from_paths(
            current.iter().cloned().collect(),
            current.iter().map(|p| catalog.freq(p).max(1)).collect(),
        );
        let z = candidate.objective(g);
        if z.at_least(&best_z) {
            best = candidate;
            best_z = z;
        }
    }
    best
}

const BRUTE_FORCE_VERTEX_CAP: usize = 14;
const BRUTE_FORCE_PATH_CAP: usize = 4096;

/// Exhaustive maximizer of the flow over multisets of simple feasible paths,
/// honoring per-arc admission and the latency bound. Only for small
/// transformed graphs.
pub fn brute_force_mfpc(g: &MfpcGraph) -> Result<PathSolution, MidmileError> {
    if g.vertices.len() > BRUTE_FORCE_VERTEX_CAP {
        return Err(MidmileError::TooLarge {
            vertices: g.vertices.len(),
            cap: BRUTE_FORCE_VERTEX_CAP,
        });
    }
    if g.k == 0 {
        return Ok(PathSolution::empty());
    }
    let adj = g.out_arcs();
    // Enumerate all simple s->t paths within the latency bound.
    let mut all_paths: Vec<Path> = Vec::new();
    let mut stack_arcs: Vec<usize> = Vec::new();
    let mut on_path = vec![false; g.vertices.len()];
    fn dfs(
        g: &MfpcGraph,
        adj: &[Vec<usize>],
        v: usize,
        latency: f64,
        stack_arcs: &mut Vec<usize>,
        on_path: &mut Vec<bool>,
        out: &mut Vec<Path>,
    ) -> Result<(), MidmileError> {
        if v == g.sink {
            out.push(Path { arcs: stack_arcs.clone() });
            if out.len() > BRUTE_FORCE_PATH_CAP {
                return Err(MidmileError::TooLarge {
                    vertices: g.vertices.len(),
                    cap: BRUTE_FORCE_VERTEX_CAP,
                });
            }
            return Ok(());
        }
        on_path[v] = true;
        for &ai in &adj[v] {
            let a = &g.arcs[ai];
            if on_path[a.dst] || a.admission_cap(g.theta_a) == 0 {
                continue;
            }
            let nl = latency + a.latency_ms;
            if nl > g.theta_l + 1e-9 {
                continue;
            }
            stack_arcs.push(ai);
            dfs(g, adj, a.dst, nl, stack_arcs, on_path, out)?;
            stack_arcs.pop();
        }
        on_path[v] = false;
        Ok(())
    }
    dfs(g, &adj, g.source, 0.0, &mut stack_arcs, &mut on_path, &mut all_paths)?;

    // Phase 1: maximize the packed count, repetition allowed, pruned at K.
    let caps = admission_caps(g);
    let mut usage = vec![0u32; g.arcs.len()];
    let mut chosen: Vec<usize> = Vec::new();
    let mut best: Vec<usize> = Vec::new();
    fn pack(
        g: &MfpcGraph,
        all: &[Path],
        caps: &[u32],
        usage: &mut [u32],
        chosen: &mut Vec<usize>,
        best: &mut Vec<usize>,
        start: usize,
    ) {
        if chosen.len() > best.len() {
            *best = chosen.clone();
        }
        if best.len() as u32 == g.k || chosen.len() as u32 == g.k {
            return;
        }
        for pi in start..all.len() {
            let fits = all[pi]
                .arcs
                .iter()
                .all(|&ai| caps[ai] == u32::MAX || usage[ai] < caps[ai]);
            if !fits {
                continue;
            }
            for &ai in &all[pi].arcs {
                usage[ai] += 1;
            }
            chosen.push(pi);
            pack(g, all, caps, usage, chosen, best, pi);
            chosen.pop();
            for &ai in &all[pi].arcs {
                usage[ai] -= 1;
            }
            if best.len() as u32 == g.k {
                return;
            }
        }
    }
    pack(g, &all_paths, &caps, &mut usage, &mut chosen, &mut best, 0);
    let target = best.len();

    // Phase 2: among packings of maximal size, minimize the pairwise
    // similarity total. The partial total only grows, so it prunes exactly.
    if target >= 2 {
        let sets: Vec<HashSet<usize>> =
            all_paths.iter().map(|p| p.arcs.iter().copied().collect()).collect();
        let pair_sim = |a: usize, b: usize| -> f64 {
            let inter = sets[a].intersection(&sets[b]).count() as f64;
            let denom = ((sets[a].len() * sets[b].len()) as f64).sqrt();
            if denom > 0.0 { inter / denom } else { 0.0 }
        };
        #[allow(clippy::too_many_arguments)]
        fn diversify(
            g: &MfpcGraph,
            all: &[Path],
            caps: &[u32],
            pair_sim: &dyn Fn(usize, usize) -> f64,
            target: usize,
            usage: &mut [u32],
            chosen: &mut Vec<usize>,
            partial_sim: f64,
            best: &mut (Vec<usize>, f64),
            start: usize,
        ) {
            if partial_sim >= best.1 - 1e-12 && !best.0.is_empty() {
                return;
            }
            if chosen.len() == target {
                *best = (chosen.clone(), partial_sim);
                return;
            }
            // Not enough candidates left even with repetition is impossible
            // to detect cheaply; rely on the similarity prune.
            for pi in start..all.len() {
                let fits = all[pi]
                    .arcs
                    .iter()
                    .all(|&ai| caps[ai] == u32::MAX || usage[ai] < caps[ai]);
                if !fits {
                    continue;
                }
                let added: f64 = chosen.iter().map(|&c| pair_sim(c, pi)).sum();
                for &ai in &all[pi].arcs {
                    usage[ai] += 1;
                }
                chosen.push(pi);
                diversify(g, all, caps, pair_sim, target, usage, chosen, partial_sim + added, best, pi);
                chosen.pop();
                for &ai in &all[pi].arcs {
                    usage[ai] -= 1;
                }
                if best.1 == 0.0 && !best.0.is_empty() {
                    return;
                }
            }
        }
        let mut best_div: (Vec<usize>, f64) = (Vec::new(), f64::INFINITY);
        diversify(
            g,
            &all_paths,
            &caps,
            &pair_sim,
            target,
            &mut usage,
            &mut chosen,
            0.0,
            &mut best_div,
            0,
        );
        if best_div.0.len() == target {
            best = best_div.0;
        }
    }
    let paths: Vec<Path> = best.iter().map(|&i| all_paths[i].clone()).collect();
    let n = paths.len();
    Ok(PathSolution::from_paths(paths, vec![1; n]))
}

/// Path count and mean pairwise cosine similarity of the paths'
/// arc-incidence vectors. Fewer than two paths score 0.0.
pub fn path_diversity(paths: &[Path]) -> (usize, f64) {
    let count = paths.len();
    if count < 2 {
        return (count, 0.0);
    }
    let sets: Vec<HashSet<usize>> = paths.iter().map(|p| p.arcs.iter().copied().collect()).collect();
    let mut total = 0.0;
    let mut pairs = 0u32;
    for i in 0..count {
        for j in (i + 1)..count {
            let inter = sets[i].intersection(&sets[j]).count() as f64;
            let denom = ((sets[i].len() * sets[j].len()) as f64).sqrt();
            total += if denom > 0.0 { inter / denom } else { 0.0 };
            pairs += 1;
        }
    }
    (count, total / f64::from(pairs))
}

/// One evaluated grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha: u32,
    pub beta: f64,
    pub path_count: usize,
    pub cos_sim: f64,
    pub flow: u32,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub cells: Vec<GridCell>,
    pub best_alpha: u32,
    pub best_beta: f64,
    pub best: PathSolution,
    pub total_elapsed_ms: f64,
}

/// Evaluates the carousel on every (alpha, beta) cell; lexicographic best by
/// (flow, lower cosine similarity). Wall time is recorded per cell.
pub fn grid_search(g: &MfpcGraph, alphas: &[u32], betas: &[f64]) -> GridSearchResult {
    assert!(!alphas.is_empty() && !betas.is_empty(), "grid ranges must be nonempty");
    let started = std::time::Instant::now();
    let mut cells = Vec::new();
    let mut best: Option<(u32, f64, PathSolution, Objective)> = None;
    for &alpha in alphas {
        for &beta in betas {
            let t0 = std::time::Instant::now();
            let sol = carousel_greedy(g, &CarouselParams { alpha, beta });
            let elapsed_ms = t0.elapsed().as_secs_f64() * 1000.0;
            let (count, cos_sim) = path_diversity(&sol.paths);
            cells.push(GridCell { alpha, beta, path_count: count, cos_sim, flow: sol.flow, elapsed_ms });
            let z = sol.objective(g);
            let better = match &best {
                None => true,
                Some((_, _, _, bz)) => z.flow > bz.flow || (z.flow == bz.flow && z.cos_sim < bz.cos_sim),
            };
            if better {
                best = Some((alpha, beta, sol, z));
            }
        }
    }
    let (best_alpha, best_beta, best, _) = best.expect("grid has at least one cell");
    GridSearchResult {
        cells,
        best_alpha,
        best_beta,
        best,
        total_elapsed_ms: started.elapsed().as_secs_f64() * 1000.0,
    }
}

/// Independent constraint validator: re-derives flow conservation, admission
/// capacity, binary selection and per-path latency from the arc structure
/// alone. Returns human-readable violations; empty means the solution is
/// feasible.
pub fn validate_solution(g: &MfpcGraph, sol: &PathSolution) -> Vec<String> {
    let mut problems = Vec::new();
    if sol.flow != sol.paths.len() as u32 {
        problems.push(format!("flow {} != path count {}", sol.flow, sol.paths.len()));
    }
    if sol.flow > g.k {
        problems.push(format!("flow {} exceeds requested K={}", sol.flow, g.k));
    }
    let mut usage = vec![0u32; g.arcs.len()];
    for (pi, p) in sol.paths.iter().enumerate() {
        if p.arcs.is_empty() {
            problems.push(format!("path {pi} is empty"));
            continue;
        }
        let mut at = g.source;
        let mut latency = 0.0;
        let mut ok = true;
        for &ai in &p.arcs {
            let Some(a) = g.arcs.get(ai) else {
                problems.push(format!("path {pi} references unknown arc {ai}"));
                ok = false;
                break;
            };
            if a.src != at {
                problems.push(format!("path {pi} is disconnected at vertex {at}"));
                ok = false;
                break;
            }
            usage[ai] += 1;
            latency += a.latency_ms;
            at = a.dst;
        }
        if ok && at != g.sink {
            problems.push(format!("path {pi} ends at vertex {at}, not the sink"));
        }
        if latency > g.theta_l + 1e-9 {
            problems.push(format!("path {pi} latency {latency} exceeds bound {}", g.theta_l));
        }
    }
    // Admission: usage on every arc within theta_a * u (selection x_ij is 1
    // exactly on used arcs, so x is binary by construction).
    for (ai, a) in g.arcs.iter().enumerate() {
        let cap = a.admission_cap(g.theta_a);
        if usage[ai] > cap {
            problems.push(format!("arc {ai} carries {} units, admission cap {cap}", usage[ai]));
        }
    }
    // Conservation at every non-terminal vertex of the usage-derived flow.
    let mut inflow = vec![0u32; g.vertices.len()];
    let mut outflow = vec![0u32; g.vertices.len()];
    for (ai, a) in g.arcs.iter().enumerate() {
        outflow[a.src] += usage[ai];
        inflow[a.dst] += usage[ai];
    }
    for v in 0..g.vertices.len() {
        if v == g.source || v == g.sink {
            continue;
        }
        if inflow[v] != outflow[v] {
            problems.push(format!(
                "conservation fails at vertex {v}: in {} out {}",
                inflow[v], outflow[v]
            ));
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NodeSpec, TopoArc};
    use proptest::prelude::*;

    fn topo(nodes: &[&str], arcs: &[(&str, &str, f64)], source: &str, sink: &str) -> Topology {
        Topology {
            nodes: nodes.iter().map(|n| NodeSpec::new(*n, 8, "r")).collect(),
            arcs: arcs.iter().map(|(s, d, l)| TopoArc::new(*s, *d, *l)).collect(),
            source: Some(source.into()),
            sink: Some(sink.into()),
        }
    }

    fn diamond() -> Topology {
        topo(
            &["s", "a", "b", "t"],
            &[("s", "a", 10.0), ("s", "b", 10.0), ("a", "t", 10.0), ("b", "t", 10.0)],
            "s",
            "t",
        )
    }

    #[test]
    fn line_graph_transform_splits_the_relay() {
        let t = topo(&["s", "m", "t"], &[("s", "m", 5.0), ("m", "t", 7.0)], "s", "t");
        let g = transform(&t, 3, 1.0, 100.0).unwrap();
        assert_eq!(g.vertices.len(), 4); // 2*(3-2)+2
        let virt: Vec<_> = g.arcs.iter().filter(|a| a.kind == ArcKind::Virtual).collect();
        assert_eq!(virt.len(), 1);
        assert_eq!(virt[0].capacity, Some(3));
        assert_eq!(g.arcs.len(), 3); // 2 original + 1 virtual
    }

    #[test]
    fn transform_arc_count_matches_the_formula() {
        let t = diamond();
        let g = transform(&t, 2, 1.0, 100.0).unwrap();
        assert_eq!(g.arcs.len(), t.arcs.len() + (t.nodes.len() - 2));
        assert_eq!(g.vertices.len(), 2 * (t.nodes.len() - 2) + 2);
    }

    #[test]
    fn missing_terminals_is_an_error() {
        let mut t = diamond();
        t.sink = None;
        assert_eq!(transform(&t, 2, 1.0, 100.0).unwrap_err(), MidmileError::MissingTerminals);
        let mut t2 = diamond();
        t2.source = Some("nope".into());
        assert_eq!(transform(&t2, 2, 1.0, 100.0).unwrap_err(), MidmileError::MissingTerminals);
    }

    #[test]
    fn diamond_has_two_disjoint_paths() {
        let g = transform(&diamond(), 2, 1.0, 100.0).unwrap();
        let sol = brute_force_mfpc(&g).unwrap();
        assert_eq!(sol.flow, 2);
        let (_, cos) = path_diversity(&sol.paths);
        assert_eq!(cos, 0.0);
    }

    #[test]
    fn greedy_matches_brute_force_on_the_diamond() {
        let g = transform(&diamond(), 2, 1.0, 100.0).unwrap();
        let sol = greedy_initial(&g);
        assert_eq!(sol.flow, 2);
        assert!(validate_solution(&g, &sol).is_empty());
        assert_eq!(sol.frequencies, vec![1, 1]);
    }

    #[test]
    fn latency_bound_excludes_infeasible_paths() {
        let t = topo(&["s", "m", "t"], &[("s", "m", 60.0), ("m", "t", 60.0)], "s", "t");
        let g = transform(&t, 2, 1.0, 100.0).unwrap();
        let sol = greedy_initial(&g);
        assert_eq!(sol.flow, 0);
        assert!(sol.paths.is_empty());
        let brute = brute_force_mfpc(&g).unwrap();
        assert_eq!(brute.flow, 0);
    }

    #[test]
    fn bottleneck_virtual_arc_caps_the_flow() {
        // Hand-built: s -> (m.in -> m.out cap 1) -> t with K=3, theta_a = 1.
        let g = MfpcGraph {
            vertices: vec!["s".into(), "t".into(), "m.in".into(), "m.out".into()],
            source: 0,
            sink: 1,
            arcs: vec![
                MfpcArc { src: 2, dst: 3, capacity: Some(1), latency_ms: 0.0, kind: ArcKind::Virtual },
                MfpcArc { src: 0, dst: 2, capacity: None, latency_ms: 5.0, kind: ArcKind::Original },
                MfpcArc { src: 3, dst: 1, capacity: None, latency_ms: 5.0, kind: ArcKind::Original },
            ],
            k: 3,
            theta_a: 1.0,
            theta_l: 100.0,
        };
        let sol = brute_force_mfpc(&g).unwrap();
        assert_eq!(sol.flow, 1);
    }

    #[test]
    fn zero_k_yields_the_empty_solution() {
        let g = transform(&diamond(), 0, 1.0, 100.0).unwrap();
        assert_eq!(brute_force_mfpc(&g).unwrap(), PathSolution::empty());
        assert_eq!(greedy_initial(&g).flow, 0);
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let nodes: Vec<String> = (0..9).map(|i| format!("n{i}")).collect();
        let names: Vec<&str> = nodes.iter().map(String::as_str).collect();
        let t = topo(&names, &[("n0", "n8", 1.0)], "n0", "n8");
        let g = transform(&t, 1, 1.0, 10.0).unwrap();
        assert!(matches!(brute_force_mfpc(&g), Err(MidmileError::TooLarge { .. })));
    }

    #[test]
    fn single_feasible_path_keeps_the_initial_solution() {
        let t = topo(&["s", "m", "t"], &[("s", "m", 5.0), ("m", "t", 7.0)], "s", "t");
        let g = transform(&t, 1, 1.0, 100.0).unwrap();
        let initial = greedy_initial(&g);
        let best = carousel_greedy(&g, &CarouselParams::default());
        assert_eq!(best.paths, initial.paths);
        assert_eq!(best.flow, 1);
    }

    fn eight_vertex_graph() -> MfpcGraph {
        // 3 relays between s and t plus a couple of cross links.
        let t = topo(
            &["s", "a", "b", "c", "t"],
            &[
                ("s", "a", 10.0),
                ("s", "b", 12.0),
                ("s", "c", 14.0),
                ("a", "t", 10.0),
                ("b", "t", 12.0),
                ("c", "t", 14.0),
                ("a", "b", 2.0),
                ("b", "c", 2.0),
            ],
            "s",
            "t",
        );
        transform(&t, 3, 1.0, 100.0).unwrap()
    }

    #[test]
    fn carousel_never_regresses_from_the_initial_objective() {
        let g = eight_vertex_graph();
        assert_eq!(g.vertices.len(), 8);
        let initial = greedy_initial(&g);
        let best = carousel_greedy(&g, &CarouselParams::default());
        assert!(best.objective(&g).at_least(&initial.objective(&g)));
        assert!(validate_solution(&g, &best).is_empty());
    }

    #[test]
    fn carousel_is_deterministic() {
        let g = eight_vertex_graph();
        let p = CarouselParams { alpha: 3, beta: 0.6 };
        assert_eq!(carousel_greedy(&g, &p), carousel_greedy(&g, &p));
    }

    #[test]
    fn identical_paths_have_similarity_one() {
        let p = Path { arcs: vec![0, 1, 2] };
        let (n, cos) = path_diversity(&[p.clone(), p]);
        assert_eq!(n, 2);
        assert_eq!(cos, 1.0);
    }

    #[test]
    fn disjoint_paths_have_similarity_zero() {
        let (n, cos) = path_diversity(&[Path { arcs: vec![0, 1] }, Path { arcs: vec![2, 3] }]);
        assert_eq!(n, 2);
        assert_eq!(cos, 0.0);
    }

    #[test]
    fn three_path_similarity_matches_hand_computation() {
        // p1 = {0, 1}, p2 = {0, 2} share one arc of two: cos = 1/2.
        // p3 = {3, 4} is disjoint from both.
        let paths = vec![
            Path { arcs: vec![0, 1] },
            Path { arcs: vec![0, 2] },
            Path { arcs: vec![3, 4] },
        ];
        let (n, cos) = path_diversity(&paths);
        assert_eq!(n, 3);
        assert!((cos - 0.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_single_path_sets_score_zero() {
        assert_eq!(path_diversity(&[]), (0, 0.0));
        assert_eq!(path_diversity(&[Path { arcs: vec![0] }]), (1, 0.0));
    }

    #[test]
    fn removal_count_follows_beta() {
        assert_eq!(removed_path_count(0.7, 10), 7);
        assert_eq!(removed_path_count(0.5, 5), 2);
        assert_eq!(removed_path_count(0.9, 1), 0);
    }

    #[test]
    fn single_cell_grid_returns_that_cell() {
        let g = eight_vertex_graph();
        let r = grid_search(&g, &[2], &[0.7]);
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.best_alpha, 2);
        assert_eq!(r.best_beta, 0.7);
    }

    #[test]
    fn validator_flags_a_broken_solution() {
        let g = eight_vertex_graph();
        let mut sol = greedy_initial(&g);
        sol.paths[0].arcs.pop(); // no longer reaches the sink
        assert!(!validate_solution(&g, &sol).is_empty());
        let mut sol2 = greedy_initial(&g);
        sol2.flow += 5;
        assert!(!validate_solution(&g, &sol2).is_empty());
    }

    fn random_instance(seed: u64) -> MfpcGraph {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let relays = rng.gen_range(2..=5usize);
        let mut nodes = vec!["s".to_string(), "t".to_string()];
        for i in 0..relays {
            nodes.push(format!("r{i}"));
        }
        let mut arcs: Vec<TopoArc> = Vec::new();
        for i in 0..relays {
            if rng.gen_bool(0.8) {
                arcs.push(TopoArc::new("s", format!("r{i}"), rng.gen_range(1.0..30.0)));
            }
            if rng.gen_bool(0.8) {
                arcs.push(TopoArc::new(format!("r{i}"), "t", rng.gen_range(1.0..30.0)));
            }
            for j in 0..relays {
                if i != j && rng.gen_bool(0.3) {
                    arcs.push(TopoArc::new(
                        format!("r{i}"),
                        format!("r{j}"),
                        rng.gen_range(1.0..20.0),
                    ));
                }
            }
        }
        let t = Topology {
            nodes: nodes.iter().map(|n| NodeSpec::new(n.clone(), 8, "r")).collect(),
            arcs,
            source: Some("s".into()),
            sink: Some("t".into()),
        };
        let k = rng.gen_range(1..=4);
        let theta_a = *[0.5, 1.0].get(rng.gen_range(0..2)).unwrap();
        transform(&t, k, theta_a, rng.gen_range(40.0..120.0)).unwrap()
    }

    #[test]
    fn carousel_stays_near_the_oracle_on_small_instances() {
        let mut exact = 0;
        for seed in 0..10u64 {
            let g = random_instance(seed);
            let brute = brute_force_mfpc(&g).unwrap();
            let sol = carousel_greedy(&g, &CarouselParams::default());
            assert!(validate_solution(&g, &sol).is_empty(), "seed {seed}");
            assert!(
                f64::from(sol.flow) >= 0.9 * f64::from(brute.flow),
                "seed {seed}: carousel {} vs oracle {}",
                sol.flow,
                brute.flow
            );
            if sol.flow == brute.flow {
                exact += 1;
            }
        }
        assert!(exact >= 8, "exact match on only {exact}/10 instances");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn carousel_solutions_always_validate(seed in 0u64..500) {
            let g = random_instance(seed);
            let sol = carousel_greedy(&g, &CarouselParams { alpha: 1, beta: 0.5 });
            prop_assert!(validate_solution(&g, &sol).is_empty());
            prop_assert!(sol.flow <= g.k);
        }
    }
}
