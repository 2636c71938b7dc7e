//! Operator command line for the overlay accelerator stack.
//!
//! Exit codes: 0 success, 1 configuration error, 2 invariant violation.
//! `GA_LOG=debug` turns on verbose progress messages on stderr.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ga_core::lastmile::{bpr_schedule, compute_dpp, CpuModel, DppParams, NodeSchedState, VirtualQueue};
use ga_core::midmile::{
    brute_force_mfpc, carousel_greedy, grid_search, path_diversity, transform, validate_solution,
    CarouselParams, MidmileError, PathSolution,
};
use ga_core::model::Topology;
use ga_core::sim::{calibrated_model_8c16g, run_scenario, scenarios, Scenario, SimError};
use ga_core::srheader;
use ga_core::telemetry::{
    compress, digest_to_bytes, digest_to_csv, estimate, samples_to_bytes, synthetic_mesh,
    PartitionParams,
};
use ga_core::tuner::{arm_space, compute_reward, LinUcbState, RewardNorm};
use ga_core::tunnel::TunnelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ga", version, about = "Overlay accelerator toolkit", long_about = None)]
struct Cli {
    /// JSON file with default values for subcommand options.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for machine-readable artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the fully resolved configuration before running.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (or the bundled `quickstart`) and write metrics.
    Simulate(SimulateArgs),
    /// Middle-mile routing on a topology file, single cell or full grid.
    RouteMidmile(RouteArgs),
    /// One last-mile scheduling round over a node-state file.
    ScheduleLastmile(ScheduleArgs),
    /// Hourly compute and bandwidth costs for a deployment file.
    CostReport(CostArgs),
    /// Round-trip a codec corpus and print throughput.
    BenchCodec(BenchArgs),
    /// Run the parameter bandit against a synthetic tunnel.
    Tune(TuneArgs),
    /// Telemetry compression ratio report on a synthetic mesh.
    CompressStats(CompressArgs),
}

fn verbose() -> bool {
    std::env::var("GA_LOG").map(|v| v == "debug" || v == "trace").unwrap_or(false)
}

fn log(msg: impl AsRef<str>) {
    if verbose() {
        eprintln!("[ga] {}", msg.as_ref());
    }
}

/// Optional JSON config: a flat map consulted for any option the flag did
/// not set. Flag > config > default.
#[derive(Default)]
struct FileConfig(serde_json::Map<String, serde_json::Value>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                let map = serde_json::from_str(&raw)
                    .with_context(|| format!("config {} is not a JSON object", p.display()))?;
                Ok(Self(map))
            }
        }
    }

    fn f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(|v| v.as_f64())
    }

    fn u64(&self, key: &str) -> Option<u64> {
        self.0.get(key).and_then(|v| v.as_u64())
    }
}

fn resolve<T: Copy>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = FileConfig::load(cli.config.as_deref())?;
    let seed = resolve(cli.seed, config.u64("seed"), 42);
    let out = cli.out.clone();
    match &cli.command {
        Command::Simulate(args) => simulate(args, seed, out, cli.print_config),
        Command::RouteMidmile(args) => route_midmile(args, &config, seed, out, cli.print_config),
        Command::ScheduleLastmile(args) => schedule_lastmile(args, out, cli.print_config),
        Command::CostReport(args) => cost_report(args, cli.print_config),
        Command::BenchCodec(args) => bench_codec(args, seed, cli.print_config),
        Command::Tune(args) => tune(args, &config, seed, out, cli.print_config),
        Command::CompressStats(args) => compress_stats(args, &config, seed, out, cli.print_config),
    }
}

fn ensure_out(out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON file, or the literal `quickstart`.
    scenario: String,
}

fn simulate(args: &SimulateArgs, seed: u64, out: Option<PathBuf>, print_config: bool) -> Result<ExitCode> {
    let mut scenario: Scenario = if args.scenario == "quickstart" {
        scenarios::quickstart(seed)
    } else {
        let raw = match std::fs::read_to_string(&args.scenario) {
            Ok(raw) => raw,
            Err(e) => {
                eprintln!("error: cannot read scenario {}: {e}", args.scenario);
                return Ok(ExitCode::from(1));
            }
        };
        match Scenario::from_json(&raw) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: scenario {} does not parse: {e}", args.scenario);
                return Ok(ExitCode::from(1));
            }
        }
    };
    scenario.seed = seed;
    if print_config {
        println!("{}", scenario.to_json());
    }
    log(format!("running scenario {} for {} slots", scenario.name, scenario.duration_slots));
    let metrics = match run_scenario(&scenario) {
        Ok(m) => m,
        Err(SimError::ConfigError { location, message }) => {
            eprintln!("error: config error at {location}: {message}");
            return Ok(ExitCode::from(1));
        }
    };
    let dir = ensure_out(&out)?;
    std::fs::write(dir.join("nodes.csv"), metrics.nodes_csv())?;
    std::fs::write(dir.join("accounting.csv"), metrics.accounting_csv())?;
    std::fs::write(dir.join("routing.csv"), metrics.routing_csv())?;
    std::fs::write(dir.join("latency.csv"), metrics.latency_csv())?;
    std::fs::write(dir.join("events.jsonl"), metrics.events_jsonl())?;
    let summary = metrics.summary();
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "scenario {}: mean cpu {:.3}, p50 latency {:.1} ms, p95 latency {:.1} ms, max backlog {:.3}, failovers {}",
        scenario.name,
        summary.mean_cpu,
        summary.p50_latency_ms,
        summary.p95_latency_ms,
        summary.max_backlog,
        summary.failovers
    );
    if !metrics.violations.is_empty() {
        for v in &metrics.violations {
            eprintln!("violation: {v}");
        }
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct RouteArgs {
    /// Topology JSON file.
    topology: PathBuf,
    /// Requested forwarding path count.
    #[arg(long)]
    k: Option<u32>,
    /// Admission threshold in (0, 1].
    #[arg(long)]
    theta_a: Option<f64>,
    /// Per-path latency bound, ms.
    #[arg(long)]
    theta_l: Option<f64>,
    #[arg(long)]
    alpha: Option<u32>,
    #[arg(long)]
    beta: Option<f64>,
    /// Evaluate the full (alpha, beta) grid instead of one cell.
    #[arg(long)]
    grid: bool,
    /// Comma-separated alpha values for --grid.
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<u32>,
    /// Comma-separated beta values for --grid.
    #[arg(long, value_delimiter = ',')]
    betas: Vec<f64>,
    /// Check the result against the exhaustive oracle (small graphs only).
    #[arg(long)]
    verify: bool,
}

#[derive(Serialize)]
struct SolutionFile {
    flow: u32,
    path_count: usize,
    cos_sim: f64,
    paths: Vec<SolutionPath>,
}

#[derive(Serialize)]
struct SolutionPath {
    route: Vec<String>,
    latency_ms: f64,
    frequency: u32,
}

fn solution_file(g: &ga_core::midmile::MfpcGraph, sol: &PathSolution) -> SolutionFile {
    let (count, cos_sim) = path_diversity(&sol.paths);
    SolutionFile {
        flow: sol.flow,
        path_count: count,
        cos_sim,
        paths: sol
            .paths
            .iter()
            .zip(&sol.frequencies)
            .map(|(p, f)| SolutionPath {
                route: p.vertex_route(g),
                latency_ms: p.latency_ms(g),
                frequency: *f,
            })
            .collect(),
    }
}

fn route_midmile(
    args: &RouteArgs,
    config: &FileConfig,
    _seed: u64,
    out: Option<PathBuf>,
    print_config: bool,
) -> Result<ExitCode> {
    let topo = match Topology::from_file(&args.topology) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot load topology {}: {e}", args.topology.display());
            return Ok(ExitCode::from(1));
        }
    };
    let k = resolve(args.k, config.u64("k").map(|v| v as u32), 4);
    let theta_a = resolve(args.theta_a, config.f64("theta_a"), 1.0);
    let theta_l = resolve(args.theta_l, config.f64("theta_l"), 500.0);
    let alpha = resolve(args.alpha, config.u64("alpha").map(|v| v as u32), 2);
    let beta = resolve(args.beta, config.f64("beta"), 0.7);
    if print_config {
        println!(
            "{{\"k\":{k},\"theta_a\":{theta_a},\"theta_l\":{theta_l},\"alpha\":{alpha},\"beta\":{beta},\"grid\":{}}}",
            args.grid
        );
    }
    let graph = match transform(&topo, k, theta_a, theta_l) {
        Ok(g) => g,
        Err(MidmileError::MissingTerminals) => {
            eprintln!("error: topology must designate a source and a sink");
            return Ok(ExitCode::from(1));
        }
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    let dir = ensure_out(&out)?;
    let nodes = topo.nodes.len();
    let mut csv = String::from("Nodes,alpha,beta,PathCnt,CosSim,Time_ms\n");

    let best = if args.grid {
        let alphas = if args.alphas.is_empty() { vec![1, 2, 3] } else { args.alphas.clone() };
        let betas = if args.betas.is_empty() { vec![0.6, 0.7, 0.8] } else { args.betas.clone() };
        log(format!("grid search over {}x{} cells", alphas.len(), betas.len()));
        let result = grid_search(&graph, &alphas, &betas);
        for c in &result.cells {
            csv.push_str(&format!(
                "{nodes},{},{},{},{:.6e},{:.3}\n",
                c.alpha, c.beta, c.path_count, c.cos_sim, c.elapsed_ms
            ));
        }
        println!(
            "best cell alpha={} beta={} paths={} cos_sim={:.3e} ({:.1} ms total)",
            result.best_alpha,
            result.best_beta,
            result.best.flow,
            result.best.objective(&graph).cos_sim,
            result.total_elapsed_ms
        );
        result.best
    } else {
        let t0 = std::time::Instant::now();
        let sol = carousel_greedy(&graph, &CarouselParams { alpha, beta });
        let elapsed = t0.elapsed().as_secs_f64() * 1000.0;
        let (count, cos_sim) = path_diversity(&sol.paths);
        csv.push_str(&format!("{nodes},{alpha},{beta},{count},{cos_sim:.6e},{elapsed:.3}\n"));
        println!("paths={} cos_sim={cos_sim:.3e} ({elapsed:.1} ms)", sol.flow);
        sol
    };

    let problems = validate_solution(&graph, &best);
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("violation: {p}");
        }
        return Ok(ExitCode::from(2));
    }
    if args.verify {
        match brute_force_mfpc(&graph) {
            Ok(oracle) => println!("oracle flow {} vs solution {}", oracle.flow, best.flow),
            Err(e) => eprintln!("oracle skipped: {e}"),
        }
    }
    std::fs::write(dir.join("midmile.csv"), csv)?;
    std::fs::write(
        dir.join("solution.json"),
        serde_json::to_string_pretty(&solution_file(&graph, &best))?,
    )?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct ScheduleArgs {
    /// Node-state JSON file.
    state: PathBuf,
    /// Total request-rate increment to place.
    #[arg(long, default_value_t = 1000.0)]
    total_dreq: f64,
}

#[derive(Deserialize)]
struct StateFile {
    #[serde(default)]
    params: Option<DppParams>,
    nodes: Vec<StateNode>,
}

#[derive(Deserialize)]
struct StateNode {
    id: String,
    cores: u32,
    backlog: f64,
    cpu: f64,
    req: f64,
    delay_ms: f64,
    #[serde(default)]
    active: Option<bool>,
    #[serde(default)]
    cpu_model: Option<CpuModel>,
}

#[derive(Serialize)]
struct ScheduleOutput {
    delta_req: Vec<NodeDelta>,
    deactivated: Vec<String>,
    total_dpp_before: f64,
    total_dpp_after: f64,
    iterations: u32,
}

#[derive(Serialize)]
struct NodeDelta {
    node: String,
    delta_req: f64,
    v_dpp_before: f64,
    v_dpp_after: f64,
}

fn schedule_lastmile(args: &ScheduleArgs, out: Option<PathBuf>, print_config: bool) -> Result<ExitCode> {
    let raw = match std::fs::read_to_string(&args.state) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot read state file {}: {e}", args.state.display());
            return Ok(ExitCode::from(1));
        }
    };
    let file: StateFile = match serde_json::from_str(&raw) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: state file does not parse: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    let params = file.params.unwrap_or_default();
    if print_config {
        println!("{}", serde_json::to_string(&params)?);
    }
    let default_model = calibrated_model_8c16g();
    let states: Vec<NodeSchedState> = file
        .nodes
        .iter()
        .map(|n| NodeSchedState {
            node_id: n.id.clone(),
            cores: n.cores,
            queue: VirtualQueue::with_backlog(n.cores, n.backlog),
            cpu_onset: n.cpu,
            req_onset: n.req,
            delay_ms: n.delay_ms,
            active: n.active.unwrap_or(true),
            v_dpp: 0.0,
            cpu_model: n.cpu_model.clone().unwrap_or_else(|| default_model.clone()),
        })
        .collect();
    let initial = compute_dpp(&states, &vec![0.0; states.len()], &params);
    let decision = match bpr_schedule(args.total_dreq, &states, &params) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    let after = compute_dpp(&states, &decision.delta_req, &params);
    let output = ScheduleOutput {
        delta_req: states
            .iter()
            .enumerate()
            .map(|(i, s)| NodeDelta {
                node: s.node_id.clone(),
                delta_req: decision.delta_req[i],
                v_dpp_before: initial.per_node[i],
                v_dpp_after: after.per_node[i],
            })
            .collect(),
        deactivated: decision.deactivated.clone(),
        total_dpp_before: decision.total_dpp_before,
        total_dpp_after: decision.total_dpp_after,
        iterations: decision.iterations,
    };
    let rendered = serde_json::to_string_pretty(&output)?;
    println!("{rendered}");
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("schedule.json"), rendered)?;
    }
    if decision.total_dpp_after > decision.total_dpp_before + 1e-12 {
        eprintln!("violation: redistribution worsened the objective");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct CostArgs {
    /// Deployment JSON file.
    deployment: PathBuf,
}

#[derive(Deserialize)]
struct DeploymentFile {
    #[serde(default)]
    nodes: Vec<DeploymentNodes>,
    #[serde(default)]
    traffic_gb: f64,
    #[serde(default)]
    per_gb_usd: f64,
}

#[derive(Deserialize)]
struct DeploymentNodes {
    #[serde(default = "one")]
    count: u64,
    hourly_usd: f64,
}

fn one() -> u64 {
    1
}

/// Micro-dollar integer arithmetic keeps the cents exact.
fn micros(usd: f64) -> i64 {
    (usd * 1e6).round() as i64
}

fn format_usd(micros: i64) -> String {
    let cents = (micros as f64 / 10_000.0).round() as i64;
    format!("${}.{:02}", cents / 100, (cents % 100).abs())
}

fn cost_report(args: &CostArgs, print_config: bool) -> Result<ExitCode> {
    let raw = match std::fs::read_to_string(&args.deployment) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot read deployment {}: {e}", args.deployment.display());
            return Ok(ExitCode::from(1));
        }
    };
    let file: DeploymentFile = match serde_json::from_str(&raw) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: deployment file does not parse: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    if file.nodes.iter().any(|n| n.hourly_usd < 0.0) || file.per_gb_usd < 0.0 || file.traffic_gb < 0.0 {
        eprintln!("error: rates must be nonnegative");
        return Ok(ExitCode::from(1));
    }
    if print_config {
        println!("nodes={} traffic_gb={} per_gb_usd={}", file.nodes.len(), file.traffic_gb, file.per_gb_usd);
    }
    let compute: i64 = file.nodes.iter().map(|n| n.count as i64 * micros(n.hourly_usd)).sum();
    let bandwidth = micros(file.traffic_gb * file.per_gb_usd);
    println!("compute/hour:    {}", format_usd(compute));
    println!("bandwidth total: {}", format_usd(bandwidth));
    println!("total:           {}", format_usd(compute + bandwidth));
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct BenchArgs {
    /// Binary corpus of concatenated wire messages; generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Messages to generate for the synthetic corpus.
    #[arg(long, default_value_t = 2000)]
    messages: usize,
    /// Round-trip iterations over the corpus.
    #[arg(long, default_value_t = 50)]
    iterations: usize,
}

fn generate_corpus(seed: u64, messages: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..messages {
        let hops = (0..rng.gen_range(1..6))
            .map(|_| srheader::HopAddr::new(std::net::Ipv4Addr::from(rng.gen::<[u8; 4]>()), rng.gen()))
            .collect::<Vec<_>>();
        let header = srheader::SegmentHeader {
            packet_id: i as u64,
            offset: 0,
            hop_counts: hops.len() as u8,
            hop_list: hops,
        };
        let subs: Vec<(u64, Vec<u8>)> = (0..rng.gen_range(1..16))
            .map(|j| {
                let len = rng.gen_range(16..512);
                (j, (0..len).map(|_| rng.gen()).collect())
            })
            .collect();
        let frame = srheader::build_frame(&subs).expect("generated frame is valid");
        out.extend(srheader::encode_message(&header, &frame).expect("generated message encodes"));
    }
    out
}

fn bench_codec(args: &BenchArgs, seed: u64, print_config: bool) -> Result<ExitCode> {
    let corpus = match &args.corpus {
        Some(p) => std::fs::read(p).with_context(|| format!("cannot read corpus {}", p.display()))?,
        None => generate_corpus(seed, args.messages),
    };
    if print_config {
        println!("corpus_bytes={} iterations={}", corpus.len(), args.iterations);
    }
    let t0 = std::time::Instant::now();
    let mut messages = 0u64;
    for _ in 0..args.iterations {
        let mut rest: &[u8] = &corpus;
        while !rest.is_empty() {
            let (header, frame, tail) = match srheader::decode_message(rest) {
                Ok(x) => x,
                Err(e) => bail!("corpus is not a valid message stream: {e}"),
            };
            let encoded = srheader::encode_message(&header, &frame)?;
            if encoded.len() != rest.len() - tail.len() {
                bail!("re-encoding changed the message length");
            }
            messages += 1;
            rest = tail;
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let bytes = corpus.len() as f64 * args.iterations as f64;
    println!(
        "{messages} messages round-tripped in {elapsed:.3} s: {:.1} MB/s, {:.0} msg/s",
        bytes / elapsed / 1e6,
        messages as f64 / elapsed
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct TuneArgs {
    /// Bandit rounds to run.
    #[arg(long)]
    rounds: Option<u64>,
    /// Exploration coefficient.
    #[arg(long)]
    alpha_ucb: Option<f64>,
}

/// Synthetic tunnel response surface: throughput saturates with total
/// streams and degrades past a contention knee; merge timeout trades
/// processing time against throughput.
fn tunnel_response(params: &TunnelParams, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let streams = f64::from(params.sessions) * f64::from(params.concurrency);
    let utilization = streams / (streams + 280.0);
    let contention = 1.0 / (1.0 + (streams / 900.0).powi(2));
    let merge_gain = 1.0 + 0.08 * f64::from(params.merge_timeout_ms);
    let rqpt = 24_000.0 * utilization * contention * merge_gain * rng.gen_range(0.97..1.03);
    let art = (6.0 + 0.9 * f64::from(params.merge_timeout_ms) + streams / 160.0)
        * rng.gen_range(0.97..1.03);
    (rqpt, art)
}

fn tune(
    args: &TuneArgs,
    config: &FileConfig,
    seed: u64,
    out: Option<PathBuf>,
    print_config: bool,
) -> Result<ExitCode> {
    let rounds = resolve(args.rounds, config.u64("rounds"), 3000);
    let alpha = resolve(args.alpha_ucb, config.f64("alpha_ucb"), 1.0);
    if print_config {
        println!("rounds={rounds} alpha_ucb={alpha} seed={seed}");
    }
    let arms = arm_space();
    let mut state = LinUcbState::new(arms.len(), alpha);
    let mut norm = RewardNorm::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = String::from("round,arm,sessions,concurrency,merge_timeout_ms,reward\n");
    let mut pulls = vec![0u64; arms.len()];
    let mut cumulative = 0.0;
    let context = [0.6, 0.5, 0.5, 0.5];
    for round in 0..rounds {
        let pick = state.select_arm(&context);
        let (rqpt, art) = tunnel_response(&arms[pick].params, &mut rng);
        let (reward, updated) = compute_reward(rqpt, art, &norm);
        norm = updated;
        state.update(pick, &context, reward);
        pulls[pick] += 1;
        cumulative += reward;
        let p = arms[pick].params;
        trace.push_str(&format!(
            "{round},{pick},{},{},{},{reward:.6}\n",
            p.sessions, p.concurrency, p.merge_timeout_ms
        ));
    }
    let best = pulls
        .iter()
        .enumerate()
        .max_by_key(|(_, &n)| n)
        .map(|(i, _)| i)
        .unwrap_or(0);
    let p = arms[best].params;
    println!(
        "preferred arm after {rounds} rounds: sessions={} concurrency={} merge_timeout={} ms ({} pulls, mean reward {:.3})",
        p.sessions,
        p.concurrency,
        p.merge_timeout_ms,
        pulls[best],
        cumulative / rounds as f64
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("tune.csv"), trace)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct CompressArgs {
    /// Mesh size in nodes.
    #[arg(long)]
    nodes: Option<u64>,
    /// Fraction of outlier pairs.
    #[arg(long)]
    outliers: Option<f64>,
}

fn compress_stats(
    args: &CompressArgs,
    config: &FileConfig,
    seed: u64,
    out: Option<PathBuf>,
    print_config: bool,
) -> Result<ExitCode> {
    let nodes = resolve(args.nodes, config.u64("nodes"), 50) as usize;
    let outliers = resolve(args.outliers, config.f64("outliers"), 0.02);
    if print_config {
        println!("nodes={nodes} outliers={outliers} seed={seed}");
    }
    let samples = synthetic_mesh(nodes, 80.0, outliers, seed, 0);
    let digest = compress(&samples, &PartitionParams::default());
    let raw = samples_to_bytes(&samples).len();
    let packed = digest_to_bytes(&digest).len();
    let singular: std::collections::HashSet<(&str, &str)> = digest
        .singular
        .iter()
        .map(|s| (s.src.as_str(), s.dst.as_str()))
        .collect();
    let mut within = 0usize;
    let mut total = 0usize;
    for s in &samples {
        if singular.contains(&(s.src.as_str(), s.dst.as_str())) {
            continue;
        }
        let (est, _) = estimate(&digest, &s.src, &s.dst).expect("digest covers the mesh");
        total += 1;
        if (est - s.latency_ms).abs() / s.latency_ms <= 0.25 {
            within += 1;
        }
    }
    println!(
        "{} samples: raw {} B, digest {} B ({:.1}x, {:.1}% of raw), {} singular, {}/{} aggregate estimates within 25%",
        samples.len(),
        raw,
        packed,
        raw as f64 / packed as f64,
        100.0 * packed as f64 / raw as f64,
        digest.singular.len(),
        within,
        total
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("digest.bin"), digest_to_bytes(&digest))?;
        std::fs::write(dir.join("digest.csv"), digest_to_csv(&digest))?;
    }
    Ok(ExitCode::SUCCESS)
}
