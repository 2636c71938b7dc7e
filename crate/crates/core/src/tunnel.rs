//! Forwarding-plane engine: connection pooling, stream multiplexing bounded
//! by (S_p, C_p), and time-bounded packet merging (T_p).
//!
//! The engine runs against an injectable clock and transport so the same code
//! is driven by the simulator and by real sockets. All state is behind a
//! single mutex; submissions may arrive concurrently and counter snapshots
//! are atomic with respect to slot rollover.

use crate::model::{PerfCounters, SlotClock};
use crate::srheader::{
    self, CodecError, HopAddr, MergedFrame, RouteAction, SegmentHeader,
};
use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TunnelError {
    #[error("invalid tunnel parameters: {0}")]
    InvalidParams(String),
    #[error("all {sessions} x {concurrency} streams are busy")]
    Saturated { sessions: u8, concurrency: u16 },
    #[error("payload of {len} bytes exceeds merge capacity {capacity}")]
    Oversize { len: usize, capacity: usize },
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
}

/// Multiplexing parameters: session count S_p in [1, 10], per-session
/// concurrency C_p in {50, 60, ..., 200}, merge timeout T_p in [1, 5] ms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct TunnelParams {
    pub sessions: u8,
    pub concurrency: u16,
    pub merge_timeout_ms: u8,
}

impl TunnelParams {
    pub fn new(sessions: u8, concurrency: u16, merge_timeout_ms: u8) -> Result<Self, TunnelError> {
        let p = Self { sessions, concurrency, merge_timeout_ms };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TunnelError> {
        if !(1..=10).contains(&self.sessions) {
            return Err(TunnelError::InvalidParams(format!(
                "sessions {} outside [1, 10]",
                self.sessions
            )));
        }
        if !(50..=200).contains(&self.concurrency) || self.concurrency % 10 != 0 {
            return Err(TunnelError::InvalidParams(format!(
                "concurrency {} not in {{50, 60, ..., 200}}",
                self.concurrency
            )));
        }
        if !(1..=5).contains(&self.merge_timeout_ms) {
            return Err(TunnelError::InvalidParams(format!(
                "merge timeout {} ms outside [1, 5]",
                self.merge_timeout_ms
            )));
        }
        Ok(())
    }

    pub fn max_streams(&self) -> u32 {
        u32::from(self.sessions) * u32::from(self.concurrency)
    }
}

impl Default for TunnelParams {
    fn default() -> Self {
        Self { sessions: 4, concurrency: 100, merge_timeout_ms: 2 }
    }
}

pub const DEFAULT_MERGE_CAPACITY_BYTES: usize = 16 * 1024;

/// Buffer that merges small sub-requests headed for the same next hop.
/// Flushes when capacity is reached or the oldest pending item has waited
/// `merge_timeout_ms`.
#[derive(Debug)]
pub struct MergeBuffer {
    pending: Vec<(u64, Vec<u8>)>,
    pending_bytes: usize,
    opened_at_ms: Option<u64>,
    capacity_bytes: usize,
    merge_timeout_ms: u64,
}

impl MergeBuffer {
    pub fn new(capacity_bytes: usize, merge_timeout_ms: u8) -> Self {
        Self {
            pending: Vec::new(),
            pending_bytes: 0,
            opened_at_ms: None,
            capacity_bytes,
            merge_timeout_ms: u64::from(merge_timeout_ms),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Absolute flush deadline of the current batch, if one is open.
    pub fn deadline_ms(&self) -> Option<u64> {
        self.opened_at_ms.map(|t| t + self.merge_timeout_ms)
    }

    fn flush(&mut self) -> Option<MergedFrame> {
        if self.pending.is_empty() {
            return None;
        }
        let frame = srheader::build_frame(&self.pending)
            .expect("pending batch has unique ids and is nonempty");
        self.pending.clear();
        self.pending_bytes = 0;
        self.opened_at_ms = None;
        Some(frame)
    }

    /// Enqueues one sub-request. Returns a flushed frame when the batch hit
    /// capacity or its deadline; two frames can result from one submit only
    /// when the new payload does not fit the open batch, in which case the
    /// old batch is flushed and the new payload starts the next one.
    pub fn submit(
        &mut self,
        packet_id: u64,
        bytes: Vec<u8>,
        now_ms: u64,
    ) -> Result<Vec<MergedFrame>, TunnelError> {
        if bytes.len() > self.capacity_bytes {
            return Err(TunnelError::Oversize { len: bytes.len(), capacity: self.capacity_bytes });
        }
        let mut out = Vec::new();
        let conflict = self.pending.iter().any(|(id, _)| *id == packet_id);
        if conflict || self.pending_bytes + bytes.len() > self.capacity_bytes {
            out.extend(self.flush());
        }
        if self.pending.is_empty() {
            self.opened_at_ms = Some(now_ms);
        }
        self.pending_bytes += bytes.len();
        self.pending.push((packet_id, bytes));
        let deadline_hit = now_ms >= self.deadline_ms().expect("batch is open");
        if deadline_hit || self.pending_bytes >= self.capacity_bytes {
            out.extend(self.flush());
        }
        Ok(out)
    }

    /// Deadline-driven flush; the timer owner calls this as time advances.
    pub fn poll(&mut self, now_ms: u64) -> Option<MergedFrame> {
        match self.deadline_ms() {
            Some(d) if now_ms >= d => self.flush(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHandle {
    pub dest: HopAddr,
    pub session: usize,
    pub stream_id: u64,
}

/// Per-destination session handles with per-session open-stream counts.
/// Counts never exceed (S_p, C_p); streams return to the pool on completion.
#[derive(Debug)]
pub struct PoolState {
    params: TunnelParams,
    sessions: HashMap<HopAddr, Vec<u32>>,
    next_stream_id: u64,
}

impl PoolState {
    pub fn new(params: TunnelParams) -> Self {
        Self { params, sessions: HashMap::new(), next_stream_id: 0 }
    }

    pub fn params(&self) -> TunnelParams {
        self.params
    }

    pub fn session_count(&self, dest: &HopAddr) -> usize {
        self.sessions.get(dest).map_or(0, Vec::len)
    }

    pub fn open_streams(&self, dest: &HopAddr) -> u32 {
        self.sessions.get(dest).map_or(0, |s| s.iter().sum())
    }

    /// Grabs a stream on a session with spare concurrency, opening a new
    /// session only when every existing one is at C_p and the session count
    /// is below S_p.
    pub fn acquire_stream(&mut self, dest: HopAddr) -> Result<StreamHandle, TunnelError> {
        let sessions = self.sessions.entry(dest).or_default();
        let session = match sessions.iter().position(|&n| n < u32::from(self.params.concurrency)) {
            Some(i) => i,
            None if sessions.len() < usize::from(self.params.sessions) => {
                sessions.push(0);
                sessions.len() - 1
            }
            None => {
                return Err(TunnelError::Saturated {
                    sessions: self.params.sessions,
                    concurrency: self.params.concurrency,
                })
            }
        };
        sessions[session] += 1;
        let stream_id = self.next_stream_id;
        self.next_stream_id += 1;
        Ok(StreamHandle { dest, session, stream_id })
    }

    pub fn release_stream(&mut self, handle: StreamHandle) {
        if let Some(sessions) = self.sessions.get_mut(&handle.dest) {
            if let Some(n) = sessions.get_mut(handle.session) {
                *n = n.saturating_sub(1);
            }
        }
    }
}

/// Millisecond clock the engine reads; injectable for determinism.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// Simulated clock advanced explicitly by the driver.
#[derive(Debug, Default)]
pub struct SimClock(AtomicU64);

impl SimClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance_ms(&self, delta: u64) {
        self.0.fetch_add(delta, Ordering::SeqCst);
    }

    pub fn set_ms(&self, now: u64) {
        self.0.store(now, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Abstract byte-stream transport between engines.
pub trait Transport: Send + Sync {
    fn send(&self, to: HopAddr, bytes: Vec<u8>);
}

/// In-memory transport: one inbox per address, drained by the driver.
#[derive(Debug, Default)]
pub struct InMemoryTransport {
    inboxes: Mutex<HashMap<HopAddr, VecDeque<Vec<u8>>>>,
}

impl InMemoryTransport {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn drain(&self, addr: &HopAddr) -> Vec<Vec<u8>> {
        let mut inboxes = self.inboxes.lock().unwrap();
        inboxes.get_mut(addr).map_or_else(Vec::new, |q| q.drain(..).collect())
    }
}

impl Transport for InMemoryTransport {
    fn send(&self, to: HopAddr, bytes: Vec<u8>) {
        self.inboxes.lock().unwrap().entry(to).or_default().push_back(bytes);
    }
}

/// Source of the CPU counter: the simulator supplies its model's value, a
/// real host reads process CPU time.
pub trait CpuProbe: Send + Sync {
    fn cpu_fraction(&self) -> f64;
}

/// Fixed or externally updated CPU reading, used by tests and the simulator.
#[derive(Debug, Default)]
pub struct SharedCpuProbe(Mutex<f64>);

impl SharedCpuProbe {
    pub fn new(initial: f64) -> Arc<Self> {
        Arc::new(Self(Mutex::new(initial)))
    }

    pub fn set(&self, cpu: f64) {
        *self.0.lock().unwrap() = cpu.clamp(0.0, 1.0);
    }
}

impl CpuProbe for SharedCpuProbe {
    fn cpu_fraction(&self) -> f64 {
        *self.0.lock().unwrap()
    }
}

/// Best-effort process CPU probe for real hosts; reads /proc/self/stat and
/// differences utime+stime against wall time between calls.
#[derive(Debug, Default)]
pub struct HostCpuProbe {
    last: Mutex<Option<(f64, std::time::Instant)>>,
}

impl HostCpuProbe {
    fn process_seconds() -> Option<f64> {
        let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
        // utime and stime are the 2nd and 3rd fields after the parenthesized
        // command name, in clock ticks (100 Hz on Linux).
        let after = stat.rsplit_once(')')?.1;
        let fields: Vec<&str> = after.split_whitespace().collect();
        let utime: f64 = fields.get(11)?.parse().ok()?;
        let stime: f64 = fields.get(12)?.parse().ok()?;
        Some((utime + stime) / 100.0)
    }
}

impl CpuProbe for HostCpuProbe {
    fn cpu_fraction(&self) -> f64 {
        let now = std::time::Instant::now();
        let Some(cpu_s) = Self::process_seconds() else { return 0.0 };
        let mut last = self.last.lock().unwrap();
        let frac = match *last {
            Some((prev_cpu, prev_t)) => {
                let wall = now.duration_since(prev_t).as_secs_f64();
                if wall > 0.0 { ((cpu_s - prev_cpu) / wall).clamp(0.0, 1.0) } else { 0.0 }
            }
            None => 0.0,
        };
        *last = Some((cpu_s, now));
        frac
    }
}

#[derive(Debug, Default)]
struct SlotCounters {
    arrived: u64,
    completed: u64,
    service_ms_sum: f64,
}

struct EngineInner {
    pool: PoolState,
    buffers: HashMap<HopAddr, (Vec<HopAddr>, MergeBuffer)>,
    outbox: VecDeque<(HopAddr, Vec<u8>)>,
    counters: SlotCounters,
    cur_slot: u64,
    delivered: Vec<(u64, Vec<u8>)>,
    next_frame_id: u64,
}

/// The forwarding engine for one node.
pub struct TunnelEngine {
    params: TunnelParams,
    capacity_bytes: usize,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    cpu: Arc<dyn CpuProbe>,
    slot: SlotClock,
    inner: Mutex<EngineInner>,
}

impl TunnelEngine {
    pub fn new(
        params: TunnelParams,
        clock: Arc<dyn Clock>,
        transport: Arc<dyn Transport>,
        cpu: Arc<dyn CpuProbe>,
    ) -> Self {
        Self {
            params,
            capacity_bytes: DEFAULT_MERGE_CAPACITY_BYTES,
            clock,
            transport,
            cpu,
            slot: SlotClock::default(),
            inner: Mutex::new(EngineInner {
                pool: PoolState::new(params),
                buffers: HashMap::new(),
                outbox: VecDeque::new(),
                counters: SlotCounters::default(),
                cur_slot: 0,
                delivered: Vec::new(),
                next_frame_id: 0,
            }),
        }
    }

    pub fn params(&self) -> TunnelParams {
        self.params
    }

    fn roll(&self, inner: &mut EngineInner, now_ms: u64) {
        let slot = self.slot.slot_of(now_ms);
        if slot != inner.cur_slot {
            inner.cur_slot = slot;
            inner.counters = SlotCounters::default();
        }
    }

    /// Submits one sub-request for the given route. The first hop keys the
    /// merge buffer; a route change flushes the open batch first.
    pub fn submit(
        &self,
        route: &[HopAddr],
        packet_id: u64,
        payload: Vec<u8>,
    ) -> Result<(), TunnelError> {
        assert!(!route.is_empty(), "route must name at least one hop");
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.roll(&mut inner, now);
        inner.counters.arrived += 1;
        let next = route[0];
        let capacity = self.capacity_bytes;
        let timeout = self.params.merge_timeout_ms;
        let entry = inner
            .buffers
            .entry(next)
            .or_insert_with(|| (route.to_vec(), MergeBuffer::new(capacity, timeout)));
        let mut flushed = Vec::new();
        if entry.0 != route && !entry.1.is_empty() {
            flushed.extend(entry.1.flush().map(|f| (entry.0.clone(), f)));
        }
        entry.0 = route.to_vec();
        flushed.extend(
            entry
                .1
                .submit(packet_id, payload, now)?
                .into_iter()
                .map(|f| (route.to_vec(), f)),
        );
        for (route, frame) in flushed {
            self.dispatch(&mut inner, &route, frame)?;
        }
        Ok(())
    }

    /// Flushes expired merge batches and retries backpressured frames.
    pub fn tick(&self) -> Result<(), TunnelError> {
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.roll(&mut inner, now);
        let mut flushed = Vec::new();
        for (route, buffer) in inner.buffers.values_mut() {
            if let Some(frame) = buffer.poll(now) {
                flushed.push((route.clone(), frame));
            }
        }
        for (route, frame) in flushed {
            self.dispatch(&mut inner, &route, frame)?;
        }
        while let Some((to, bytes)) = inner.outbox.pop_front() {
            match inner.pool.acquire_stream(to) {
                Ok(handle) => {
                    self.transport.send(to, bytes);
                    inner.pool.release_stream(handle);
                }
                Err(TunnelError::Saturated { .. }) => {
                    inner.outbox.push_front((to, bytes));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn dispatch(
        &self,
        inner: &mut EngineInner,
        route: &[HopAddr],
        frame: MergedFrame,
    ) -> Result<(), TunnelError> {
        let header = SegmentHeader {
            packet_id: inner.next_frame_id,
            offset: 0,
            hop_list: route.to_vec(),
            hop_counts: route.len() as u8,
        };
        inner.next_frame_id += 1;
        let (action, advanced) = srheader::next_hop(&header);
        match action {
            RouteAction::ForwardTo(next) => {
                let bytes = srheader::encode_message(&advanced, &frame)?;
                self.send_or_queue(inner, next, bytes);
            }
            RouteAction::Egress => {
                inner.delivered.extend(srheader::split_frame(&frame)?);
            }
        }
        Ok(())
    }

    fn send_or_queue(&self, inner: &mut EngineInner, to: HopAddr, bytes: Vec<u8>) {
        match inner.pool.acquire_stream(to) {
            Ok(handle) => {
                self.transport.send(to, bytes);
                inner.pool.release_stream(handle);
            }
            Err(_) => inner.outbox.push_back((to, bytes)),
        }
    }

    /// Handles one received wire message: forward when hops remain, deliver
    /// locally at the egress.
    pub fn on_frame(&self, bytes: &[u8]) -> Result<(), TunnelError> {
        let (header, frame, _rest) = srheader::decode_message(bytes)?;
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.roll(&mut inner, now);
        let (action, advanced) = srheader::next_hop(&header);
        match action {
            RouteAction::ForwardTo(next) => {
                inner.counters.arrived += frame.entries.len() as u64;
                let out = srheader::encode_message(&advanced, &frame)?;
                self.send_or_queue(&mut inner, next, out);
            }
            RouteAction::Egress => {
                inner.delivered.extend(srheader::split_frame(&frame)?);
            }
        }
        Ok(())
    }

    /// Sub-requests delivered at this node since the last call.
    pub fn take_delivered(&self) -> Vec<(u64, Vec<u8>)> {
        std::mem::take(&mut self.inner.lock().unwrap().delivered)
    }

    /// Records one processed request and its service time.
    pub fn record_completion(&self, service_ms: f64) {
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.roll(&mut inner, now);
        inner.counters.completed += 1;
        inner.counters.service_ms_sum += service_ms;
    }

    /// Snapshot of the current slot's counters, normalized by slot length.
    pub fn sample_counters(&self) -> PerfCounters {
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.roll(&mut inner, now);
        let slot_s = self.slot.slot_length_s();
        let c = &inner.counters;
        PerfCounters {
            cpu: self.cpu.cpu_fraction(),
            rps: c.arrived as f64 / slot_s,
            rqpt: c.completed as f64 / slot_s,
            art_ms: if c.completed > 0 { c.service_ms_sum / c.completed as f64 } else { 0.0 },
        }
    }
}
