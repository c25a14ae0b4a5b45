//! Deterministic discrete-event model of clients talking to passive memory nodes.
//!
//! Every node exposes a flat byte array. Clients issue one-sided READ, WRITE,
//! 8-byte CAS and ordered write/CAS pairs. Multi-word transfers are applied one
//! word per sub-step, so a read racing a write can observe a mix of both. All
//! randomness comes from one seeded generator and events at equal time run in
//! issue order, so a run is a pure function of its configuration.

mod memory;
mod quorum;
mod sched;

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

pub use quorum::{BoxFut, Gathered, Launch, gather, join_all, join2, with_timeout};
pub use sched::{Pending, RunReport, TaskId};

use crate::trace::{TraceEvent, TraceLevel, TraceRecord};
use memory::PagedMemory;
use sched::{Shared, SlotState};

pub type Tick = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NodeId(pub u8);

/// Client identifier, also used as the writer id inside timestamps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClientId(pub u8);

/// Largest usable client id; 255 is reserved for the deletion sentinel.
pub const MAX_CLIENT: u8 = 254;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DelayModel {
    /// Minimum one-way latency.
    pub base: Tick,
    /// Uniform extra latency in `0..=jitter`.
    pub jitter: Tick,
}

impl DelayModel {
    pub const fn fixed(base: Tick) -> Self {
        DelayModel { base, jitter: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CrashAt {
    pub at: Tick,
    pub node: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SlowdownAt {
    pub at: Tick,
    pub node: NodeId,
    /// Added to every one-way delay to and from the node from `at` on.
    pub extra: Tick,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FaultSchedule {
    pub crashes: Vec<CrashAt>,
    pub slowdowns: Vec<SlowdownAt>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FabricConfig {
    pub nodes: usize,
    /// Tolerated crashes; `nodes` must equal `2f + 1`.
    pub f: usize,
    pub delay: DelayModel,
    /// Per-node delay overrides.
    pub node_delay: BTreeMap<u8, DelayModel>,
    /// Extra one-way delay of every message to or from a client.
    pub client_delay: BTreeMap<u8, DelayModel>,
    /// Delay of the reliable location service.
    pub service_delay: DelayModel,
    pub read_word_ticks: Tick,
    pub write_word_ticks: Tick,
    /// Addressable bytes per node.
    pub memory_bytes: u64,
    pub seed: u64,
    pub faults: FaultSchedule,
    pub trace: TraceLevel,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            nodes: 3,
            f: 1,
            delay: DelayModel { base: 10, jitter: 10 },
            node_delay: BTreeMap::new(),
            client_delay: BTreeMap::new(),
            service_delay: DelayModel { base: 10, jitter: 10 },
            read_word_ticks: 1,
            write_word_ticks: 2,
            memory_bytes: 1 << 40,
            seed: 0,
            faults: FaultSchedule::default(),
            trace: TraceLevel::Protocol,
        }
    }
}

impl FabricConfig {
    pub fn majority(&self) -> usize {
        self.nodes / 2 + 1
    }

    pub fn validate(&self) -> Result<(), FabricError> {
        if self.nodes == 0 || self.nodes > 255 {
            return Err(FabricError::InvalidConfig(alloc::format!("node count {} outside 1..=255", self.nodes)));
        }
        if self.nodes != 2 * self.f + 1 {
            return Err(FabricError::InvalidConfig(alloc::format!(
                "node count {} must equal 2f+1 with f = {}",
                self.nodes,
                self.f
            )));
        }
        for &n in self.node_delay.keys() {
            if n as usize >= self.nodes {
                return Err(FabricError::UnknownNode(NodeId(n)));
            }
        }
        let mut crashed = alloc::collections::BTreeSet::new();
        for c in &self.faults.crashes {
            if c.node.0 as usize >= self.nodes {
                return Err(FabricError::UnknownNode(c.node));
            }
            crashed.insert(c.node);
        }
        for s in &self.faults.slowdowns {
            if s.node.0 as usize >= self.nodes {
                return Err(FabricError::UnknownNode(s.node));
            }
        }
        if crashed.len() > self.f {
            return Err(FabricError::MajorityCrash { crashed: crashed.len(), f: self.f });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FabricError {
    InvalidConfig(String),
    UnknownNode(NodeId),
    OutOfRange {
        node: NodeId,
        offset: u64,
        len: u64,
    },
    Misaligned {
        offset: u64,
    },
    /// A pipelined pair may only contain writes and CAS operations.
    NotAnUpdate,
    MajorityCrash {
        crashed: usize,
        f: usize,
    },
}

impl fmt::Display for FabricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FabricError::InvalidConfig(m) => write!(f, "invalid fabric configuration: {m}"),
            FabricError::UnknownNode(n) => write!(f, "unknown node {}", n.0),
            FabricError::OutOfRange { node, offset, len } => {
                write!(f, "access of {len} bytes at {offset:#x} is out of range on node {}", node.0)
            }
            FabricError::Misaligned { offset } => write!(f, "CAS at {offset:#x} is not 8-byte aligned"),
            FabricError::NotAnUpdate => write!(f, "pipelined pair must contain only updates"),
            FabricError::MajorityCrash { crashed, f: tol } => {
                write!(f, "fault schedule crashes {crashed} nodes but only {tol} may fail")
            }
        }
    }
}

impl core::error::Error for FabricError {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Request {
    Read {
        offset: u64,
        len: u32,
    },
    Write {
        offset: u64,
        data: Vec<u8>,
    },
    Cas {
        offset: u64,
        expected: u64,
        new: u64,
    },
    /// Two updates applied in order at one node, answered together.
    Pipelined(alloc::boxed::Box<Request>, alloc::boxed::Box<Request>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Response {
    Read(Vec<u8>),
    Write,
    /// Word value found before the compare.
    Cas {
        prev: u64,
    },
    Pipelined(alloc::boxed::Box<Response>, alloc::boxed::Box<Response>),
}

impl Response {
    pub fn into_bytes(self) -> Vec<u8> {
        match self {
            Response::Read(b) => b,
            other => panic!("expected read response, got {other:?}"),
        }
    }

    pub fn cas_prev(&self) -> u64 {
        match self {
            Response::Cas { prev } => *prev,
            other => panic!("expected CAS response, got {other:?}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FabricStats {
    pub reads: u64,
    pub writes: u64,
    pub cas: u64,
    pub pipelined: u64,
    pub service_calls: u64,
    pub dropped: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

struct NodeState {
    mem: PagedMemory,
    crashed: bool,
    extra_delay: Tick,
}

pub(crate) struct World {
    cfg: FabricConfig,
    nodes: Vec<NodeState>,
    channel_free: BTreeMap<(u8, u8), Tick>,
    rng: rand_chacha::ChaCha8Rng,
    trace: Vec<TraceRecord>,
    stats: FabricStats,
    next_op: u64,
}

impl World {
    fn sample(&mut self, model: DelayModel) -> Tick {
        use rand::Rng;
        if model.jitter == 0 { model.base } else { model.base + self.rng.random_range(0..=model.jitter) }
    }

    fn link_delay(&mut self, client: ClientId, node: NodeId) -> Tick {
        let model = self.cfg.node_delay.get(&node.0).copied().unwrap_or(self.cfg.delay);
        let extra = self.nodes[node.0 as usize].extra_delay;
        let slow = match self.cfg.client_delay.get(&client.0).copied() {
            Some(m) => self.sample(m),
            None => 0,
        };
        self.sample(model) + extra + slow
    }

    fn record(&mut self, at: Tick, event: TraceEvent) {
        if self.cfg.trace != TraceLevel::Off && event.level() <= self.cfg.trace {
            self.trace.push(TraceRecord { at, event });
        }
    }
}

/// One word-granular action of an in-flight request.
enum Step {
    ReadWord { offset: u64, len: usize },
    WriteWord { offset: u64, bytes: Vec<u8> },
    Cas { part: usize, offset: u64, expected: u64, new: u64 },
}

enum Shape {
    Read,
    Write,
    Cas,
}

struct Flight {
    client: ClientId,
    node: NodeId,
    steps: alloc::collections::VecDeque<Step>,
    parts: Vec<Shape>,
    read_buf: Vec<u8>,
    cas_prev: [u64; 2],
    reply: Rc<RefCell<SlotState<Response>>>,
}

/// Handle to a simulation. Cheap to clone; all clones share one world.
#[derive(Clone)]
pub struct Fabric {
    shared: Rc<Shared>,
}

impl Fabric {
    pub fn new(cfg: FabricConfig) -> Result<Fabric, FabricError> {
        use rand::SeedableRng;
        cfg.validate()?;
        let nodes =
            (0..cfg.nodes).map(|_| NodeState { mem: PagedMemory::default(), crashed: false, extra_delay: 0 }).collect();
        let faults = cfg.faults.clone();
        let world = World {
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            nodes,
            channel_free: BTreeMap::new(),
            trace: Vec::new(),
            stats: FabricStats::default(),
            next_op: 1,
        };
        let fabric = Fabric { shared: Rc::new(Shared::new(world)) };
        for c in faults.crashes {
            let node = c.node;
            fabric.shared.schedule(c.at, move |sh| crash_node(sh, node));
        }
        for s in faults.slowdowns {
            fabric.shared.schedule(s.at, move |sh| {
                let now = sh.now();
                let mut w = sh.world.borrow_mut();
                w.nodes[s.node.0 as usize].extra_delay = s.extra;
                w.record(now, TraceEvent::Slowdown { node: s.node.0, extra: s.extra });
            });
        }
        Ok(fabric)
    }

    pub fn config(&self) -> FabricConfig {
        self.shared.world.borrow().cfg.clone()
    }

    pub fn node_count(&self) -> usize {
        self.shared.world.borrow().cfg.nodes
    }

    pub fn majority(&self) -> usize {
        self.node_count() / 2 + 1
    }

    pub fn now(&self) -> Tick {
        self.shared.now()
    }

    pub fn spawn(&self, fut: impl core::future::Future<Output = ()> + 'static) -> TaskId {
        self.shared.spawn(alloc::boxed::Box::pin(fut))
    }

    /// Runs until no event or runnable task is left.
    pub fn run(&self) -> RunReport {
        self.shared.run_until(Tick::MAX)
    }

    /// Runs until quiescence or until the next event would be after `limit`.
    pub fn run_until(&self, limit: Tick) -> RunReport {
        self.shared.run_until(limit)
    }

    /// Spawns `fut`, runs to quiescence and returns its output if it finished.
    pub fn block_on<T: 'static>(&self, fut: impl core::future::Future<Output = T> + 'static) -> Option<T> {
        let out = Rc::new(RefCell::new(None));
        let sink = out.clone();
        self.spawn(async move {
            let v = fut.await;
            *sink.borrow_mut() = Some(v);
        });
        self.run();
        out.borrow_mut().take()
    }

    /// Completes after `ticks` of simulated time.
    pub fn sleep(&self, ticks: Tick) -> Pending<()> {
        let slot = SlotState::new_slot();
        let s2 = slot.clone();
        let at = self.now() + ticks;
        self.shared.schedule(at, move |sh| sh.complete(&s2, ()));
        Pending::new(slot, self.shared.clone())
    }

    /// Fresh identifier for grouping trace records of one operation.
    pub fn next_op_id(&self) -> u64 {
        let mut w = self.shared.world.borrow_mut();
        let id = w.next_op;
        w.next_op += 1;
        id
    }

    pub fn is_crashed(&self, node: NodeId) -> bool {
        self.shared.world.borrow().nodes.get(node.0 as usize).is_some_and(|n| n.crashed)
    }

    /// Crashes `node` now. Refuses to crash a majority.
    pub fn crash(&self, node: NodeId) -> Result<(), FabricError> {
        {
            let w = self.shared.world.borrow();
            if node.0 as usize >= w.cfg.nodes {
                return Err(FabricError::UnknownNode(node));
            }
            let already = w.nodes.iter().filter(|n| n.crashed).count();
            if !w.nodes[node.0 as usize].crashed && already + 1 > w.cfg.f {
                return Err(FabricError::MajorityCrash { crashed: already + 1, f: w.cfg.f });
            }
        }
        crash_node(&self.shared, node);
        Ok(())
    }

    pub fn record(&self, event: TraceEvent) {
        let now = self.now();
        self.shared.world.borrow_mut().record(now, event);
    }

    pub fn trace(&self) -> Vec<TraceRecord> {
        self.shared.world.borrow().trace.clone()
    }

    pub fn take_trace(&self) -> Vec<TraceRecord> {
        core::mem::take(&mut self.shared.world.borrow_mut().trace)
    }

    pub fn stats(&self) -> FabricStats {
        self.shared.world.borrow().stats.clone()
    }

    /// Reads node memory directly, outside simulated time.
    pub fn peek(&self, node: NodeId, offset: u64, len: usize) -> Vec<u8> {
        self.shared.world.borrow().nodes[node.0 as usize].mem.snapshot(offset, len)
    }

    pub fn peek_word(&self, node: NodeId, offset: u64) -> u64 {
        self.shared.world.borrow().nodes[node.0 as usize].mem.read_word(offset)
    }

    /// Writes node memory directly, outside simulated time.
    pub fn poke(&self, node: NodeId, offset: u64, data: &[u8]) {
        self.shared.world.borrow_mut().nodes[node.0 as usize].mem.write(offset, data)
    }

    /// Issues a batch to several nodes in one phase.
    pub fn submit(
        &self,
        client: ClientId,
        batch: Vec<(NodeId, Request)>,
    ) -> Result<Vec<(NodeId, Pending<Response>)>, FabricError> {
        batch.into_iter().map(|(node, req)| Ok((node, self.issue(client, node, req)?))).collect()
    }

    /// Issues one request. The returned future completes when the response
    /// is back at the client, and never if the node crashes first.
    pub fn issue(&self, client: ClientId, node: NodeId, req: Request) -> Result<Pending<Response>, FabricError> {
        let mut steps = alloc::collections::VecDeque::new();
        let mut parts = Vec::new();
        let (read_ticks, write_ticks, cap, nodes) = {
            let w = self.shared.world.borrow();
            (w.cfg.read_word_ticks, w.cfg.write_word_ticks, w.cfg.memory_bytes, w.cfg.nodes)
        };
        if node.0 as usize >= nodes {
            return Err(FabricError::UnknownNode(node));
        }
        let mut durations = Vec::new();
        let mut read_len = 0usize;
        let kind = match &req {
            Request::Read { .. } => 0,
            Request::Write { .. } => 1,
            Request::Cas { .. } => 2,
            Request::Pipelined(..) => 3,
        };
        let mut plan = |r: &Request, part: usize, top: bool| -> Result<(), FabricError> {
            match r {
                Request::Read { offset, len } => {
                    check_range(node, *offset, *len as u64, cap)?;
                    parts.push(Shape::Read);
                    read_len = *len as usize;
                    let mut at = 0u64;
                    while at < *len as u64 {
                        let n = (8 - (offset + at) % 8).min(*len as u64 - at);
                        steps.push_back(Step::ReadWord { offset: offset + at, len: n as usize });
                        durations.push(read_ticks);
                        at += n;
                    }
                }
                Request::Write { offset, data } => {
                    check_range(node, *offset, data.len() as u64, cap)?;
                    parts.push(Shape::Write);
                    let mut at = 0u64;
                    while at < data.len() as u64 {
                        let n = (8 - (offset + at) % 8).min(data.len() as u64 - at);
                        steps.push_back(Step::WriteWord {
                            offset: offset + at,
                            bytes: data[at as usize..(at + n) as usize].to_vec(),
                        });
                        durations.push(write_ticks);
                        at += n;
                    }
                }
                Request::Cas { offset, expected, new } => {
                    check_range(node, *offset, 8, cap)?;
                    if offset % 8 != 0 {
                        return Err(FabricError::Misaligned { offset: *offset });
                    }
                    parts.push(Shape::Cas);
                    steps.push_back(Step::Cas { part, offset: *offset, expected: *expected, new: *new });
                    durations.push(write_ticks.max(1));
                }
                Request::Pipelined(..) if !top => return Err(FabricError::NotAnUpdate),
                Request::Pipelined(..) => unreachable!(),
            }
            Ok(())
        };
        match &req {
            Request::Pipelined(a, b) => {
                for r in [a.as_ref(), b.as_ref()] {
                    if matches!(r, Request::Read { .. } | Request::Pipelined(..)) {
                        return Err(FabricError::NotAnUpdate);
                    }
                }
                plan(a, 0, false)?;
                plan(b, 1, false)?;
            }
            r => plan(r, 0, true)?,
        }
        if steps.is_empty() {
            // zero-length transfer still costs one access
            durations.push(read_ticks);
        }

        let slot = SlotState::new_slot();
        let now = self.now();
        let start = {
            let mut w = self.shared.world.borrow_mut();
            match kind {
                0 => w.stats.reads += 1,
                1 => w.stats.writes += 1,
                2 => w.stats.cas += 1,
                _ => w.stats.pipelined += 1,
            }
            match &req {
                Request::Read { offset, len } => {
                    let ev = TraceEvent::Read { client: client.0, node: node.0, offset: *offset, len: *len };
                    w.record(now, ev);
                }
                Request::Write { offset, data } => {
                    let ev =
                        TraceEvent::Write { client: client.0, node: node.0, offset: *offset, len: data.len() as u32 };
                    w.record(now, ev);
                }
                _ => {}
            }
            let out = w.link_delay(client, node);
            let key = (client.0, node.0);
            let free = w.channel_free.get(&key).copied().unwrap_or(0);
            let start = (now + out).max(free);
            let total: Tick = durations.iter().sum();
            let end = start + total.saturating_sub(*durations.last().unwrap_or(&0));
            w.channel_free.insert(key, end + 1);
            start
        };
        let flight = Rc::new(RefCell::new(Flight {
            client,
            node,
            steps,
            parts,
            read_buf: Vec::with_capacity(read_len),
            cas_prev: [0; 2],
            reply: slot.clone(),
        }));
        let mut at = start;
        let count = durations.len();
        for (i, d) in durations.iter().enumerate() {
            let fl = flight.clone();
            let last = i + 1 == count;
            self.shared.schedule(at, move |sh| run_step(sh, &fl, last));
            at += d;
        }
        Ok(Pending::new(slot, self.shared.clone()))
    }

    /// Runs `op` atomically at the reliable service after a one-way delay and
    /// returns its result after another one.
    pub fn call_service<R: 'static>(&self, op: impl FnOnce() -> R + 'static) -> Pending<R> {
        let slot = SlotState::new_slot();
        let (arrive, back) = {
            let mut w = self.shared.world.borrow_mut();
            w.stats.service_calls += 1;
            let m = w.cfg.service_delay;
            (w.sample(m), w.sample(m))
        };
        let s2 = slot.clone();
        let at = self.now() + arrive;
        self.shared.schedule(at, move |sh| {
            let r = op();
            let deliver = sh.now() + back;
            sh.schedule(deliver, move |sh| sh.complete(&s2, r));
        });
        Pending::new(slot, self.shared.clone())
    }
}

fn check_range(node: NodeId, offset: u64, len: u64, cap: u64) -> Result<(), FabricError> {
    match offset.checked_add(len) {
        Some(end) if end <= cap => Ok(()),
        _ => Err(FabricError::OutOfRange { node, offset, len }),
    }
}

fn crash_node(sh: &Shared, node: NodeId) {
    let now = sh.now();
    let mut w = sh.world.borrow_mut();
    if !w.nodes[node.0 as usize].crashed {
        w.nodes[node.0 as usize].crashed = true;
        w.record(now, TraceEvent::Crash { node: node.0 });
    }
}

fn run_step(sh: &Shared, flight: &Rc<RefCell<Flight>>, last: bool) {
    let now = sh.now();
    let mut fl = flight.borrow_mut();
    let node = fl.node;
    let client = fl.client;
    let mut w = sh.world.borrow_mut();
    if w.nodes[node.0 as usize].crashed {
        if last {
            w.stats.dropped += 1;
            w.record(now, TraceEvent::Dropped { client: client.0, node: node.0 });
        }
        fl.steps.clear();
        return;
    }
    if let Some(step) = fl.steps.pop_front() {
        let mem = &mut w.nodes[node.0 as usize].mem;
        match step {
            Step::ReadWord { offset, len } => {
                let mut b = [0u8; 8];
                mem.read_into(offset, &mut b[..len]);
                fl.read_buf.extend_from_slice(&b[..len]);
                w.stats.bytes_read += len as u64;
            }
            Step::WriteWord { offset, bytes } => {
                mem.write(offset, &bytes);
                w.stats.bytes_written += bytes.len() as u64;
            }
            Step::Cas { part, offset, expected, new } => {
                let prev = mem.read_word(offset);
                if prev == expected {
                    mem.write_word(offset, new);
                }
                fl.cas_prev[part] = prev;
                w.record(now, TraceEvent::Cas { client: client.0, node: node.0, offset, expected, new, prev });
            }
        }
    }
    if !last {
        return;
    }
    let mut responses: Vec<Response> = Vec::new();
    let buf = core::mem::take(&mut fl.read_buf);
    let mut buf = Some(buf);
    for (i, shape) in fl.parts.iter().enumerate() {
        responses.push(match shape {
            Shape::Read => Response::Read(buf.take().unwrap_or_default()),
            Shape::Write => Response::Write,
            Shape::Cas => Response::Cas { prev: fl.cas_prev[i] },
        });
    }
    let resp = if responses.len() == 2 {
        let b = responses.pop().unwrap();
        let a = responses.pop().unwrap();
        Response::Pipelined(alloc::boxed::Box::new(a), alloc::boxed::Box::new(b))
    } else {
        responses.pop().unwrap_or(Response::Read(Vec::new()))
    };
    let back = w.link_delay(fl.client, node);
    drop(w);
    let reply = fl.reply.clone();
    drop(fl);
    sh.schedule(now + back, move |sh| sh.complete(&reply, resp));
}
