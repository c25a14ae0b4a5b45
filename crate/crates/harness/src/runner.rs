//! Scenario execution and end-of-run checking.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use swarm_core::checker::{
    AuditReport, BruteVerdict, History, MaxOp, Op, OpKind as CheckKind, audit_trace, check_bruteforce,
    check_construction, check_max_register, max_ops_from_trace,
};
use swarm_core::fabric::{BoxFut, ClientId, Fabric, NodeId, Tick, join_all};
use swarm_core::innout::InnOutStats;
use swarm_core::kvstore::{KvClient, KvError, KvOutcome, KvResult, KvStore};
use swarm_core::safeguess::{ReadPath, WritePath};
use swarm_core::trace::{TraceEvent, TraceRecord};
use swarm_core::value::value_id;

use crate::config::Scenario;
use crate::metrics::Metrics;
use crate::workload::{Generator, OpKind, PlannedOp, encode_value, key_name, preload_value_id};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("fabric: {0}")]
    Fabric(#[from] swarm_core::fabric::FabricError),
    #[error("store: {0}")]
    Store(#[from] KvError),
}

/// Which replication protocol serves gets and updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Swarm,
    /// Two-phase writes and max-register reads; inserts and deletes unchanged.
    Abd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Setup,
    Measured,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Updated,
    Value,
    NotFound,
    NoSuchKey,
    Error,
    Pending,
}

/// One journaled key-value operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistRecord {
    pub key: usize,
    pub client: u8,
    pub kind: OpKind,
    pub phase: Phase,
    /// Id of the value written, or of the value a get returned.
    pub value: Option<u64>,
    pub outcome: Outcome,
    pub invoke: Tick,
    pub response: Option<Tick>,
    pub ts: Option<u64>,
    pub reg: Option<u64>,
    pub roundtrips: u32,
    pub index_roundtrips: u32,
    pub meta_roundtrips: u32,
    pub read_path: Option<ReadPath>,
    pub write_path: Option<WritePath>,
    pub iterations: u32,
    pub widened: bool,
    pub error: Option<String>,
}

impl HistRecord {
    fn invoked(key: usize, client: u8, op: &PlannedOp, phase: Phase, at: Tick) -> HistRecord {
        HistRecord {
            key,
            client,
            kind: op.kind,
            phase,
            value: op.kind.writes().then_some(op.value),
            outcome: Outcome::Pending,
            invoke: at,
            response: None,
            ts: None,
            reg: None,
            roundtrips: 0,
            index_roundtrips: 0,
            meta_roundtrips: 0,
            read_path: None,
            write_path: None,
            iterations: 0,
            widened: false,
            error: None,
        }
    }

    fn complete(&mut self, at: Tick, res: Result<KvOutcome, KvError>) {
        self.response = Some(at);
        let o = match res {
            Ok(o) => o,
            Err(e) => {
                self.outcome = Outcome::Error;
                self.error = Some(e.to_string());
                return;
            }
        };
        self.outcome = match &o.result {
            KvResult::Ok => Outcome::Ok,
            KvResult::Updated => Outcome::Updated,
            KvResult::Value(b) => {
                self.value = value_id(b);
                Outcome::Value
            }
            KvResult::NotFound => Outcome::NotFound,
            KvResult::NoSuchKey => Outcome::NoSuchKey,
        };
        self.ts = o.ts;
        self.reg = o.reg;
        self.roundtrips = o.roundtrips;
        self.index_roundtrips = o.index_roundtrips;
        self.meta_roundtrips = o.meta_roundtrips;
        self.read_path = o.read_path;
        self.write_path = o.write_path;
        self.iterations = o.iterations;
        self.widened = o.widened;
    }

    pub fn failed(&self) -> bool {
        matches!(self.outcome, Outcome::Error | Outcome::Pending)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub keys: usize,
    pub brute_checked: usize,
    /// Keys whose history exceeded the brute-force bound.
    pub brute_skipped: usize,
    pub construction_checked: usize,
    /// Keys with deletes, which the timestamp construction does not cover.
    pub construction_skipped: usize,
    pub violations: Vec<KeyViolation>,
    /// Keys where exactly one of the two checkers accepted.
    pub disagreements: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyViolation {
    pub key: usize,
    pub checker: String,
    pub detail: String,
}

impl CheckReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.disagreements.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutput {
    pub scenario: String,
    pub seed: u64,
    pub protocol: Protocol,
    pub metrics: Metrics,
    pub clients: usize,
    pub finished_clients: usize,
    pub measured_start: Tick,
    /// Node crashes that took effect, with their tick.
    pub crashes: Vec<(u8, Tick)>,
    pub check: Option<CheckReport>,
    pub audit: Option<AuditReport>,
    pub max_register_violations: usize,
    /// Bound checks that fired inside the protocols.
    pub runtime_bounds: usize,
    #[serde(skip)]
    pub records: Vec<HistRecord>,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

impl RunOutput {
    pub fn liveness_lost(&self) -> bool {
        self.finished_clients < self.clients
    }

    pub fn measured(&self) -> impl Iterator<Item = &HistRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Measured)
    }

    /// Everything checked came out clean.
    pub fn is_clean(&self) -> bool {
        !self.liveness_lost()
            && self.metrics.failed == 0
            && self.check.as_ref().is_none_or(CheckReport::is_clean)
            && self.audit.as_ref().is_none_or(AuditReport::is_clean)
            && self.max_register_violations == 0
            && self.runtime_bounds == 0
    }
}

struct Shared {
    journal: RefCell<Vec<HistRecord>>,
    measured_done: Cell<u64>,
    pending_crashes: RefCell<Vec<(u64, u8)>>,
    crashes: RefCell<Vec<(u8, Tick)>>,
    finished: Cell<usize>,
    measured_start: Cell<Tick>,
    baseline: RefCell<Vec<(InnOutStats, u64)>>,
}

pub fn run_scenario(sc: &Scenario, protocol: Protocol) -> Result<RunOutput, RunError> {
    sc.validate().map_err(|(p, m)| RunError::Config(format!("{p}: {m}")))?;
    let fabric = Fabric::new(sc.fabric_config())?;
    let kv = KvStore::new(fabric.clone(), sc.kv_config())?;
    let w = &sc.workload;
    let n = w.clients;
    let clients: Vec<Rc<KvClient>> =
        (0..n).map(|c| Rc::new(kv.client(ClientId(c as u8), sc.clients.skew_of(c)))).collect();
    let shared = Rc::new(Shared {
        journal: RefCell::new(Vec::new()),
        measured_done: Cell::new(0),
        pending_crashes: RefCell::new(sc.faults.crash.iter().filter_map(|c| Some((c.after_ops?, c.node))).collect()),
        crashes: RefCell::new(Vec::new()),
        finished: Cell::new(0),
        measured_start: Cell::new(0),
        baseline: RefCell::new(Vec::new()),
    });
    let seed = w.seed.unwrap_or(sc.fabric.seed);
    fabric.spawn(drive(fabric.clone(), clients.clone(), shared.clone(), sc.clone(), seed, protocol));
    fabric.run();

    let trace = fabric.take_trace();
    let mut crashes = shared.crashes.borrow().clone();
    for c in &sc.faults.crash {
        if let Some(at) = c.at
            && at <= fabric.now()
        {
            crashes.push((c.node, at));
        }
    }
    crashes.sort_by_key(|&(_, t)| t);
    let records = shared.journal.borrow().clone();
    let baseline = shared.baseline.borrow().clone();
    let deltas: Vec<(InnOutStats, u64)> = clients
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (s0, st0) = baseline.get(i).copied().unwrap_or_default();
            let s = *c.innout_stats.borrow();
            (
                InnOutStats {
                    inplace_hits: s.inplace_hits - s0.inplace_hits,
                    inplace_misses: s.inplace_misses - s0.inplace_misses,
                    fetches: s.fetches - s0.fetches,
                    cas_retries: s.cas_retries - s0.cas_retries,
                    buffers_written: s.buffers_written - s0.buffers_written,
                },
                c.stale_guesses() - st0,
            )
        })
        .collect();
    let metrics = Metrics::collect(
        records.iter().filter(|r| r.phase == Phase::Measured),
        n,
        &deltas,
        fabric.now() - shared.measured_start.get(),
    );
    let check = sc.check.enabled.then(|| check_records(&records, sc.check.bound));
    let audit = (sc.check.enabled && sc.check.audit).then(|| audit_trace(&trace));
    let max_register_violations = match sc.check.enabled && sc.check.max_register {
        true => max_register_violations(&trace),
        false => 0,
    };
    let runtime_bounds = trace.iter().filter(|r| matches!(r.event, TraceEvent::Bound { .. })).count();
    Ok(RunOutput {
        scenario: sc.name.clone(),
        seed,
        protocol,
        metrics,
        clients: n,
        finished_clients: shared.finished.get(),
        measured_start: shared.measured_start.get(),
        crashes,
        check,
        audit,
        max_register_violations,
        runtime_bounds,
        records,
        trace,
    })
}

async fn drive(
    fabric: Fabric,
    clients: Vec<Rc<KvClient>>,
    shared: Rc<Shared>,
    sc: Scenario,
    seed: u64,
    protocol: Protocol,
) {
    let w = sc.workload.clone();
    let n = clients.len();
    let plans: Vec<Vec<(PlannedOp, Tick)>> = (0..n)
        .map(|c| {
            let mut g = Generator::new(&sc.workload_of(c), seed, c as u8);
            (0..w.ops_per_client).map(|_| (g.next_op(), g.think())).collect()
        })
        .collect();
    let touched: Vec<BTreeSet<usize>> = plans.iter().map(|p| p.iter().map(|(o, _)| o.key).collect()).collect();
    if w.preload {
        let all: Vec<usize> = touched.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let futs: Vec<BoxFut<()>> = clients
            .iter()
            .enumerate()
            .map(|(c, cl)| {
                let (cl, f, sh, size) = (cl.clone(), fabric.clone(), shared.clone(), w.value_size);
                let keys: Vec<usize> = all.iter().copied().skip(c).step_by(n).collect();
                Box::pin(async move {
                    for k in keys {
                        let op = PlannedOp { kind: OpKind::Insert, key: k, value: preload_value_id(k) };
                        execute(&f, &cl, &sh, op, Phase::Setup, size, Protocol::Swarm).await;
                    }
                }) as BoxFut<()>
            })
            .collect();
        join_all(futs).await;
    }
    if w.warm {
        let futs: Vec<BoxFut<()>> = clients
            .iter()
            .zip(&touched)
            .map(|(cl, keys)| {
                let (cl, f, sh) = (cl.clone(), fabric.clone(), shared.clone());
                let keys = keys.clone();
                Box::pin(async move {
                    for k in keys {
                        let op = PlannedOp { kind: OpKind::Get, key: k, value: 0 };
                        execute(&f, &cl, &sh, op, Phase::Setup, 0, protocol).await;
                    }
                }) as BoxFut<()>
            })
            .collect();
        join_all(futs).await;
    }
    *shared.baseline.borrow_mut() = clients.iter().map(|c| (*c.innout_stats.borrow(), c.stale_guesses())).collect();
    shared.measured_start.set(fabric.now());
    let futs: Vec<BoxFut<()>> = clients
        .iter()
        .zip(plans)
        .map(|(cl, plan)| {
            let (cl, f, sh, size) = (cl.clone(), fabric.clone(), shared.clone(), w.value_size);
            Box::pin(async move {
                for (op, think) in plan {
                    execute(&f, &cl, &sh, op, Phase::Measured, size, protocol).await;
                    if think > 0 {
                        f.sleep(think).await;
                    }
                }
                sh.finished.set(sh.finished.get() + 1);
            }) as BoxFut<()>
        })
        .collect();
    join_all(futs).await;
}

async fn execute(
    fabric: &Fabric,
    cl: &KvClient,
    shared: &Shared,
    op: PlannedOp,
    phase: Phase,
    size: usize,
    protocol: Protocol,
) {
    let idx = {
        let mut j = shared.journal.borrow_mut();
        j.push(HistRecord::invoked(op.key, cl.id().0, &op, phase, fabric.now()));
        j.len() - 1
    };
    let key = key_name(op.key);
    let value = encode_value(op.value, size);
    let res = match (op.kind, protocol) {
        (OpKind::Get, Protocol::Swarm) => cl.get(&key).await,
        (OpKind::Get, Protocol::Abd) => cl.abd_get(&key).await,
        (OpKind::Update, Protocol::Swarm) => cl.update(&key, &value).await,
        (OpKind::Update, Protocol::Abd) => cl.abd_update(&key, &value).await,
        (OpKind::Insert, _) => cl.insert(&key, &value).await,
        (OpKind::Delete, _) => cl.delete(&key).await,
    };
    shared.journal.borrow_mut()[idx].complete(fabric.now(), res);
    if phase == Phase::Measured {
        let done = shared.measured_done.get() + 1;
        shared.measured_done.set(done);
        let due: Vec<u8> = {
            let mut p = shared.pending_crashes.borrow_mut();
            let due = p.iter().filter(|&&(n, _)| n <= done).map(|&(_, node)| node).collect();
            p.retain(|&(n, _)| n > done);
            due
        };
        for node in due {
            if !fabric.is_crashed(NodeId(node)) && fabric.crash(NodeId(node)).is_ok() {
                shared.crashes.borrow_mut().push((node, fabric.now()));
            }
        }
    }
}

/// Register operation a journaled record stands for, if any.
pub fn checker_op(r: &HistRecord) -> Option<Op> {
    let client = r.client as u32;
    let read = |value| Op::read(client, value, r.invoke, r.response.unwrap_or(r.invoke));
    let write = |value| Op { client, kind: CheckKind::Write, value, invoke: r.invoke, response: r.response, ts: r.ts };
    let pending_write = |value| Op { response: None, ts: None, ..write(value) };
    Some(match (r.kind, r.outcome) {
        (OpKind::Get, Outcome::Value) => read(r.value),
        (OpKind::Get, Outcome::NotFound | Outcome::NoSuchKey) => read(None),
        (OpKind::Get, _) => return None,
        (OpKind::Update | OpKind::Insert, Outcome::Ok | Outcome::Updated) => write(r.value),
        (OpKind::Delete, Outcome::Ok) => write(None),
        (_, Outcome::NoSuchKey | Outcome::NotFound) => read(None),
        (OpKind::Delete, _) => pending_write(None),
        (_, _) => pending_write(r.value),
    })
}

/// Checks every key's history with both checkers.
pub fn check_records(records: &[HistRecord], bound: usize) -> CheckReport {
    let mut per_key: BTreeMap<usize, Vec<Op>> = BTreeMap::new();
    for r in records {
        if let Some(op) = checker_op(r) {
            per_key.entry(r.key).or_default().push(op);
        }
    }
    let mut rep = CheckReport { keys: per_key.len(), ..CheckReport::default() };
    for (key, ops) in per_key {
        let has_delete = ops.iter().any(|o| o.kind == CheckKind::Write && o.value.is_none());
        let h = History::new(ops);
        let brute = match check_bruteforce(&h, bound) {
            Ok(v) => {
                rep.brute_checked += 1;
                if let BruteVerdict::Violation(w) = &v {
                    rep.violations.push(KeyViolation {
                        key,
                        checker: "bruteforce".into(),
                        detail: format!("no linearization; minimal core {:?}", w.core),
                    });
                }
                Some(v.is_linearizable())
            }
            Err(_) => {
                rep.brute_skipped += 1;
                None
            }
        };
        let built = match has_delete {
            true => {
                rep.construction_skipped += 1;
                None
            }
            false => {
                rep.construction_checked += 1;
                let r = check_construction(&h);
                if let Err(e) = &r {
                    rep.violations.push(KeyViolation { key, checker: "construction".into(), detail: e.to_string() });
                }
                Some(r.is_ok())
            }
        };
        if let (Some(a), Some(b)) = (brute, built)
            && a != b
        {
            rep.disagreements.push(key);
        }
    }
    rep
}

/// Max-register property violations over every register in the trace.
pub fn max_register_violations(trace: &[TraceRecord]) -> usize {
    let mut by_reg: BTreeMap<u64, Vec<MaxOp>> = BTreeMap::new();
    for op in max_ops_from_trace(trace) {
        by_reg.entry(op.reg).or_default().push(op);
    }
    by_reg.values().map(|ops| check_max_register(ops).len()).sum()
}
