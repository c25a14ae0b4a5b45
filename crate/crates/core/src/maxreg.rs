//! Crash-tolerant max register built from one max register per memory node.
//!
//! A write only touches nodes whose cached value is below the new value and
//! returns once a majority is known to hold it. A read takes the largest value
//! of a majority and writes it back unless a majority already holds it.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::fabric::{BoxFut, ClientId, Fabric, Launch, NodeId, Request, Tick, gather, join2};
use crate::trace::{BoundKind, MaxRegKind, MaxRegRecord, TraceEvent};

/// Totally ordered value with a least element.
pub trait MaxValue: Clone + Ord + 'static {
    fn bottom() -> Self;
    /// Integer image of the order, recorded in traces.
    fn rank(&self) -> u64;
}

impl MaxValue for u64 {
    fn bottom() -> Self {
        0
    }
    fn rank(&self) -> u64 {
        *self
    }
}

/// Client-side access to the max register held by each memory node.
pub trait NodeRegister: 'static {
    type Value: MaxValue;

    /// Reads the node's register in one roundtrip.
    fn read(self: Rc<Self>, node: NodeId) -> BoxFut<Self::Value>;

    /// Raises the node's register to at least `v`; returns roundtrips used.
    fn write(self: Rc<Self>, node: NodeId, v: Self::Value) -> BoxFut<u32>;

    /// Reads and writes the node in the same phase. The read is ordered
    /// before the write at the node.
    fn write_read(self: Rc<Self>, node: NodeId, v: Self::Value) -> BoxFut<(u32, Self::Value)> {
        let r = self.clone().read(node);
        let w = self.write(node, v);
        Box::pin(async move {
            let (value, rtts) = join2(r, w).await;
            (rtts.max(1), value)
        })
    }

    /// Combines two observations of equal rank.
    fn merge(_into: &mut Self::Value, _other: &Self::Value) {}

    /// Whether `v` carries everything needed to write it elsewhere.
    fn is_resolved(_v: &Self::Value) -> bool {
        true
    }

    /// Fetches whatever `v` is missing; `None` if it could not be fetched.
    fn resolve(self: Rc<Self>, v: Self::Value) -> BoxFut<Option<(Self::Value, u32)>> {
        Box::pin(async move { Some((v, 0)) })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuorumOptions {
    /// Contact only a majority first and widen on timeout.
    pub majority_first: bool,
    pub widen_after: Tick,
}

impl Default for QuorumOptions {
    fn default() -> Self {
        QuorumOptions { majority_first: true, widen_after: 200 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WriteReport {
    /// Sequential waves of per-node register operations (0 or 1).
    pub phases: u32,
    /// Fabric roundtrips on the critical path.
    pub roundtrips: u32,
    pub widened: bool,
}

#[derive(Clone, Debug)]
pub struct ReadReport<V> {
    pub value: V,
    pub phases: u32,
    pub roundtrips: u32,
    pub widened: bool,
    pub wrote_back: bool,
}

/// One client's handle on a replicated max register.
pub struct MaxRegister<R: NodeRegister> {
    fabric: Fabric,
    reg: Rc<R>,
    client: ClientId,
    reg_id: u64,
    /// Replica nodes in preference order.
    nodes: Vec<NodeId>,
    /// Largest value known to be at each node.
    cache: Rc<RefCell<Vec<R::Value>>>,
    opts: QuorumOptions,
}

impl<R: NodeRegister> MaxRegister<R> {
    pub fn new(
        fabric: Fabric,
        reg: Rc<R>,
        client: ClientId,
        reg_id: u64,
        nodes: Vec<NodeId>,
        opts: QuorumOptions,
    ) -> Self {
        let cache = Rc::new(RefCell::new(nodes.iter().map(|_| R::Value::bottom()).collect()));
        MaxRegister { fabric, reg, client, reg_id, nodes, cache, opts }
    }

    pub fn node_register(&self) -> &Rc<R> {
        &self.reg
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    fn majority(&self) -> usize {
        self.nodes.len() / 2 + 1
    }

    fn eager(&self, pos: usize) -> bool {
        !self.opts.majority_first || pos < self.majority()
    }

    /// Nodes whose cached value is at least `v`.
    pub fn holders(&self, v: &R::Value) -> usize {
        self.cache.borrow().iter().filter(|c| *c >= v).count()
    }

    /// Records that `node` was seen holding at least `v`.
    pub fn observe(&self, node: NodeId, v: &R::Value) {
        if let Some(pos) = self.nodes.iter().position(|n| *n == node) {
            let mut c = self.cache.borrow_mut();
            if c[pos] < *v {
                c[pos] = v.clone();
            }
        }
    }

    pub async fn write(&self, v: R::Value, op: u64) -> WriteReport {
        let invoke = self.fabric.now();
        let report = self.inner_write(v.clone()).await;
        self.log(MaxRegKind::Write, op, invoke, v.rank(), report.phases);
        report
    }

    async fn inner_write(&self, v: R::Value) -> WriteReport {
        let maj = self.majority();
        let (satisfied, missing): (Vec<usize>, Vec<usize>) = {
            let c = self.cache.borrow();
            (0..self.nodes.len()).partition(|&i| c[i] >= v)
        };
        if satisfied.len() >= maj {
            return WriteReport::default();
        }
        let need = maj - satisfied.len();
        let launches = missing
            .iter()
            .enumerate()
            .map(|(rank, &pos)| {
                let reg = self.reg.clone();
                let node = self.nodes[pos];
                let cache = self.cache.clone();
                let v = v.clone();
                let eager = !self.opts.majority_first || rank < need;
                Launch::new(pos, eager, move || -> BoxFut<u32> {
                    Box::pin(async move {
                        let rtts = reg.write(node, v.clone()).await;
                        let mut c = cache.borrow_mut();
                        if c[pos] < v {
                            c[pos] = v;
                        }
                        rtts
                    })
                })
            })
            .collect();
        let g = gather(&self.fabric, launches, need, self.opts.widen_after).await;
        if g.widened {
            self.fabric.record(TraceEvent::Widen { client: self.client.0 });
        }
        WriteReport { phases: 1, roundtrips: g.done.iter().map(|(_, r)| *r).max().unwrap_or(0), widened: g.widened }
    }

    /// One read wave over a majority; returns the largest value seen.
    async fn read_phase(&self) -> (R::Value, bool) {
        let launches = (0..self.nodes.len())
            .map(|pos| {
                let reg = self.reg.clone();
                let node = self.nodes[pos];
                let cache = self.cache.clone();
                Launch::new(pos, self.eager(pos), move || -> BoxFut<R::Value> {
                    Box::pin(async move {
                        let v = reg.read(node).await;
                        let mut c = cache.borrow_mut();
                        if c[pos] < v {
                            c[pos] = v.clone();
                        }
                        v
                    })
                })
            })
            .collect();
        let g = gather(&self.fabric, launches, self.majority(), self.opts.widen_after).await;
        if g.widened {
            self.fabric.record(TraceEvent::Widen { client: self.client.0 });
        }
        (max_merged::<R>(g.done.into_iter().map(|(_, v)| v)), g.widened)
    }

    pub async fn read(&self, op: u64) -> ReadReport<R::Value> {
        let invoke = self.fabric.now();
        let mut roundtrips = 0;
        let mut widened = false;
        loop {
            let (mut value, w) = self.read_phase().await;
            roundtrips += 1;
            widened |= w;
            let mut phases = 1;
            let mut wrote_back = false;
            if self.holders(&value) < self.majority() {
                if !R::is_resolved(&value) {
                    match self.reg.clone().resolve(value).await {
                        Some((v, r)) => {
                            value = v;
                            roundtrips += r;
                        }
                        None => {
                            // holders became unreachable; start over
                            roundtrips += 1;
                            continue;
                        }
                    }
                }
                let wr = self.inner_write(value.clone()).await;
                phases += wr.phases;
                roundtrips += wr.roundtrips;
                widened |= wr.widened;
                wrote_back = wr.phases > 0;
            }
            self.check_phases(MaxRegKind::Read, phases, 1..=2);
            self.log(MaxRegKind::Read, op, invoke, value.rank(), phases);
            return ReadReport { value, phases, roundtrips, widened, wrote_back };
        }
    }

    /// Read without write-back: one phase, write-read monotone only.
    pub async fn weak_read(&self, op: u64) -> ReadReport<R::Value> {
        let invoke = self.fabric.now();
        let (value, widened) = self.read_phase().await;
        self.log(MaxRegKind::WeakRead, op, invoke, value.rank(), 1);
        ReadReport { value, phases: 1, roundtrips: 1, widened, wrote_back: false }
    }

    /// Writes `v` and weak-reads in the same phase. The returned value is
    /// the largest one a majority held before `v` landed there.
    pub async fn write_and_weak_read(&self, v: R::Value, op: u64) -> (ReadReport<R::Value>, WriteReport) {
        let invoke = self.fabric.now();
        let launches = (0..self.nodes.len())
            .map(|pos| {
                let reg = self.reg.clone();
                let node = self.nodes[pos];
                let cache = self.cache.clone();
                let v = v.clone();
                let needs_write = self.cache.borrow()[pos] < v;
                Launch::new(pos, self.eager(pos), move || -> BoxFut<(u32, R::Value)> {
                    Box::pin(async move {
                        let (rtts, seen) =
                            if needs_write { reg.write_read(node, v.clone()).await } else { (1, reg.read(node).await) };
                        let mut c = cache.borrow_mut();
                        let top = if seen > v { seen.clone() } else { v };
                        if c[pos] < top {
                            c[pos] = top;
                        }
                        (rtts, seen)
                    })
                })
            })
            .collect();
        let g = gather(&self.fabric, launches, self.majority(), self.opts.widen_after).await;
        if g.widened {
            self.fabric.record(TraceEvent::Widen { client: self.client.0 });
        }
        let roundtrips = g.done.iter().map(|(_, (r, _))| *r).max().unwrap_or(1);
        let seen = max_merged::<R>(g.done.into_iter().map(|(_, (_, s))| s));
        self.log(MaxRegKind::Write, op, invoke, v.rank(), 1);
        self.log(MaxRegKind::WeakRead, op, invoke, seen.rank(), 1);
        (
            ReadReport { value: seen, phases: 1, roundtrips, widened: g.widened, wrote_back: false },
            WriteReport { phases: 1, roundtrips, widened: g.widened },
        )
    }

    /// Fetches the missing parts of `v`.
    pub async fn resolve(&self, v: R::Value) -> Option<(R::Value, u32)> {
        if R::is_resolved(&v) {
            return Some((v, 0));
        }
        self.reg.clone().resolve(v).await
    }

    fn check_phases(&self, kind: MaxRegKind, phases: u32, ok: core::ops::RangeInclusive<u32>) {
        if !ok.contains(&phases) {
            self.fabric.record(TraceEvent::Bound {
                client: self.client.0,
                reg: self.reg_id,
                kind: BoundKind::MaxRegPhases { kind, phases },
            });
        }
    }

    fn log(&self, kind: MaxRegKind, op: u64, invoke: Tick, rank: u64, phases: u32) {
        self.fabric.record(TraceEvent::MaxReg(MaxRegRecord {
            client: self.client.0,
            reg: self.reg_id,
            op,
            kind,
            invoke,
            response: self.fabric.now(),
            rank,
            phases,
        }));
    }
}

fn max_merged<R: NodeRegister>(values: impl Iterator<Item = R::Value>) -> R::Value {
    let mut best: Option<R::Value> = None;
    for v in values {
        match &mut best {
            None => best = Some(v),
            Some(b) if v > *b => *b = v,
            Some(b) if v == *b => R::merge(b, &v),
            _ => {}
        }
    }
    best.unwrap_or_else(R::Value::bottom)
}

/// Per-node max register kept in one 8-byte word, raised with a CAS loop.
pub struct WordRegister {
    fabric: Fabric,
    client: ClientId,
    offset: u64,
}

impl WordRegister {
    pub fn new(fabric: Fabric, client: ClientId, offset: u64) -> Self {
        WordRegister { fabric, client, offset }
    }
}

impl NodeRegister for WordRegister {
    type Value = u64;

    fn read(self: Rc<Self>, node: NodeId) -> BoxFut<u64> {
        Box::pin(async move {
            let r = self
                .fabric
                .issue(self.client, node, Request::Read { offset: self.offset, len: 8 })
                .expect("register word in range")
                .await;
            u64::from_le_bytes(r.into_bytes()[..8].try_into().unwrap())
        })
    }

    fn write(self: Rc<Self>, node: NodeId, v: u64) -> BoxFut<u32> {
        Box::pin(async move {
            let mut expected = 0u64;
            let mut rounds = 0;
            loop {
                rounds += 1;
                let prev = self
                    .fabric
                    .issue(self.client, node, Request::Cas { offset: self.offset, expected, new: v })
                    .expect("register word in range")
                    .await
                    .cas_prev();
                if prev == expected || prev >= v {
                    return rounds;
                }
                expected = prev;
            }
        })
    }
}

#[cfg(test)]
mod tests;
