//! Replicated timestamp lock.
//!
//! Each memory node holds one 8-byte cell storing `(ts, mode)` packed as
//! `ts << 1 | mode`, zero meaning empty. `trylock(ts, mode)` raises every
//! cell it reaches to `(ts, mode)` with a CAS loop and, once a majority of
//! cells are done, succeeds unless some cell showed a larger timestamp or
//! the same timestamp in the other mode. Cells only ever increase, so two
//! calls with the same timestamp and different modes cannot both succeed.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::fabric::{BoxFut, ClientId, Fabric, Launch, NodeId, Request, gather};
use crate::maxreg::QuorumOptions;
use crate::trace::{BoundKind, TraceEvent, TrylockRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LockMode {
    Read = 0,
    Write = 1,
}

impl LockMode {
    pub fn other(self) -> LockMode {
        match self {
            LockMode::Read => LockMode::Write,
            LockMode::Write => LockMode::Read,
        }
    }
}

/// Largest lock timestamp that fits in a cell.
pub const MAX_LOCK_TS: u64 = (1 << 63) - 1;

pub const fn pack_cell(ts: u64, mode: LockMode) -> u64 {
    (ts << 1) | mode as u64
}

pub const fn cell_ts(cell: u64) -> u64 {
    cell >> 1
}

/// Per-cell CAS loop, kept free of I/O so it can be driven by the simulator
/// or by an exhaustive interleaving explorer.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellAttempt {
    ts: u64,
    mode: LockMode,
    read: u64,
    cas: u32,
}

impl CellAttempt {
    /// `initial` is any value the cell was previously seen to hold.
    pub fn new(ts: u64, mode: LockMode, initial: u64) -> Self {
        CellAttempt { ts, mode, read: initial, cas: 0 }
    }

    /// The next `(expected, new)` CAS to issue, or `None` when finished.
    pub fn next_cas(&self) -> Option<(u64, u64)> {
        (cell_ts(self.read) < self.ts).then(|| (self.read, pack_cell(self.ts, self.mode)))
    }

    /// Feeds the value the CAS found in the cell.
    pub fn on_prev(&mut self, prev: u64) {
        let (expected, new) = self.next_cas().expect("CAS issued on a finished cell");
        self.cas += 1;
        self.read = if prev == expected { new } else { prev };
    }

    pub fn is_done(&self) -> bool {
        self.next_cas().is_none()
    }

    /// Last value observed in the cell.
    pub fn observed(&self) -> u64 {
        self.read
    }

    pub fn cas_issued(&self) -> u32 {
        self.cas
    }
}

/// Outcome given the final observations of a majority of cells.
pub fn decide(ts: u64, mode: LockMode, observed: impl IntoIterator<Item = u64>) -> bool {
    let conflict = pack_cell(ts, mode.other());
    observed.into_iter().all(|c| cell_ts(c) <= ts && c != conflict)
}

/// Why a trylock returned false.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LockConflict {
    /// Some cell held a larger timestamp.
    HigherTs,
    /// Some cell held the same timestamp in the other mode.
    OtherMode,
}

/// The conflict shown by `observed`, if any; a larger timestamp wins.
pub fn conflict(ts: u64, mode: LockMode, observed: impl IntoIterator<Item = u64> + Clone) -> Option<LockConflict> {
    let other = pack_cell(ts, mode.other());
    if observed.clone().into_iter().any(|c| cell_ts(c) > ts) {
        Some(LockConflict::HigherTs)
    } else if observed.into_iter().any(|c| c == other) {
        Some(LockConflict::OtherMode)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrylockReport {
    pub granted: bool,
    pub conflict: Option<LockConflict>,
    /// CAS waves on the critical path; zero when cached observations sufficed.
    pub phases: u32,
    pub max_cell_cas: u32,
    pub widened: bool,
}

/// One client's handle on the lock cells of one lock.
pub struct TimestampLock {
    fabric: Fabric,
    client: ClientId,
    reg_id: u64,
    owner: u8,
    /// `(node, offset)` of each cell in preference order.
    cells: Vec<(NodeId, u64)>,
    /// Largest value seen in each cell.
    cache: Rc<RefCell<Vec<u64>>>,
    opts: QuorumOptions,
}

impl TimestampLock {
    pub fn new(
        fabric: Fabric,
        client: ClientId,
        reg_id: u64,
        owner: u8,
        cells: Vec<(NodeId, u64)>,
        opts: QuorumOptions,
    ) -> Self {
        let cache = Rc::new(RefCell::new(alloc::vec![0; cells.len()]));
        TimestampLock { fabric, client, reg_id, owner, cells, cache, opts }
    }

    pub fn owner(&self) -> u8 {
        self.owner
    }

    pub async fn trylock(&self, ts: u64, mode: LockMode) -> TrylockReport {
        assert!(ts <= MAX_LOCK_TS, "lock timestamp overflows a cell");
        let invoke = self.fabric.now();
        let maj = self.cells.len() / 2 + 1;
        let launches = (0..self.cells.len())
            .map(|pos| {
                let (node, offset) = self.cells[pos];
                let fabric = self.fabric.clone();
                let client = self.client;
                let cache = self.cache.clone();
                let initial = self.cache.borrow()[pos];
                let eager = !self.opts.majority_first || pos < maj;
                Launch::new(pos, eager, move || -> BoxFut<CellAttempt> {
                    Box::pin(async move {
                        let mut a = CellAttempt::new(ts, mode, initial);
                        while let Some((expected, new)) = a.next_cas() {
                            let prev = fabric
                                .issue(client, node, Request::Cas { offset, expected, new })
                                .expect("lock cell in range")
                                .await
                                .cas_prev();
                            a.on_prev(prev);
                            let mut c = cache.borrow_mut();
                            c[pos] = c[pos].max(a.observed());
                        }
                        a
                    })
                })
            })
            .collect();
        let g = gather(&self.fabric, launches, maj, self.opts.widen_after).await;
        if g.widened {
            self.fabric.record(TraceEvent::Widen { client: self.client.0 });
        }
        let granted = decide(ts, mode, g.done.iter().map(|(_, a)| a.observed()));
        let why = conflict(ts, mode, g.done.iter().map(|(_, a)| a.observed()));
        let max_cell_cas = g.done.iter().map(|(_, a)| a.cas_issued()).max().unwrap_or(0);
        if max_cell_cas as u64 > ts.saturating_add(1) {
            self.fabric.record(TraceEvent::Bound {
                client: self.client.0,
                reg: self.reg_id,
                kind: BoundKind::CasPerCell { cas: max_cell_cas, ts },
            });
        }
        self.fabric.record(TraceEvent::Trylock(TrylockRecord {
            client: self.client.0,
            reg: self.reg_id,
            owner: self.owner,
            ts,
            mode,
            granted,
            invoke,
            response: self.fabric.now(),
            max_cell_cas,
            phases: max_cell_cas,
        }));
        TrylockReport { granted, conflict: why, phases: max_cell_cas, max_cell_cas, widened: g.widened }
    }
}

/// Setup for [`explore_exclusion`].
#[derive(Clone, Debug)]
pub struct ExplorationSetup {
    pub ts: u64,
    /// Initial contents of each cell.
    pub cells: Vec<u64>,
    /// Cached cell values each locker starts from, per cell.
    pub read_cache: Vec<u64>,
    pub write_cache: Vec<u64>,
    /// Allow one cell to crash at any point.
    pub crashes: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExplorationReport {
    pub states: usize,
    pub decisions: usize,
    /// Reachable states in which both lockers returned true.
    pub double_grants: usize,
    /// States in which a locker returned false with no conflicting value
    /// present in any cell.
    pub unjustified: usize,
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Link {
    Idle,
    /// CAS applied at the cell, response not yet delivered.
    InFlight(u64),
    Done,
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Locker {
    attempts: Vec<CellAttempt>,
    links: Vec<Link>,
    result: Option<bool>,
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
struct World {
    cells: Vec<u64>,
    crashed: Option<usize>,
    lockers: [Locker; 2],
}

/// Enumerates every interleaving of one `(ts, Read)` and one `(ts, Write)`
/// trylock over the given cells. Each CAS is split into its atomic
/// application at the cell and the delivery of its result; a locker may
/// decide at any point once a majority of its cells are done, and one cell
/// may crash at any point.
pub fn explore_exclusion(setup: &ExplorationSetup) -> ExplorationReport {
    let n = setup.cells.len();
    let mk = |mode: LockMode, cache: &[u64]| Locker {
        attempts: (0..n).map(|c| CellAttempt::new(setup.ts, mode, cache[c])).collect(),
        links: (0..n)
            .map(|c| if CellAttempt::new(setup.ts, mode, cache[c]).is_done() { Link::Done } else { Link::Idle })
            .collect(),
        result: None,
    };
    let start = World {
        cells: setup.cells.clone(),
        crashed: None,
        lockers: [mk(LockMode::Read, &setup.read_cache), mk(LockMode::Write, &setup.write_cache)],
    };
    let mut seen = BTreeSet::new();
    let mut report = ExplorationReport::default();
    let mut stack = alloc::vec![start];
    let modes = [LockMode::Read, LockMode::Write];
    while let Some(w) = stack.pop() {
        if !seen.insert(w.clone()) {
            continue;
        }
        report.states += 1;
        if w.lockers[0].result == Some(true) && w.lockers[1].result == Some(true) {
            report.double_grants += 1;
        }
        for (l, mode) in modes.iter().enumerate() {
            let lk = &w.lockers[l];
            if lk.result.is_none() {
                let done: Vec<usize> = (0..n).filter(|&c| lk.links[c] == Link::Done).collect();
                if done.len() > n / 2 {
                    let granted = decide(setup.ts, *mode, done.iter().map(|&c| lk.attempts[c].observed()));
                    report.decisions += 1;
                    if !granted {
                        let conflict = pack_cell(setup.ts, mode.other());
                        let any = w.cells.iter().any(|&c| cell_ts(c) > setup.ts || c == conflict);
                        if !any {
                            report.unjustified += 1;
                        }
                    }
                    let mut next = w.clone();
                    next.lockers[l].result = Some(granted);
                    stack.push(next);
                }
            }
            for c in 0..n {
                match lk.links[c] {
                    Link::Idle if w.crashed != Some(c) => {
                        let (expected, new) = lk.attempts[c].next_cas().unwrap();
                        let mut next = w.clone();
                        let prev = next.cells[c];
                        if prev == expected {
                            next.cells[c] = new;
                        }
                        next.lockers[l].links[c] = Link::InFlight(prev);
                        stack.push(next);
                    }
                    Link::InFlight(prev) => {
                        let mut next = w.clone();
                        let a = &mut next.lockers[l].attempts[c];
                        a.on_prev(prev);
                        next.lockers[l].links[c] = if a.is_done() { Link::Done } else { Link::Idle };
                        stack.push(next);
                    }
                    _ => {}
                }
            }
        }
        if setup.crashes && w.crashed.is_none() {
            for c in 0..n {
                let mut next = w.clone();
                next.crashed = Some(c);
                stack.push(next);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests;
