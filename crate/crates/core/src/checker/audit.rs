use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::fabric::Tick;
use crate::safeguess::{ReadPath, WritePath};
use crate::trace::{BoundKind, MaxRegKind, TraceEvent, TraceRecord, TrylockRecord};
use crate::tslock::LockMode;

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AuditViolation {
    /// A CAS observed a word smaller than a value the word held earlier.
    CellRegression {
        node: u8,
        offset: u64,
        at: Tick,
        seen: u64,
        earlier: u64,
    },
    /// A successful CAS did not increase the word.
    NonIncreasingCas {
        node: u8,
        offset: u64,
        at: Tick,
        prev: u64,
        new: u64,
    },
    /// Two consecutive reads of one operation returned `rank` although a
    /// larger write finished before any write of `rank` started.
    DoubleRead {
        client: u8,
        reg: u64,
        op: u64,
        rank: u64,
        larger: u64,
    },
    /// A read-loop read of the max register returned less than a read-loop
    /// read that finished before it started.
    ReadLoopOrder {
        reg: u64,
        first: (u8, u64),
        second: (u8, u64),
        rank: u64,
        earlier: u64,
    },
    ReadIterations {
        client: u8,
        reg: u64,
        op: u64,
        iterations: u32,
        bound: u32,
    },
    MaxRegPhases {
        client: u8,
        reg: u64,
        kind: MaxRegKind,
        phases: u32,
    },
    CasPerCell {
        client: u8,
        reg: u64,
        ts: u64,
        cas: u32,
    },
    /// A reader returned a guessed value through the lock path and its
    /// writer also rewrote that value under a new timestamp.
    DoubleOrdering {
        reg: u64,
        reader: u8,
        writer: u8,
        ts: u64,
        rank: u64,
    },
    /// Both modes acquired the same lock timestamp.
    LockExclusion {
        reg: u64,
        owner: u8,
        ts: u64,
    },
    /// A trylock failed without any conflicting call having started.
    UnjustifiedFailure {
        client: u8,
        reg: u64,
        owner: u8,
        ts: u64,
    },
    /// A bound check inside a protocol fired at run time.
    Runtime {
        client: u8,
        reg: u64,
        kind: BoundKind,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AuditReport {
    pub cas_checked: usize,
    pub read_pairs_checked: usize,
    pub read_loops_checked: usize,
    pub trylocks_checked: usize,
    pub violations: Vec<AuditViolation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks protocol invariants over an event log.
pub fn audit_trace(trace: &[TraceRecord]) -> AuditReport {
    let mut rep = AuditReport::default();
    cells(trace, &mut rep);
    double_reads(trace, &mut rep);
    read_loop_order(trace, &mut rep);
    bounds(trace, &mut rep);
    locks(trace, &mut rep);
    orderings(trace, &mut rep);
    rep
}

fn cells(trace: &[TraceRecord], rep: &mut AuditReport) {
    let mut top: BTreeMap<(u8, u64), u64> = BTreeMap::new();
    for r in trace {
        let TraceEvent::Cas { node, offset, expected, new, prev, .. } = r.event else {
            continue;
        };
        rep.cas_checked += 1;
        let cur = top.entry((node, offset)).or_insert(0);
        if prev < *cur {
            rep.violations.push(AuditViolation::CellRegression { node, offset, at: r.at, seen: prev, earlier: *cur });
        }
        *cur = (*cur).max(prev);
        if prev == expected {
            if new <= prev {
                rep.violations.push(AuditViolation::NonIncreasingCas { node, offset, at: r.at, prev, new });
            }
            *cur = (*cur).max(new);
        }
    }
}

fn double_reads(trace: &[TraceRecord], rep: &mut AuditReport) {
    // per register: first invocation of each written rank, and completed writes
    let mut first_invoke: BTreeMap<(u64, u64), Tick> = BTreeMap::new();
    let mut writes: BTreeMap<u64, Vec<(Tick, u64)>> = BTreeMap::new();
    let mut reads: BTreeMap<(u8, u64, u64), Vec<(u64, Tick)>> = BTreeMap::new();
    for r in trace {
        let TraceEvent::MaxReg(m) = &r.event else { continue };
        match m.kind {
            MaxRegKind::Write => {
                let e = first_invoke.entry((m.reg, m.rank)).or_insert(m.invoke);
                *e = (*e).min(m.invoke);
                writes.entry(m.reg).or_default().push((m.response, m.rank));
            }
            _ if m.op != 0 => reads.entry((m.client, m.reg, m.op)).or_default().push((m.rank, m.invoke)),
            _ => {}
        }
    }
    for w in writes.values_mut() {
        w.sort();
    }
    for ((client, reg, op), seq) in &reads {
        for pair in seq.windows(2) {
            let a = pair[0].0;
            if a == 0 || pair[1].0 != a {
                continue;
            }
            rep.read_pairs_checked += 1;
            let Some(&start) = first_invoke.get(&(*reg, a)) else { continue };
            let Some(ws) = writes.get(reg) else { continue };
            if let Some(&(_, b)) = ws.iter().take_while(|(resp, _)| *resp < start).find(|(_, b)| *b > a) {
                rep.violations.push(AuditViolation::DoubleRead {
                    client: *client,
                    reg: *reg,
                    op: *op,
                    rank: a,
                    larger: b,
                });
            }
        }
    }
}

fn read_loop_order(trace: &[TraceRecord], rep: &mut AuditReport) {
    let loops: BTreeSet<(u8, u64, u64)> = trace
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::ReadLoop(l) => Some((l.client, l.reg, l.op)),
            _ => None,
        })
        .collect();
    // (response, invoke, rank, client, op)
    type LoopRead = (Tick, Tick, u64, u8, u64);
    let mut reads: BTreeMap<u64, Vec<LoopRead>> = BTreeMap::new();
    for r in trace {
        let TraceEvent::MaxReg(m) = &r.event else { continue };
        if m.kind != MaxRegKind::Write && loops.contains(&(m.client, m.reg, m.op)) {
            reads.entry(m.reg).or_default().push((m.response, m.invoke, m.rank, m.client, m.op));
        }
    }
    for (reg, mut rs) in reads {
        rs.sort();
        let mut best: Vec<usize> = Vec::with_capacity(rs.len());
        for i in 0..rs.len() {
            best.push(match best.last() {
                Some(&b) if rs[b].2 >= rs[i].2 => b,
                _ => i,
            });
        }
        for r in &rs {
            let n = rs.partition_point(|x| x.0 < r.1);
            if n > 0 && rs[best[n - 1]].2 > r.2 {
                let e = rs[best[n - 1]];
                rep.violations.push(AuditViolation::ReadLoopOrder {
                    reg,
                    first: (e.3, e.4),
                    second: (r.3, r.4),
                    rank: r.2,
                    earlier: e.2,
                });
            }
        }
    }
}

fn bounds(trace: &[TraceRecord], rep: &mut AuditReport) {
    for r in trace {
        match &r.event {
            TraceEvent::ReadLoop(l) => {
                rep.read_loops_checked += 1;
                let bound = 2 * l.writers + 1;
                if l.iterations > bound {
                    rep.violations.push(AuditViolation::ReadIterations {
                        client: l.client,
                        reg: l.reg,
                        op: l.op,
                        iterations: l.iterations,
                        bound,
                    });
                }
            }
            TraceEvent::MaxReg(m) => {
                let ok = match m.kind {
                    MaxRegKind::Write => m.phases <= 1,
                    MaxRegKind::Read => (1..=2).contains(&m.phases),
                    MaxRegKind::WeakRead => m.phases == 1,
                };
                if !ok {
                    rep.violations.push(AuditViolation::MaxRegPhases {
                        client: m.client,
                        reg: m.reg,
                        kind: m.kind,
                        phases: m.phases,
                    });
                }
            }
            TraceEvent::Trylock(t) => {
                if t.max_cell_cas as u64 > t.ts.saturating_add(1) {
                    rep.violations.push(AuditViolation::CasPerCell {
                        client: t.client,
                        reg: t.reg,
                        ts: t.ts,
                        cas: t.max_cell_cas,
                    });
                }
            }
            TraceEvent::Bound { client, reg, kind } => {
                rep.violations.push(AuditViolation::Runtime { client: *client, reg: *reg, kind: kind.clone() })
            }
            _ => {}
        }
    }
}

fn locks(trace: &[TraceRecord], rep: &mut AuditReport) {
    let mut by_lock: BTreeMap<(u64, u8), Vec<&TrylockRecord>> = BTreeMap::new();
    for r in trace {
        if let TraceEvent::Trylock(t) = &r.event {
            rep.trylocks_checked += 1;
            by_lock.entry((t.reg, t.owner)).or_default().push(t);
        }
    }
    for ((reg, owner), calls) in &by_lock {
        let mut granted: BTreeMap<u64, (bool, bool)> = BTreeMap::new();
        for t in calls.iter().filter(|t| t.granted) {
            let e = granted.entry(t.ts).or_default();
            match t.mode {
                LockMode::Read => e.0 = true,
                LockMode::Write => e.1 = true,
            }
        }
        for (ts, (r, w)) in granted {
            if r && w {
                rep.violations.push(AuditViolation::LockExclusion { reg: *reg, owner: *owner, ts });
            }
        }
        for t in calls.iter().filter(|t| !t.granted) {
            let justified =
                calls.iter().any(|o| o.invoke <= t.response && (o.ts > t.ts || (o.ts == t.ts && o.mode != t.mode)));
            if !justified {
                rep.violations.push(AuditViolation::UnjustifiedFailure {
                    client: t.client,
                    reg: *reg,
                    owner: *owner,
                    ts: t.ts,
                });
            }
        }
    }
}

fn orderings(trace: &[TraceRecord], rep: &mut AuditReport) {
    let relocked: BTreeMap<(u64, u8, u64), u64> = trace
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::GuessWrite(g) if g.path == WritePath::Relocked => Some(((g.reg, g.client, g.guessed), g.rank)),
            _ => None,
        })
        .collect();
    for r in trace {
        let TraceEvent::ReadLoop(l) = &r.event else { continue };
        if l.path != ReadPath::Locked {
            continue;
        }
        let writer = l.ts as u8;
        if let Some(&rank) = relocked.get(&(l.reg, writer, l.ts)) {
            rep.violations.push(AuditViolation::DoubleOrdering {
                reg: l.reg,
                reader: l.client,
                writer,
                ts: l.ts,
                rank,
            });
        }
    }
}
