use alloc::vec::Vec;

use crate::fabric::Tick;
use crate::trace::{MaxRegKind, TraceEvent, TraceRecord};

/// One completed max-register operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaxOp {
    pub client: u8,
    pub reg: u64,
    pub kind: MaxRegKind,
    pub invoke: Tick,
    pub response: Tick,
    pub rank: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaxRegViolation {
    /// A read returned a value no write had started writing.
    Validity { read: usize },
    /// `first` finished before `second` started yet returned more.
    ReadRead { first: usize, second: usize },
    /// `read` started after `write` finished yet returned less.
    WriteRead { write: usize, read: usize },
}

pub fn max_ops_from_trace(trace: &[TraceRecord]) -> Vec<MaxOp> {
    trace
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::MaxReg(m) => Some(MaxOp {
                client: m.client,
                reg: m.reg,
                kind: m.kind,
                invoke: m.invoke,
                response: m.response,
                rank: m.rank,
            }),
            _ => None,
        })
        .collect()
}

/// Checks validity, read-read monotonicity (full reads only) and write-read
/// monotonicity (all reads) of one register's operations.
pub fn check_max_register(ops: &[MaxOp]) -> Vec<MaxRegViolation> {
    let mut out = Vec::new();
    let reads: Vec<usize> = (0..ops.len()).filter(|&i| ops[i].kind != MaxRegKind::Write).collect();
    let writes: Vec<usize> = (0..ops.len()).filter(|&i| ops[i].kind == MaxRegKind::Write).collect();

    for &r in &reads {
        let o = &ops[r];
        if o.rank != 0 && !writes.iter().any(|&w| ops[w].rank == o.rank && ops[w].invoke <= o.response) {
            out.push(MaxRegViolation::Validity { read: r });
        }
    }

    // prefix maxima over operations sorted by response time
    let prefix = |set: &[usize]| -> (Vec<Tick>, Vec<(u64, usize)>) {
        let mut s: Vec<usize> = set.to_vec();
        s.sort_by_key(|&i| ops[i].response);
        let mut best: Vec<(u64, usize)> = Vec::with_capacity(s.len());
        for &i in &s {
            let cur = (ops[i].rank, i);
            best.push(match best.last() {
                Some(&b) if b.0 >= cur.0 => b,
                _ => cur,
            });
        }
        (s.iter().map(|&i| ops[i].response).collect(), best)
    };
    let full: Vec<usize> = reads.iter().copied().filter(|&i| ops[i].kind == MaxRegKind::Read).collect();
    let (full_resp, full_best) = prefix(&full);
    let (w_resp, w_best) = prefix(&writes);
    for &r in &reads {
        let o = &ops[r];
        let n = w_resp.partition_point(|&t| t < o.invoke);
        if n > 0 && w_best[n - 1].0 > o.rank {
            out.push(MaxRegViolation::WriteRead { write: w_best[n - 1].1, read: r });
        }
        if o.kind == MaxRegKind::Read {
            let n = full_resp.partition_point(|&t| t < o.invoke);
            if n > 0 && full_best[n - 1].0 > o.rank {
                out.push(MaxRegViolation::ReadRead { first: full_best[n - 1].1, second: r });
            }
        }
    }
    out
}
