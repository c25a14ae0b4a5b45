//! Linearizability checking for single-register histories and trace audits.
//!
//! Two independent checkers are provided. [`check_bruteforce`] searches all
//! linearizations with memoization and works on any history within its size
//! bound. [`check_construction`] builds the one candidate order implied by
//! write timestamps and validates it, which scales to long histories.

mod audit;
mod brute;
mod construct;
mod maxprops;

use alloc::vec::Vec;
use core::fmt;

use crate::fabric::Tick;

pub use audit::{AuditReport, AuditViolation, audit_trace};
pub use brute::{BruteVerdict, ViolationWitness, check_bruteforce, minimal_core};
pub use construct::{ConstructionError, check_construction};
pub use maxprops::{MaxOp, MaxRegViolation, check_max_register, max_ops_from_trace};

/// Default largest history accepted by the brute-force checker.
pub const DEFAULT_BOUND: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OpKind {
    Read,
    Write,
}

/// One register operation. `value` is the argument of a write or the result
/// of a read, `None` standing for the initial or absent value.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Op {
    pub client: u32,
    pub kind: OpKind,
    pub value: Option<u64>,
    pub invoke: Tick,
    /// `None` while pending (for example when the client crashed).
    pub response: Option<Tick>,
    /// Ordering timestamp of a write, when the implementation reports one.
    pub ts: Option<u64>,
}

impl Op {
    pub fn read(client: u32, value: Option<u64>, invoke: Tick, response: Tick) -> Op {
        Op { client, kind: OpKind::Read, value, invoke, response: Some(response), ts: None }
    }

    pub fn write(client: u32, value: u64, invoke: Tick, response: Tick, ts: Option<u64>) -> Op {
        Op { client, kind: OpKind::Write, value: Some(value), invoke, response: Some(response), ts }
    }

    pub fn is_complete(&self) -> bool {
        self.response.is_some()
    }

    /// Strict real-time precedence.
    pub fn precedes(&self, other: &Op) -> bool {
        matches!(self.response, Some(r) if r < other.invoke)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct History {
    pub ops: Vec<Op>,
}

impl History {
    pub fn new(ops: Vec<Op>) -> Self {
        History { ops }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Replays `order` sequentially and checks each read and real-time
    /// precedence. Used to validate witnesses.
    pub fn is_valid_linearization(&self, order: &[usize]) -> bool {
        let mut cur: Option<u64> = None;
        let mut pos = alloc::vec![usize::MAX; self.ops.len()];
        for (p, &i) in order.iter().enumerate() {
            let Some(op) = self.ops.get(i) else { return false };
            if pos[i] != usize::MAX {
                return false;
            }
            pos[i] = p;
            match op.kind {
                OpKind::Write => cur = op.value,
                OpKind::Read if op.value != cur => return false,
                OpKind::Read => {}
            }
        }
        for (i, op) in self.ops.iter().enumerate() {
            if op.is_complete() && pos[i] == usize::MAX {
                return false;
            }
        }
        for (a, oa) in self.ops.iter().enumerate() {
            for (b, ob) in self.ops.iter().enumerate() {
                if pos[a] != usize::MAX && pos[b] != usize::MAX && oa.precedes(ob) && pos[a] > pos[b] {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CheckError {
    /// History longer than the brute-force bound; shard it by key or window.
    TooLarge { ops: usize, bound: usize },
}

impl fmt::Display for CheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckError::TooLarge { ops, bound } => {
                write!(f, "history of {ops} operations exceeds the brute-force bound of {bound}")
            }
        }
    }
}

impl core::error::Error for CheckError {}
