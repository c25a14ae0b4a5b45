//! Structured event log shared by every layer of the simulator.
//!
//! Records are appended in simulation order and are the input of
//! [`crate::checker::audit_trace`].

use crate::fabric::Tick;
use crate::safeguess::{ReadPath, WritePath};
use crate::tslock::LockMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TraceLevel {
    Off,
    /// CAS outcomes, crashes and protocol-level records.
    #[default]
    Protocol,
    /// Everything in `Protocol` plus every raw read and write.
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceRecord {
    pub at: Tick,
    pub event: TraceEvent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MaxRegKind {
    Read,
    WeakRead,
    Write,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaxRegRecord {
    pub client: u8,
    pub reg: u64,
    /// Enclosing higher-level operation, 0 when called directly.
    pub op: u64,
    pub kind: MaxRegKind,
    pub invoke: Tick,
    pub response: Tick,
    /// Rank of the value read or written.
    pub rank: u64,
    /// Sequential waves of per-node register operations.
    pub phases: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrylockRecord {
    pub client: u8,
    pub reg: u64,
    /// Writer owning the lock.
    pub owner: u8,
    pub ts: u64,
    pub mode: LockMode,
    pub granted: bool,
    pub invoke: Tick,
    pub response: Tick,
    /// Largest number of CAS attempts issued on a single cell.
    pub max_cell_cas: u32,
    pub phases: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReadLoopRecord {
    pub client: u8,
    pub reg: u64,
    pub op: u64,
    pub iterations: u32,
    pub writers: u32,
    pub path: ReadPath,
    /// Timestamp of the returned value.
    pub ts: u64,
    pub phases: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GuessWriteRecord {
    pub client: u8,
    pub reg: u64,
    pub op: u64,
    pub guessed: u64,
    /// Rank the write is ordered by (the rewritten rank after a granted lock).
    pub rank: u64,
    pub path: WritePath,
    pub phases: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BoundKind {
    ReadIterations { iterations: u32, bound: u32 },
    ThirdVisit { writer: u8 },
    CasPerCell { cas: u32, ts: u64 },
    MaxRegPhases { kind: MaxRegKind, phases: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TraceEvent {
    Cas { client: u8, node: u8, offset: u64, expected: u64, new: u64, prev: u64 },
    Read { client: u8, node: u8, offset: u64, len: u32 },
    Write { client: u8, node: u8, offset: u64, len: u32 },
    Dropped { client: u8, node: u8 },
    Crash { node: u8 },
    Slowdown { node: u8, extra: Tick },
    Widen { client: u8 },
    MaxReg(MaxRegRecord),
    Trylock(TrylockRecord),
    ReadLoop(ReadLoopRecord),
    GuessWrite(GuessWriteRecord),
    Bound { client: u8, reg: u64, kind: BoundKind },
}

impl TraceEvent {
    pub(crate) fn level(&self) -> TraceLevel {
        match self {
            TraceEvent::Read { .. } | TraceEvent::Write { .. } => TraceLevel::Full,
            _ => TraceLevel::Protocol,
        }
    }
}
