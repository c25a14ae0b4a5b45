//! Timestamps, flags and their packed encodings.
//!
//! A register value is ordered by its *rank*, a 40-bit integer holding the
//! timestamp counter (31 bits), the writer id (8 bits) and the verification
//! flag (1 bit) from most to least significant. A metadata word stores the
//! rank in its upper 40 bits and an out-of-place buffer index in the lower 24.

use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::fabric::NodeId;

pub const COUNTER_BITS: u32 = 31;
/// Counter value reserved for the deletion sentinel.
pub const SENTINEL_COUNTER: u32 = (1 << COUNTER_BITS) - 1;
/// Largest counter a writer may use.
pub const MAX_COUNTER: u32 = SENTINEL_COUNTER - 1;
pub const RANK_BITS: u32 = 40;
pub const SENTINEL_RANK: u64 = (1 << RANK_BITS) - 1;
pub const OOP_BITS: u32 = 24;
pub const MAX_OOP_INDEX: u32 = (1 << OOP_BITS) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Timestamp {
    pub counter: u32,
    pub writer: u8,
}

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp { counter: 0, writer: 0 };

    pub const fn new(counter: u32, writer: u8) -> Self {
        Timestamp { counter, writer }
    }

    /// Totally ordered integer form used by timestamp locks.
    pub const fn as_u64(self) -> u64 {
        ((self.counter as u64) << 8) | self.writer as u64
    }

    pub const fn from_u64(v: u64) -> Self {
        Timestamp { counter: (v >> 8) as u32, writer: v as u8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Flag {
    Guessed = 0,
    Verified = 1,
}

pub const fn rank(ts: Timestamp, flag: Flag) -> u64 {
    ((ts.counter as u64) << 9) | ((ts.writer as u64) << 1) | flag as u64
}

pub const fn rank_ts(rank: u64) -> Timestamp {
    Timestamp { counter: (rank >> 9) as u32, writer: (rank >> 1) as u8 }
}

pub const fn rank_flag(rank: u64) -> Flag {
    if rank & 1 == 1 { Flag::Verified } else { Flag::Guessed }
}

pub const fn pack_meta(rank: u64, oop: u32) -> u64 {
    (rank << OOP_BITS) | (oop as u64 & MAX_OOP_INDEX as u64)
}

pub const fn meta_rank(word: u64) -> u64 {
    word >> OOP_BITS
}

pub const fn meta_oop(word: u64) -> u32 {
    (word & MAX_OOP_INDEX as u64) as u32
}

/// Where the bytes of a register value are.
#[derive(Clone, Debug)]
pub enum Payload {
    /// Initial value.
    Bottom,
    Inline(Rc<[u8]>),
    /// Out-of-place buffers known to hold the value, as (node, buffer index).
    Remote(Vec<(NodeId, u32)>),
    /// Deletion sentinel.
    Tombstone,
}

/// Register value ordered by rank only.
#[derive(Clone, Debug)]
pub struct MValue {
    pub rank: u64,
    pub payload: Payload,
}

impl MValue {
    pub fn bottom() -> Self {
        MValue { rank: 0, payload: Payload::Bottom }
    }

    pub fn tombstone() -> Self {
        MValue { rank: SENTINEL_RANK, payload: Payload::Tombstone }
    }

    pub fn new(ts: Timestamp, flag: Flag, bytes: Rc<[u8]>) -> Self {
        MValue { rank: rank(ts, flag), payload: Payload::Inline(bytes) }
    }

    pub fn ts(&self) -> Timestamp {
        rank_ts(self.rank)
    }

    pub fn flag(&self) -> Flag {
        rank_flag(self.rank)
    }

    /// The initial value counts as verified.
    pub fn is_verified(&self) -> bool {
        self.rank == 0 || self.flag() == Flag::Verified
    }

    pub fn is_bottom(&self) -> bool {
        self.rank == 0
    }

    pub fn is_tombstone(&self) -> bool {
        self.rank == SENTINEL_RANK
    }

    pub fn with_flag(&self, flag: Flag) -> Self {
        MValue { rank: (self.rank & !1) | flag as u64, payload: self.payload.clone() }
    }

    pub fn bytes(&self) -> Option<&Rc<[u8]>> {
        match &self.payload {
            Payload::Inline(b) => Some(b),
            _ => None,
        }
    }

    pub fn is_resolved(&self) -> bool {
        !matches!(self.payload, Payload::Remote(_))
    }
}

impl PartialEq for MValue {
    fn eq(&self, other: &Self) -> bool {
        self.rank == other.rank
    }
}
impl Eq for MValue {}
impl PartialOrd for MValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for MValue {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank.cmp(&other.rank)
    }
}

/// Identifier carried in the first eight bytes of workload values.
pub fn value_id(bytes: &[u8]) -> Option<u64> {
    let head: [u8; 8] = bytes.get(..8)?.try_into().ok()?;
    Some(u64::from_le_bytes(head))
}
