//! Per-node max register for values larger than a word.
//!
//! A write stores the value in a fresh out-of-place buffer and, in the same
//! pipelined request, raises the writer's metadata slot to a word holding the
//! value's rank and the buffer index. Readers take the slot with the largest
//! rank. One replica per key also keeps an in-place copy tagged with a hash of
//! the metadata word; when the hash matches, a read completes without
//! following the buffer index.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use crate::fabric::{BoxFut, ClientId, Fabric, Launch, NodeId, Request, Response, Tick, gather, join2, with_timeout};
use crate::maxreg::{MaxValue, NodeRegister};
use crate::value::{Flag, MAX_OOP_INDEX, MValue, Payload, SENTINEL_RANK, meta_oop, meta_rank, pack_meta, rank_flag};

impl MaxValue for MValue {
    fn bottom() -> Self {
        MValue::bottom()
    }
    fn rank(&self) -> u64 {
        self.rank
    }
}

/// Hash binding an in-place value to the metadata word it belongs to.
pub trait Digest {
    fn digest(&self, meta: u64, value: &[u8]) -> u64;
}

pub struct Xxh3Digest;

impl Digest for Xxh3Digest {
    fn digest(&self, meta: u64, value: &[u8]) -> u64 {
        let mut h = xxhash_rust::xxh3::Xxh3::new();
        h.update(&meta.to_le_bytes());
        h.update(value);
        h.digest()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InnOutError {
    ArenaExhausted { node: NodeId },
    ValueTooLarge { len: usize, capacity: usize },
}

impl fmt::Display for InnOutError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InnOutError::ArenaExhausted { node } => {
                write!(f, "out-of-place buffers exhausted on node {}", node.0)
            }
            InnOutError::ValueTooLarge { len, capacity } => {
                write!(f, "value of {len} bytes exceeds capacity {capacity}")
            }
        }
    }
}

impl core::error::Error for InnOutError {}

/// Word layout of one replica of one key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReplicaLayout {
    pub slots: usize,
    pub lock_cells: usize,
    pub value_capacity: usize,
}

impl ReplicaLayout {
    pub fn meta_offset(&self, base: u64, slot: usize) -> u64 {
        base + 8 * slot as u64
    }

    pub fn lock_offset(&self, base: u64, writer: usize) -> u64 {
        base + 8 * (self.slots + writer) as u64
    }

    pub fn inplace_offset(&self, base: u64) -> u64 {
        base + 8 * (self.slots + self.lock_cells) as u64
    }

    /// Hash word, length word, value.
    pub fn inplace_len(&self) -> usize {
        16 + self.value_capacity.next_multiple_of(8)
    }

    pub fn region_len(&self) -> u64 {
        8 * (self.slots + self.lock_cells) as u64 + self.inplace_len() as u64
    }
}

/// Node-wide array of out-of-place buffers, split evenly between clients.
/// Index 0 is never handed out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OopPool {
    pub base: u64,
    pub value_capacity: usize,
    pub per_client: u32,
}

impl OopPool {
    pub fn buffer_len(&self) -> u64 {
        8 + self.value_capacity.next_multiple_of(8) as u64
    }

    pub fn addr(&self, index: u32) -> u64 {
        self.base + index as u64 * self.buffer_len()
    }

    pub fn end(&self, clients: usize) -> u64 {
        self.addr(1 + clients as u32 * self.per_client)
    }
}

/// One client's bump allocators into the buffer pools of every node.
pub struct OopArena {
    pool: OopPool,
    first: u32,
    next: BTreeMap<NodeId, u32>,
}

impl OopArena {
    pub fn new(pool: OopPool, client: ClientId) -> Self {
        let first = 1 + client.0 as u32 * pool.per_client;
        assert!(first + pool.per_client - 1 <= MAX_OOP_INDEX, "buffer pool does not fit 24-bit indices");
        OopArena { pool, first, next: BTreeMap::new() }
    }

    pub fn alloc(&mut self, node: NodeId) -> Result<u32, InnOutError> {
        let n = self.next.entry(node).or_insert(0);
        if *n >= self.pool.per_client {
            return Err(InnOutError::ArenaExhausted { node });
        }
        *n += 1;
        Ok(self.first + *n - 1)
    }

    pub fn used(&self, node: NodeId) -> u32 {
        self.next.get(&node).copied().unwrap_or(0)
    }
}

pub fn encode_buffer(value: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + value.len());
    out.extend_from_slice(&(value.len() as u64).to_le_bytes());
    out.extend_from_slice(value);
    out
}

pub fn decode_buffer(raw: &[u8]) -> Option<&[u8]> {
    let len = u64::from_le_bytes(raw.get(..8)?.try_into().ok()?) as usize;
    raw.get(8..8 + len)
}

pub fn encode_inplace(digest: &dyn Digest, meta: u64, value: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + value.len());
    out.extend_from_slice(&digest.digest(meta, value).to_le_bytes());
    out.extend_from_slice(&encode_buffer(value));
    out
}

fn words(raw: &[u8]) -> impl Iterator<Item = u64> + '_ {
    raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InnOutStats {
    pub inplace_hits: u64,
    pub inplace_misses: u64,
    pub fetches: u64,
    pub cas_retries: u64,
    pub buffers_written: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InnOutOptions {
    /// Keep an in-place copy at the designated replica.
    pub inplace: bool,
    /// Treat every in-place copy as corrupt; exercises the fallback path.
    pub poison_inplace: bool,
    /// Give up on a buffer fetch after this long.
    pub fetch_timeout: Tick,
}

impl Default for InnOutOptions {
    fn default() -> Self {
        InnOutOptions { inplace: true, poison_inplace: false, fetch_timeout: 200 }
    }
}

/// Where one client's copy of a key lives.
#[derive(Clone, Debug)]
pub struct Placement {
    pub reg_id: u64,
    /// `(node, region base)` in preference order; the first holds the
    /// in-place copy.
    pub replicas: Vec<(NodeId, u64)>,
    pub layout: ReplicaLayout,
}

impl Placement {
    pub fn designated(&self) -> NodeId {
        self.replicas[0].0
    }

    pub fn base(&self, node: NodeId) -> u64 {
        self.replicas.iter().find(|(n, _)| *n == node).expect("node hosts a replica").1
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.replicas.iter().map(|(n, _)| *n).collect()
    }
}

/// One client's access to the In-n-Out replicas of a key.
pub struct InnOutRegister {
    fabric: Fabric,
    client: ClientId,
    place: Placement,
    slot: usize,
    sole_owner: bool,
    /// Last known content of this client's slot per node.
    slot_cache: RefCell<BTreeMap<NodeId, u64>>,
    /// Largest word this client's slot is confirmed to hold per node.
    acked: RefCell<BTreeMap<NodeId, u64>>,
    /// Buffer last written per node, by timestamp rank without the flag.
    last_buf: RefCell<BTreeMap<NodeId, (u64, u32)>>,
    arena: Rc<RefCell<OopArena>>,
    pool: OopPool,
    digest: Rc<dyn Digest>,
    opts: InnOutOptions,
    stats: Rc<RefCell<InnOutStats>>,
    errors: Rc<RefCell<Vec<InnOutError>>>,
}

impl InnOutRegister {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fabric: Fabric,
        client: ClientId,
        place: Placement,
        slot: usize,
        sole_owner: bool,
        arena: Rc<RefCell<OopArena>>,
        pool: OopPool,
        digest: Rc<dyn Digest>,
        opts: InnOutOptions,
        stats: Rc<RefCell<InnOutStats>>,
    ) -> Self {
        InnOutRegister {
            fabric,
            client,
            place,
            slot,
            sole_owner,
            slot_cache: RefCell::new(BTreeMap::new()),
            acked: RefCell::new(BTreeMap::new()),
            last_buf: RefCell::new(BTreeMap::new()),
            arena,
            pool,
            digest,
            opts,
            stats,
            errors: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn placement(&self) -> &Placement {
        &self.place
    }

    /// Declares this client's slot empty on every replica (fresh key).
    pub fn assume_fresh(&self) {
        let mut c = self.slot_cache.borrow_mut();
        let mut a = self.acked.borrow_mut();
        for (n, _) in &self.place.replicas {
            c.insert(*n, 0);
            a.insert(*n, 0);
        }
    }

    pub fn slot_known(&self, node: NodeId) -> bool {
        self.slot_cache.borrow().contains_key(&node)
    }

    /// Errors hit by background writes.
    pub fn take_errors(&self) -> Vec<InnOutError> {
        core::mem::take(&mut self.errors.borrow_mut())
    }

    fn meta_request(&self, node: NodeId) -> Request {
        let base = self.place.base(node);
        Request::Read { offset: self.place.layout.meta_offset(base, 0), len: 8 * self.place.layout.slots as u32 }
    }

    fn inplace_request(&self, node: NodeId) -> Option<Request> {
        (self.opts.inplace && node == self.place.designated()).then(|| Request::Read {
            offset: self.place.layout.inplace_offset(self.place.base(node)),
            len: self.place.layout.inplace_len() as u32,
        })
    }

    fn note_slots(&self, node: NodeId, slots: &[u64]) {
        let mine = slots[self.slot];
        let mut a = self.acked.borrow_mut();
        let e = a.entry(node).or_insert(0);
        *e = (*e).max(mine);
        let mut c = self.slot_cache.borrow_mut();
        let e = c.entry(node).or_insert(0);
        *e = (*e).max(mine);
    }

    /// Interprets a metadata array and optional in-place block from `node`.
    fn interpret(&self, node: NodeId, slots: &[u64], block: Option<&[u8]>) -> MValue {
        let top = slots.iter().copied().max_by_key(|w| meta_rank(*w)).unwrap_or(0);
        let rank = meta_rank(top);
        if rank == 0 {
            return MValue::bottom();
        }
        if rank == SENTINEL_RANK {
            return MValue::tombstone();
        }
        if let Some(block) = block {
            let hash = u64::from_le_bytes(block[..8].try_into().unwrap());
            if let Some(value) = decode_buffer(&block[8..]) {
                let hit = !self.opts.poison_inplace
                    && slots.iter().filter(|w| meta_rank(**w) == rank).any(|w| self.digest.digest(*w, value) == hash);
                let mut st = self.stats.borrow_mut();
                if hit {
                    st.inplace_hits += 1;
                    return MValue { rank, payload: Payload::Inline(Rc::from(value)) };
                }
                st.inplace_misses += 1;
            }
        }
        MValue { rank, payload: Payload::Remote(alloc::vec![(node, meta_oop(top))]) }
    }

    /// Standalone read of one replica: metadata plus in-place copy, falling
    /// back to the out-of-place buffer. Returns the value and roundtrips.
    pub async fn read_resolved(self: &Rc<Self>, node: NodeId) -> (MValue, u32) {
        let v = self.clone().read(node).await;
        if v.is_resolved() {
            return (v, 1);
        }
        match self.clone().resolve(v).await {
            Some((v, r)) => (v, 1 + r),
            None => (MValue::bottom(), 2),
        }
    }

    /// Writes the buffer (unless already there) and the metadata CAS; in
    /// fused mode the metadata array is read first in the same phase.
    async fn write_node(self: Rc<Self>, node: NodeId, v: MValue, fused: bool) -> (u32, Option<MValue>) {
        let layout = self.place.layout;
        let base = self.place.base(node);
        let slot_off = layout.meta_offset(base, self.slot);
        let acked = self.acked.borrow().get(&node).copied().unwrap_or(0);
        if meta_rank(acked) >= v.rank {
            let seen = match fused {
                true => Some(self.fetch_meta(node).await.0),
                false => None,
            };
            return (u32::from(fused), seen);
        }
        let mut rounds = 0;
        let mut seen = None;
        let mut expected = self.slot_cache.borrow().get(&node).copied().unwrap_or(0);
        if meta_rank(expected) >= v.rank {
            // an own CAS at least this large is in flight; the read queues behind it
            let (s, mine) = self.fetch_meta(node).await;
            rounds += 1;
            seen = fused.then_some(s);
            if meta_rank(mine) >= v.rank {
                return (rounds, seen);
            }
            expected = mine;
        }
        let read_req = (fused && seen.is_none()).then(|| self.meta_request(node));

        let (index, buffer) = match &v.payload {
            Payload::Tombstone => (0, None),
            Payload::Inline(bytes) => {
                let ts_key = v.rank & !1;
                let reuse = self.last_buf.borrow().get(&node).filter(|(k, _)| *k == ts_key).map(|(_, i)| *i);
                match reuse {
                    Some(i) => (i, None),
                    None => {
                        if bytes.len() > layout.value_capacity {
                            self.errors
                                .borrow_mut()
                                .push(InnOutError::ValueTooLarge { len: bytes.len(), capacity: layout.value_capacity });
                            return (rounds, seen);
                        }
                        let idx = match self.arena.borrow_mut().alloc(node) {
                            Ok(i) => i,
                            Err(e) => {
                                self.errors.borrow_mut().push(e);
                                return (rounds, seen);
                            }
                        };
                        self.last_buf.borrow_mut().insert(node, (ts_key, idx));
                        (idx, Some(encode_buffer(bytes)))
                    }
                }
            }
            other => panic!("writing an unresolved value: {other:?}"),
        };
        let new = pack_meta(v.rank, index);
        let cas = Request::Cas { offset: slot_off, expected, new };
        let update = match buffer {
            Some(data) => {
                self.stats.borrow_mut().buffers_written += 1;
                Request::Pipelined(Box::new(Request::Write { offset: self.pool.addr(index), data }), Box::new(cas))
            }
            None => cas,
        };
        if self.sole_owner {
            self.slot_cache.borrow_mut().insert(node, new);
        }
        let read_fut = read_req.map(|r| self.fabric.issue(self.client, node, r).expect("metadata in range"));
        let upd_fut = self.fabric.issue(self.client, node, update).expect("replica in range");
        if rank_flag(v.rank) == Flag::Verified
            && !v.is_tombstone()
            && self.opts.inplace
            && node == self.place.designated()
            && let Some(bytes) = v.bytes()
        {
            let block = encode_inplace(self.digest.as_ref(), new, bytes);
            // background: same channel, lands after the CAS
            drop(
                self.fabric
                    .issue(self.client, node, Request::Write { offset: layout.inplace_offset(base), data: block })
                    .expect("in-place block in range"),
            );
        }
        let resp = match read_fut {
            Some(rf) => {
                let (r, u) = join2(rf, upd_fut).await;
                let slots: Vec<u64> = words(&r.into_bytes()).collect();
                seen = Some(self.interpret(node, &slots, None));
                u
            }
            None => upd_fut.await,
        };
        rounds += 1;
        let mut prev = match resp {
            Response::Pipelined(_, c) => c.cas_prev(),
            other => other.cas_prev(),
        };
        loop {
            let landed = if prev == expected { new } else { prev };
            self.note_own(node, landed, prev != expected);
            if prev == expected || meta_rank(prev) >= v.rank {
                break;
            }
            expected = prev;
            rounds += 1;
            self.stats.borrow_mut().cas_retries += 1;
            if self.sole_owner {
                self.slot_cache.borrow_mut().insert(node, new);
            }
            prev = self
                .fabric
                .issue(self.client, node, Request::Cas { offset: slot_off, expected, new })
                .expect("replica in range")
                .await
                .cas_prev();
        }
        (rounds, seen)
    }

    /// Records a confirmed content of this client's slot. A failed CAS
    /// reports the exact content, which replaces the expectation.
    fn note_own(&self, node: NodeId, word: u64, exact: bool) {
        let mut a = self.acked.borrow_mut();
        let e = a.entry(node).or_insert(0);
        *e = (*e).max(word);
        let mut c = self.slot_cache.borrow_mut();
        if exact || !self.sole_owner {
            c.insert(node, word);
        }
    }

    /// Reads the metadata array; returns the largest value and this
    /// client's own slot word.
    async fn fetch_meta(&self, node: NodeId) -> (MValue, u64) {
        let r = self.fabric.issue(self.client, node, self.meta_request(node)).expect("metadata in range").await;
        let slots: Vec<u64> = words(&r.into_bytes()).collect();
        self.note_slots(node, &slots);
        (self.interpret(node, &slots, None), slots[self.slot])
    }
}

impl NodeRegister for InnOutRegister {
    type Value = MValue;

    fn read(self: Rc<Self>, node: NodeId) -> BoxFut<MValue> {
        Box::pin(async move {
            let meta = self.fabric.issue(self.client, node, self.meta_request(node)).expect("metadata in range");
            let (slots, block) = match self.inplace_request(node) {
                Some(req) => {
                    let inplace = self.fabric.issue(self.client, node, req).expect("in-place block in range");
                    let (m, b) = join2(meta, inplace).await;
                    (m.into_bytes(), Some(b.into_bytes()))
                }
                None => (meta.await.into_bytes(), None),
            };
            let slots: Vec<u64> = words(&slots).collect();
            self.note_slots(node, &slots);
            self.interpret(node, &slots, block.as_deref())
        })
    }

    fn write(self: Rc<Self>, node: NodeId, v: MValue) -> BoxFut<u32> {
        Box::pin(async move { self.write_node(node, v, false).await.0 })
    }

    fn write_read(self: Rc<Self>, node: NodeId, v: MValue) -> BoxFut<(u32, MValue)> {
        Box::pin(async move {
            let (rounds, seen) = self.write_node(node, v, true).await;
            (rounds.max(1), seen.unwrap_or_else(MValue::bottom))
        })
    }

    fn merge(into: &mut MValue, other: &MValue) {
        match (&mut into.payload, &other.payload) {
            (Payload::Remote(a), Payload::Remote(b)) => {
                for h in b {
                    if !a.contains(h) {
                        a.push(*h);
                    }
                }
            }
            (Payload::Remote(_), Payload::Inline(_)) => into.payload = other.payload.clone(),
            _ => {}
        }
    }

    fn is_resolved(v: &MValue) -> bool {
        v.is_resolved()
    }

    fn resolve(self: Rc<Self>, v: MValue) -> BoxFut<Option<(MValue, u32)>> {
        Box::pin(async move {
            let Payload::Remote(holders) = &v.payload else {
                return Some((v, 0));
            };
            self.stats.borrow_mut().fetches += 1;
            let launches = holders
                .iter()
                .enumerate()
                .map(|(i, &(node, index))| {
                    let fabric = self.fabric.clone();
                    let client = self.client;
                    let req = Request::Read { offset: self.pool.addr(index), len: self.pool.buffer_len() as u32 };
                    Launch::new(i, true, move || -> BoxFut<Vec<u8>> {
                        Box::pin(
                            async move { fabric.issue(client, node, req).expect("buffer in range").await.into_bytes() },
                        )
                    })
                })
                .collect();
            let fetched =
                with_timeout(&self.fabric, self.opts.fetch_timeout, gather(&self.fabric, launches, 1, Tick::MAX))
                    .await?;
            let raw = &fetched.done.first()?.1;
            let bytes = decode_buffer(raw)?;
            Some((MValue { rank: v.rank, payload: Payload::Inline(Rc::from(bytes)) }, 1))
        })
    }
}

/// Raises the word at `offset` to at least `new` with a CAS loop starting
/// from `expected`. Returns the word found by the last CAS and the number of
/// CAS roundtrips.
pub async fn emulated_max(
    fabric: &Fabric,
    client: ClientId,
    node: NodeId,
    offset: u64,
    new: u64,
    mut expected: u64,
) -> (u64, u32) {
    let mut rounds = 0;
    loop {
        if meta_rank(expected) >= meta_rank(new) && expected != 0 {
            return (expected, rounds);
        }
        rounds += 1;
        let prev =
            fabric.issue(client, node, Request::Cas { offset, expected, new }).expect("word in range").await.cas_prev();
        if prev == expected || meta_rank(prev) >= meta_rank(new) {
            return (prev, rounds);
        }
        expected = prev;
    }
}

#[cfg(test)]
mod tests;
