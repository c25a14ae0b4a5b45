//! Replicated key-value store over guessed-timestamp registers.
//!
//! Each key owns one register whose replicas live on `r` memory nodes. A
//! reliable index maps keys to their replica set; clients cache locations
//! and go to the index only on a miss or after finding a key deleted.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};
use core::fmt;

use crate::abd::Abd;
use crate::fabric::{ClientId, Fabric, NodeId, Tick, join2};
use crate::innout::{
    Digest, InnOutError, InnOutOptions, InnOutRegister, InnOutStats, OopArena, OopPool, Placement, ReplicaLayout,
    Xxh3Digest,
};
use crate::maxreg::MaxRegister;
use crate::safeguess::{
    GuessClock, GuessError, LockCells, ReadPath, Resync, SafeGuess, SafeGuessOptions, SafeGuessStats, WritePath,
};
use crate::value::MValue;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KvConfig {
    /// Replicas per key; at most the number of memory nodes.
    pub replication: usize,
    /// Largest number of clients; one lock cell per client per replica.
    pub writers: u32,
    /// Metadata slots per key, shared round-robin by clients.
    pub slots: usize,
    pub value_capacity: usize,
    pub inplace: bool,
    pub poison_inplace: bool,
    pub register: SafeGuessOptions,
    pub cache_capacity: usize,
    /// Replica regions each client may allocate on each node.
    pub regions_per_client: u32,
    /// Out-of-place buffers each client may allocate on each node.
    pub buffers_per_client: u32,
    pub resync: Resync,
    pub fetch_timeout: Tick,
}

impl Default for KvConfig {
    fn default() -> Self {
        KvConfig {
            replication: 3,
            writers: 16,
            slots: 16,
            value_capacity: 64,
            inplace: true,
            poison_inplace: false,
            register: SafeGuessOptions::default(),
            cache_capacity: 1 << 16,
            regions_per_client: 1 << 14,
            buffers_per_client: 1 << 16,
            resync: Resync::OnStale,
            fetch_timeout: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KvError {
    Config(String),
    Clock(GuessError),
    Memory(InnOutError),
    RegionsExhausted { client: u8 },
    ValueTooLarge { len: usize, capacity: usize },
}

impl fmt::Display for KvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KvError::Config(s) => write!(f, "invalid store configuration: {s}"),
            KvError::Clock(e) => write!(f, "{e}"),
            KvError::Memory(e) => write!(f, "{e}"),
            KvError::RegionsExhausted { client } => write!(f, "client {client} ran out of replica regions"),
            KvError::ValueTooLarge { len, capacity } => write!(f, "value of {len} bytes exceeds capacity {capacity}"),
        }
    }
}

impl core::error::Error for KvError {}

impl From<GuessError> for KvError {
    fn from(e: GuessError) -> Self {
        KvError::Clock(e)
    }
}

/// Where a key's replicas live.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReplicaSet {
    /// Register incarnation; a key gets a new one each time it is inserted.
    pub id: u64,
    /// `(node, region base)` in preference order; the first holds the
    /// in-place copy.
    pub replicas: Vec<(NodeId, u64)>,
    pub deleted: bool,
}

#[derive(Default)]
struct IndexState {
    map: BTreeMap<Vec<u8>, ReplicaSet>,
}

/// Bounded location cache evicting the least frequently used entry.
/// Counts are halved periodically so old popularity fades.
pub struct LocationCache {
    capacity: usize,
    entries: BTreeMap<Vec<u8>, (ReplicaSet, u32)>,
    accesses: u64,
}

impl LocationCache {
    pub fn new(capacity: usize) -> Self {
        LocationCache { capacity: capacity.max(1), entries: BTreeMap::new(), accesses: 0 }
    }

    pub fn get(&mut self, key: &[u8]) -> Option<ReplicaSet> {
        self.tick();
        let e = self.entries.get_mut(key)?;
        e.1 = e.1.saturating_add(1);
        Some(e.0.clone())
    }

    /// Inserts `rs`; returns the evicted entry's register id, if any.
    pub fn put(&mut self, key: &[u8], rs: ReplicaSet) -> Option<u64> {
        let mut evicted = None;
        if !self.entries.contains_key(key) && self.entries.len() >= self.capacity {
            let victim =
                self.entries.iter().min_by_key(|(_, (_, f))| *f).map(|(k, _)| k.clone()).expect("cache is full");
            evicted = self.entries.remove(&victim).map(|(rs, _)| rs.id);
        }
        if let Some(old) = self.entries.insert(key.to_vec(), (rs, 1)) {
            self.entries.get_mut(key).unwrap().1 = old.1;
        }
        evicted
    }

    pub fn remove(&mut self, key: &[u8]) -> Option<ReplicaSet> {
        self.entries.remove(key).map(|(rs, _)| rs)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn tick(&mut self) {
        self.accesses += 1;
        if self.accesses.is_multiple_of(8 * self.capacity as u64) {
            for (_, f) in self.entries.values_mut() {
                *f /= 2;
            }
        }
    }
}

struct StoreShared {
    fabric: Fabric,
    cfg: KvConfig,
    layout: ReplicaLayout,
    pool: OopPool,
    index: RefCell<IndexState>,
    digest: Rc<dyn Digest>,
    issued: RefCell<BTreeSet<u8>>,
}

/// The shared part of a store: configuration, memory map and index.
#[derive(Clone)]
pub struct KvStore {
    shared: Rc<StoreShared>,
}

impl KvStore {
    pub fn new(fabric: Fabric, cfg: KvConfig) -> Result<KvStore, KvError> {
        let nodes = fabric.node_count();
        if cfg.replication == 0 || cfg.replication > nodes || cfg.replication.is_multiple_of(2) {
            return Err(KvError::Config(alloc::format!(
                "replication {} must be odd and at most the {nodes} nodes",
                cfg.replication
            )));
        }
        if cfg.slots == 0 || cfg.writers == 0 || cfg.writers > crate::fabric::MAX_CLIENT as u32 {
            return Err(KvError::Config("slots and writers must be positive, writers at most 254".into()));
        }
        let layout =
            ReplicaLayout { slots: cfg.slots, lock_cells: cfg.writers as usize, value_capacity: cfg.value_capacity };
        let area = layout.region_len() * cfg.regions_per_client as u64 * cfg.writers as u64;
        let pool = OopPool {
            base: area.next_multiple_of(4096),
            value_capacity: cfg.value_capacity,
            per_client: cfg.buffers_per_client,
        };
        let last_index = cfg.writers as u64 * cfg.buffers_per_client as u64;
        if last_index > crate::value::MAX_OOP_INDEX as u64 {
            return Err(KvError::Config(alloc::format!(
                "{last_index} buffers per node exceed the 24-bit buffer index"
            )));
        }
        let end = pool.end(cfg.writers as usize);
        let cap = fabric.config().memory_bytes;
        if end > cap {
            return Err(KvError::Config(alloc::format!("memory map needs {end} bytes per node, nodes have {cap}")));
        }
        Ok(KvStore {
            shared: Rc::new(StoreShared {
                fabric,
                cfg,
                layout,
                pool,
                index: RefCell::new(IndexState::default()),
                digest: Rc::new(Xxh3Digest),
                issued: RefCell::default(),
            }),
        })
    }

    pub fn layout(&self) -> ReplicaLayout {
        self.shared.layout
    }

    pub fn config(&self) -> &KvConfig {
        &self.shared.cfg
    }

    /// Current index entry for `key`, read without simulated delay.
    pub fn index_snapshot(&self, key: &[u8]) -> Option<ReplicaSet> {
        self.shared.index.borrow().map.get(key).cloned()
    }

    /// Creates the handle for client `id`. Each id gets one handle: buffer
    /// allocation, clock and slot caches are per client.
    pub fn client(&self, id: ClientId, skew: i64) -> KvClient {
        assert!((id.0 as u32) < self.shared.cfg.writers, "client id beyond configured writers");
        assert!(self.shared.issued.borrow_mut().insert(id.0), "client {} already has a handle", id.0);
        let cfg = &self.shared.cfg;
        KvClient {
            store: self.shared.clone(),
            id,
            clock: Rc::new(RefCell::new(GuessClock::new(id.0, skew, cfg.resync))),
            arena: Rc::new(RefCell::new(OopArena::new(self.shared.pool, id))),
            next_region: Cell::new(0),
            cache: RefCell::new(LocationCache::new(cfg.cache_capacity)),
            handles: RefCell::new(BTreeMap::new()),
            register_stats: Rc::default(),
            innout_stats: Rc::default(),
        }
    }
}

/// Replica nodes of `key`, in preference order.
pub fn placement_nodes(key: &[u8], nodes: usize, replication: usize) -> Vec<NodeId> {
    let start = (xxhash_rust::xxh3::xxh3_64(key) % nodes as u64) as usize;
    (0..replication).map(|i| NodeId(((start + i) % nodes) as u8)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KvResult {
    Ok,
    /// An insert found the key live and updated it instead.
    Updated,
    Value(Rc<[u8]>),
    NotFound,
    NoSuchKey,
}

#[derive(Clone, Debug)]
pub struct KvOutcome {
    pub result: KvResult,
    /// Roundtrips on the critical path.
    pub roundtrips: u32,
    pub index_roundtrips: u32,
    pub meta_roundtrips: u32,
    /// Register incarnation the operation took effect on.
    pub reg: Option<u64>,
    /// Timestamp of the write, in lock-cell integer form.
    pub ts: Option<u64>,
    pub read_path: Option<ReadPath>,
    pub write_path: Option<WritePath>,
    pub iterations: u32,
    pub widened: bool,
}

impl KvOutcome {
    fn new(result: KvResult) -> Self {
        KvOutcome {
            result,
            roundtrips: 0,
            index_roundtrips: 0,
            meta_roundtrips: 0,
            reg: None,
            ts: None,
            read_path: None,
            write_path: None,
            iterations: 0,
            widened: false,
        }
    }
}

type Handle = Rc<SafeGuess<InnOutRegister>>;

/// One client of the store. Operations must not overlap.
pub struct KvClient {
    store: Rc<StoreShared>,
    id: ClientId,
    clock: Rc<RefCell<GuessClock>>,
    arena: Rc<RefCell<OopArena>>,
    next_region: Cell<u32>,
    cache: RefCell<LocationCache>,
    handles: RefCell<BTreeMap<u64, Handle>>,
    pub register_stats: Rc<RefCell<SafeGuessStats>>,
    pub innout_stats: Rc<RefCell<InnOutStats>>,
}

impl KvClient {
    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn stale_guesses(&self) -> u64 {
        self.clock.borrow().stale
    }

    fn fabric(&self) -> &Fabric {
        &self.store.fabric
    }

    fn check_len(&self, value: &[u8]) -> Result<(), KvError> {
        let capacity = self.store.cfg.value_capacity;
        match value.len() > capacity {
            true => Err(KvError::ValueTooLarge { len: value.len(), capacity }),
            false => Ok(()),
        }
    }

    fn alloc_replicas(&self, key: &[u8]) -> Result<ReplicaSet, KvError> {
        let cfg = &self.store.cfg;
        let j = self.next_region.get();
        if j >= cfg.regions_per_client {
            return Err(KvError::RegionsExhausted { client: self.id.0 });
        }
        self.next_region.set(j + 1);
        let len = self.store.layout.region_len();
        let base = (self.id.0 as u64 * cfg.regions_per_client as u64 + j as u64) * len;
        let nodes = placement_nodes(key, self.fabric().node_count(), cfg.replication);
        Ok(ReplicaSet {
            id: (self.id.0 as u64) << 32 | (j as u64 + 1),
            replicas: nodes.into_iter().map(|n| (n, base)).collect(),
            deleted: false,
        })
    }

    /// Register handle for `rs`; the flag says it was just created.
    fn handle(&self, rs: &ReplicaSet, fresh: bool) -> (Handle, bool) {
        if let Some(h) = self.handles.borrow().get(&rs.id) {
            return (h.clone(), false);
        }
        let st = &self.store;
        let cfg = &st.cfg;
        let place = Placement { reg_id: rs.id, replicas: rs.replicas.clone(), layout: st.layout };
        let io = InnOutRegister::new(
            st.fabric.clone(),
            self.id,
            place.clone(),
            self.id.0 as usize % cfg.slots,
            cfg.writers as usize <= cfg.slots,
            self.arena.clone(),
            st.pool,
            st.digest.clone(),
            InnOutOptions {
                inplace: cfg.inplace,
                poison_inplace: cfg.poison_inplace,
                fetch_timeout: cfg.fetch_timeout,
            },
            self.innout_stats.clone(),
        );
        if fresh {
            io.assume_fresh();
        }
        let m = Rc::new(MaxRegister::new(
            st.fabric.clone(),
            Rc::new(io),
            self.id,
            rs.id,
            place.nodes(),
            cfg.register.quorum,
        ));
        let layout = st.layout;
        let cells: LockCells = Rc::new(move |owner| {
            place.replicas.iter().map(|&(n, base)| (n, layout.lock_offset(base, owner as usize))).collect()
        });
        let h = Rc::new(SafeGuess::new(
            st.fabric.clone(),
            self.id,
            rs.id,
            m,
            cells,
            cfg.writers,
            self.clock.clone(),
            cfg.register,
            self.register_stats.clone(),
        ));
        self.handles.borrow_mut().insert(rs.id, h.clone());
        (h, true)
    }

    fn cache_put(&self, key: &[u8], rs: ReplicaSet) {
        if let Some(old) = self.cache.borrow_mut().put(key, rs) {
            self.handles.borrow_mut().remove(&old);
        }
    }

    fn cache_flush(&self, key: &[u8]) {
        if let Some(rs) = self.cache.borrow_mut().remove(key) {
            self.handles.borrow_mut().remove(&rs.id);
        }
    }

    async fn index_get(&self, key: &[u8]) -> Option<ReplicaSet> {
        let st = self.store.clone();
        let key = key.to_vec();
        self.fabric().call_service(move || st.index.borrow().map.get(&key).cloned()).await
    }

    /// Maps `key` to `rs` unless it maps to a live replica set already.
    async fn index_insert(&self, key: &[u8], rs: ReplicaSet) -> Result<ReplicaSet, ReplicaSet> {
        let st = self.store.clone();
        let key = key.to_vec();
        self.fabric()
            .call_service(move || {
                let mut idx = st.index.borrow_mut();
                match idx.map.get(&key) {
                    Some(cur) if !cur.deleted => Err(cur.clone()),
                    _ => {
                        idx.map.insert(key, rs.clone());
                        Ok(rs)
                    }
                }
            })
            .await
    }

    async fn index_remove_if(&self, key: &[u8], id: u64) {
        let st = self.store.clone();
        let key = key.to_vec();
        self.fabric()
            .call_service(move || {
                let mut idx = st.index.borrow_mut();
                if idx.map.get(&key).is_some_and(|rs| rs.id == id) {
                    idx.map.remove(&key);
                }
            })
            .await
    }

    /// Finds the replicas of `key`; the flag says they came from the cache.
    async fn locate(&self, key: &[u8], out: &mut KvOutcome) -> Option<(ReplicaSet, bool)> {
        if let Some(rs) = self.cache.borrow_mut().get(key) {
            return Some((rs, true));
        }
        out.index_roundtrips += 1;
        out.roundtrips += 1;
        let rs = self.index_get(key).await?;
        if rs.deleted {
            return None;
        }
        self.cache_put(key, rs.clone());
        Some((rs, false))
    }

    pub async fn insert(&self, key: &[u8], value: &[u8]) -> Result<KvOutcome, KvError> {
        self.check_len(value)?;
        let mut out = KvOutcome::new(KvResult::Ok);
        // a racing delete can unmap the live key under us; retry then
        for _ in 0..4 {
            let fresh = self.alloc_replicas(key)?;
            let (h, _) = self.handle(&fresh, true);
            let bytes: Rc<[u8]> = Rc::from(value);
            let (w, idx) = join2(h.write(bytes.clone()), self.index_insert(key, fresh.clone())).await;
            let w = w?;
            memory_errors(&h)?;
            out.roundtrips += w.roundtrips.max(1);
            out.index_roundtrips += 1;
            out.widened |= w.widened;
            match idx {
                Ok(rs) => {
                    self.cache_put(key, rs.clone());
                    out.reg = Some(rs.id);
                    out.ts = Some(w.ts.as_u64());
                    out.write_path = Some(w.path);
                    return Ok(out);
                }
                Err(existing) => {
                    // the new replicas are never referenced
                    self.handles.borrow_mut().remove(&fresh.id);
                    self.cache_put(key, existing.clone());
                    if self.update_from(key, existing, bytes, &mut out).await? == KvResult::Ok {
                        out.result = KvResult::Updated;
                        return Ok(out);
                    }
                }
            }
        }
        out.result = KvResult::NoSuchKey;
        Ok(out)
    }

    pub async fn update(&self, key: &[u8], value: &[u8]) -> Result<KvOutcome, KvError> {
        self.check_len(value)?;
        let mut out = KvOutcome::new(KvResult::NoSuchKey);
        let Some((rs, _)) = self.locate(key, &mut out).await else {
            return Ok(out);
        };
        out.result = self.update_from(key, rs, Rc::from(value), &mut out).await?;
        Ok(out)
    }

    /// Writes to `rs`, following the index if the key was deleted there.
    async fn update_from(
        &self,
        key: &[u8],
        mut rs: ReplicaSet,
        bytes: Rc<[u8]>,
        out: &mut KvOutcome,
    ) -> Result<KvResult, KvError> {
        loop {
            let r = self.write_on(key, rs.clone(), bytes.clone(), out).await?;
            if r != KvResult::NoSuchKey {
                return Ok(r);
            }
            // deleted: drop the stale mapping and look again
            out.index_roundtrips += 2;
            out.roundtrips += 2;
            self.index_remove_if(key, rs.id).await;
            match self.index_get(key).await {
                Some(next) if next.id != rs.id && !next.deleted => {
                    self.cache_put(key, next.clone());
                    rs = next;
                }
                _ => return Ok(KvResult::NoSuchKey),
            }
        }
    }

    /// One register write; `NoSuchKey` when the register holds the sentinel.
    async fn write_on(
        &self,
        key: &[u8],
        rs: ReplicaSet,
        bytes: Rc<[u8]>,
        out: &mut KvOutcome,
    ) -> Result<KvResult, KvError> {
        let (h, created) = self.handle(&rs, false);
        if created {
            // learn the current metadata so the write's CAS can succeed at once
            let r = h.max_register().weak_read(0).await;
            out.meta_roundtrips += r.roundtrips;
            out.roundtrips += r.roundtrips;
        }
        let w = h.write(bytes).await?;
        memory_errors(&h)?;
        out.roundtrips += w.roundtrips;
        out.widened |= w.widened;
        out.write_path = Some(w.path);
        if w.path == WritePath::Deleted {
            self.cache_flush(key);
            return Ok(KvResult::NoSuchKey);
        }
        out.reg = Some(rs.id);
        out.ts = Some(w.ts.as_u64());
        Ok(KvResult::Ok)
    }

    pub async fn get(&self, key: &[u8]) -> Result<KvOutcome, KvError> {
        let mut out = KvOutcome::new(KvResult::NotFound);
        let Some((mut rs, mut cached)) = self.locate(key, &mut out).await else {
            return Ok(out);
        };
        loop {
            let (h, _) = self.handle(&rs, false);
            let r = h.read().await;
            out.roundtrips += r.roundtrips;
            out.iterations += r.iterations;
            out.widened |= r.widened;
            out.read_path = Some(r.path);
            out.reg = Some(rs.id);
            out.ts = Some(r.value.ts().as_u64());
            if r.value.is_tombstone() && cached {
                self.cache_flush(key);
                cached = false;
                out.index_roundtrips += 1;
                out.roundtrips += 1;
                match self.index_get(key).await {
                    Some(next) if next.id != rs.id && !next.deleted => {
                        self.cache_put(key, next.clone());
                        rs = next;
                        continue;
                    }
                    _ => return Ok(out),
                }
            }
            out.result = match value_bytes(&r.value) {
                Some(b) => KvResult::Value(b),
                None => KvResult::NotFound,
            };
            return Ok(out);
        }
    }

    pub async fn delete(&self, key: &[u8]) -> Result<KvOutcome, KvError> {
        let mut out = KvOutcome::new(KvResult::NoSuchKey);
        let Some((mut rs, _)) = self.locate(key, &mut out).await else {
            return Ok(out);
        };
        loop {
            let (h, _) = self.handle(&rs, false);
            let (w, was_deleted) = h.delete().await;
            out.roundtrips += w.roundtrips.max(1);
            out.widened |= w.widened;
            out.write_path = Some(WritePath::Deleted);
            out.reg = Some(rs.id);
            if was_deleted {
                // stale location: the key may have been inserted again
                self.cache_flush(key);
                out.index_roundtrips += 1;
                out.roundtrips += 1;
                match self.index_get(key).await {
                    Some(next) if next.id != rs.id && !next.deleted => {
                        self.cache_put(key, next.clone());
                        rs = next;
                        continue;
                    }
                    _ => {
                        // absent as of the index read; a racing deleter may
                        // have seen our sentinel and relies on us
                        out.ts = Some(w.ts.as_u64());
                        out.result = KvResult::Ok;
                        return Ok(out);
                    }
                }
            }
            out.ts = Some(w.ts.as_u64());
            out.result = KvResult::Ok;
            self.cache_flush(key);
            // unmap in the background; a failed deleter leaves this to updaters
            let st = self.store.clone();
            let key = key.to_vec();
            let id = rs.id;
            let pending = self.fabric().call_service(move || {
                let mut idx = st.index.borrow_mut();
                if let Some(cur) = idx.map.get_mut(&key)
                    && cur.id == id
                {
                    cur.deleted = true;
                    idx.map.remove(&key);
                }
            });
            self.fabric().spawn(async move {
                pending.await;
            });
            return Ok(out);
        }
    }

    fn abd(&self, rs: &ReplicaSet) -> Abd<InnOutRegister> {
        let (h, _) = self.handle(rs, false);
        Abd::new(self.store.fabric.clone(), self.id, h.max_register().clone())
    }

    /// Two-phase write on an existing key, for roundtrip comparison.
    pub async fn abd_update(&self, key: &[u8], value: &[u8]) -> Result<KvOutcome, KvError> {
        self.check_len(value)?;
        let mut out = KvOutcome::new(KvResult::NoSuchKey);
        let Some((rs, _)) = self.locate(key, &mut out).await else {
            return Ok(out);
        };
        let w = self.abd(&rs).write(Rc::from(value)).await;
        out.roundtrips += w.roundtrips;
        if !w.deleted {
            out.result = KvResult::Ok;
            out.reg = Some(rs.id);
            out.ts = Some(w.ts.as_u64());
        }
        Ok(out)
    }

    /// Max-register read on an existing key, for roundtrip comparison.
    pub async fn abd_get(&self, key: &[u8]) -> Result<KvOutcome, KvError> {
        let mut out = KvOutcome::new(KvResult::NotFound);
        let Some((rs, _)) = self.locate(key, &mut out).await else {
            return Ok(out);
        };
        let r = self.abd(&rs).read().await;
        out.roundtrips += r.roundtrips;
        out.reg = Some(rs.id);
        if let Some(b) = value_bytes(&r.value) {
            out.result = KvResult::Value(b);
        }
        Ok(out)
    }

    /// Allocates replicas and maps them in the index without writing them,
    /// as an inserter that failed right after the index step would.
    pub async fn insert_mapping_only(&self, key: &[u8]) -> Result<bool, KvError> {
        let fresh = self.alloc_replicas(key)?;
        Ok(self.index_insert(key, fresh).await.is_ok())
    }
}

fn memory_errors(h: &Handle) -> Result<(), KvError> {
    match h.max_register().node_register().take_errors().into_iter().next() {
        Some(e) => Err(KvError::Memory(e)),
        None => Ok(()),
    }
}

fn value_bytes(v: &MValue) -> Option<Rc<[u8]>> {
    if v.is_bottom() || v.is_tombstone() {
        return None;
    }
    v.bytes().cloned()
}
