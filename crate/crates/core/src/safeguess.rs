//! Linearizable, wait-free register whose writes guess their timestamp.
//!
//! A write stores `(guess, GUESSED, v)` in the max register while reading it.
//! If nothing larger was there the guess was fresh and the write is done. If
//! not, the writer locks its guessed timestamp against readers and, when that
//! succeeds, rewrites `v` above what it saw. Readers return VERIFIED values at
//! once, and certify a GUESSED value by seeing it twice and locking its
//! timestamp in read mode.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use crate::fabric::{ClientId, Fabric, NodeId, Tick, join2};
use crate::maxreg::{MaxRegister, NodeRegister, QuorumOptions};
use crate::trace::{BoundKind, GuessWriteRecord, ReadLoopRecord, TraceEvent};
use crate::tslock::{LockConflict, LockMode, TimestampLock};
use crate::value::{Flag, MAX_COUNTER, MValue, Timestamp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ReadPath {
    /// Read a VERIFIED value.
    Verified,
    /// Read the same GUESSED value twice and locked its timestamp.
    Locked,
    /// Saw two values from one writer and returned the first.
    WaitFree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum WritePath {
    /// The guess was fresh.
    Fast,
    /// Locked readers out and rewrote with a larger timestamp.
    Relocked,
    /// A reader certified the guess first.
    Yielded,
    /// The register holds the deletion sentinel.
    Deleted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Resync {
    Never,
    /// Jump the clock to the largest timestamp seen after a stale guess.
    #[default]
    OnStale,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GuessError {
    CounterExhausted { writer: u8 },
}

impl fmt::Display for GuessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuessError::CounterExhausted { writer } => write!(f, "timestamp counter exhausted at writer {writer}"),
        }
    }
}

impl core::error::Error for GuessError {}

/// Loosely synchronized clock of one writer: simulated time plus a fixed
/// skew, forced strictly monotone.
#[derive(Clone, Debug)]
pub struct GuessClock {
    writer: u8,
    skew: i64,
    offset: i64,
    last: u32,
    resync: Resync,
    pub stale: u64,
}

impl GuessClock {
    pub fn new(writer: u8, skew: i64, resync: Resync) -> Self {
        GuessClock { writer, skew, offset: 0, last: 0, resync, stale: 0 }
    }

    pub fn guess(&mut self, now: Tick) -> Result<Timestamp, GuessError> {
        let sample = (now as i64).saturating_add(self.skew).saturating_add(self.offset);
        let next = (self.last as i64 + 1).max(sample);
        if next > MAX_COUNTER as i64 {
            return Err(GuessError::CounterExhausted { writer: self.writer });
        }
        self.last = next as u32;
        Ok(Timestamp::new(self.last, self.writer))
    }

    /// Notes that a guess was below `seen`.
    pub fn on_stale(&mut self, now: Tick, seen: Timestamp) {
        self.stale += 1;
        if self.resync == Resync::OnStale {
            let sample = (now as i64).saturating_add(self.skew);
            self.offset = self.offset.max(seen.counter as i64 - sample);
        }
    }

    /// Keeps later guesses above a timestamp this writer used.
    pub fn observe_own(&mut self, ts: Timestamp) {
        self.last = self.last.max(ts.counter);
    }

    pub fn last(&self) -> u32 {
        self.last
    }
}

/// Deliberate protocol defects, used to show the checkers catch them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Mutation {
    #[default]
    None,
    /// Readers return a twice-seen GUESSED value without locking it.
    SkipReaderTrylock,
    /// Writers rewrite a stale guess without locking it.
    WriterIgnoresTrylock,
    /// The read loop uses weak reads of the max register.
    ReadLoopWeakRead,
    /// Readers never write back the VERIFIED flag.
    SkipWriteBack,
    /// Readers never take the two-values-from-one-writer exit.
    NoWaitFreeExit,
}

/// How the write's parallel read of the max register is issued.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ParallelRead {
    /// Each replica reads its metadata in the same batch as the update.
    #[default]
    Fused,
    /// A separate weak read of the max register, concurrent with the write.
    Separate,
    /// A full read with write-back, concurrent with the write.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SafeGuessOptions {
    pub quorum: QuorumOptions,
    pub parallel_read: ParallelRead,
    pub mutation: Mutation,
    /// Hard stop for the read loop, well above the proven bound.
    pub iteration_cap: u32,
}

impl Default for SafeGuessOptions {
    fn default() -> Self {
        SafeGuessOptions {
            quorum: QuorumOptions::default(),
            parallel_read: ParallelRead::Fused,
            mutation: Mutation::None,
            iteration_cap: 1024,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SafeGuessStats {
    pub fast_writes: u64,
    pub relocked_writes: u64,
    pub yielded_higher_ts: u64,
    pub yielded_reader_lock: u64,
    pub deleted_writes: u64,
    pub verified_reads: u64,
    pub locked_reads: u64,
    pub waitfree_reads: u64,
    pub read_restarts: u64,
    /// Histogram of read-loop iterations, index = iterations.
    pub iterations: Vec<u64>,
}

impl SafeGuessStats {
    fn note_iterations(&mut self, n: u32) {
        let n = n as usize;
        if self.iterations.len() <= n {
            self.iterations.resize(n + 1, 0);
        }
        self.iterations[n] += 1;
    }
}

#[derive(Clone, Debug)]
pub struct WriteOutcome {
    pub path: WritePath,
    pub guessed: Timestamp,
    /// Timestamp the write is ordered by.
    pub ts: Timestamp,
    pub roundtrips: u32,
    pub widened: bool,
    pub conflict: Option<LockConflict>,
    pub op: u64,
}

#[derive(Clone, Debug)]
pub struct ReadOutcome {
    /// Resolved value; bottom or the sentinel when empty or deleted.
    pub value: MValue,
    pub path: ReadPath,
    pub iterations: u32,
    pub roundtrips: u32,
    pub widened: bool,
    pub op: u64,
}

/// Lock cells of each writer, as `(node, offset)` in replica order.
pub type LockCells = Rc<dyn Fn(u8) -> Vec<(NodeId, u64)>>;

/// One client's handle on a register.
pub struct SafeGuess<R: NodeRegister<Value = MValue>> {
    fabric: Fabric,
    client: ClientId,
    reg_id: u64,
    m: Rc<MaxRegister<R>>,
    lock_cells: LockCells,
    locks: RefCell<BTreeMap<u8, Rc<TimestampLock>>>,
    writers: u32,
    clock: Rc<RefCell<GuessClock>>,
    opts: SafeGuessOptions,
    stats: Rc<RefCell<SafeGuessStats>>,
}

impl<R: NodeRegister<Value = MValue>> SafeGuess<R> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fabric: Fabric,
        client: ClientId,
        reg_id: u64,
        m: Rc<MaxRegister<R>>,
        lock_cells: LockCells,
        writers: u32,
        clock: Rc<RefCell<GuessClock>>,
        opts: SafeGuessOptions,
        stats: Rc<RefCell<SafeGuessStats>>,
    ) -> Self {
        SafeGuess {
            fabric,
            client,
            reg_id,
            m,
            lock_cells,
            locks: RefCell::new(BTreeMap::new()),
            writers,
            clock,
            opts,
            stats,
        }
    }

    pub fn max_register(&self) -> &Rc<MaxRegister<R>> {
        &self.m
    }

    fn lock(&self, owner: u8) -> Rc<TimestampLock> {
        self.locks
            .borrow_mut()
            .entry(owner)
            .or_insert_with(|| {
                Rc::new(TimestampLock::new(
                    self.fabric.clone(),
                    self.client,
                    self.reg_id,
                    owner,
                    (self.lock_cells)(owner),
                    self.opts.quorum,
                ))
            })
            .clone()
    }

    pub async fn write(&self, bytes: Rc<[u8]>) -> Result<WriteOutcome, GuessError> {
        let op = self.fabric.next_op_id();
        let me = self.client.0;
        let guessed = self.clock.borrow_mut().guess(self.fabric.now())?;
        let w = MValue::new(guessed, Flag::Guessed, bytes.clone());
        let (m, mut roundtrips, mut widened) = match self.opts.parallel_read {
            ParallelRead::Fused => {
                let (r, wr) = self.m.write_and_weak_read(w.clone(), op).await;
                (r.value, r.roundtrips.max(wr.roundtrips), r.widened | wr.widened)
            }
            ParallelRead::Separate => {
                let (wr, r) = join2(self.m.write(w.clone(), op), self.m.weak_read(op)).await;
                (r.value, r.roundtrips.max(wr.roundtrips), r.widened | wr.widened)
            }
            ParallelRead::Full => {
                let (wr, r) = join2(self.m.write(w.clone(), op), self.m.read(op)).await;
                (r.value, r.roundtrips.max(wr.roundtrips), r.widened | wr.widened)
            }
        };
        let mut out =
            WriteOutcome { path: WritePath::Fast, guessed, ts: guessed, roundtrips, widened, conflict: None, op };
        if m.is_tombstone() {
            out.path = WritePath::Deleted;
            self.stats.borrow_mut().deleted_writes += 1;
        } else if m <= w {
            self.stats.borrow_mut().fast_writes += 1;
            let reg = self.m.clone();
            let v = w.with_flag(Flag::Verified);
            self.fabric.spawn(async move {
                reg.write(v, op).await;
            });
        } else {
            self.clock.borrow_mut().on_stale(self.fabric.now(), m.ts());
            let (granted, conflict) = if self.opts.mutation == Mutation::WriterIgnoresTrylock {
                (true, None)
            } else {
                let t = self.lock(me).trylock(guessed.as_u64(), LockMode::Write).await;
                roundtrips += t.phases;
                widened |= t.widened;
                (t.granted, t.conflict)
            };
            if granted {
                if m.ts().counter >= MAX_COUNTER {
                    return Err(GuessError::CounterExhausted { writer: me });
                }
                let ts = Timestamp::new(m.ts().counter + 1, me);
                self.clock.borrow_mut().observe_own(ts);
                let wr = self.m.write(MValue::new(ts, Flag::Verified, bytes), op).await;
                roundtrips += wr.roundtrips;
                widened |= wr.widened;
                out.path = WritePath::Relocked;
                out.ts = ts;
                self.stats.borrow_mut().relocked_writes += 1;
            } else {
                out.path = WritePath::Yielded;
                out.conflict = conflict;
                let mut st = self.stats.borrow_mut();
                match conflict {
                    Some(LockConflict::HigherTs) => st.yielded_higher_ts += 1,
                    _ => st.yielded_reader_lock += 1,
                }
            }
        }
        out.roundtrips = roundtrips;
        out.widened = widened;
        self.fabric.record(TraceEvent::GuessWrite(GuessWriteRecord {
            client: me,
            reg: self.reg_id,
            op,
            guessed: guessed.as_u64(),
            rank: crate::value::rank(out.ts, Flag::Verified),
            path: out.path,
            phases: roundtrips,
        }));
        Ok(out)
    }

    /// Writes the deletion sentinel, which no later write can exceed.
    /// Writes the deletion sentinel. The flag reports that the register
    /// already held it before this call.
    pub async fn delete(&self) -> (WriteOutcome, bool) {
        let op = self.fabric.next_op_id();
        let (seen, wr) = self.m.write_and_weak_read(MValue::tombstone(), op).await;
        let out = WriteOutcome {
            path: WritePath::Deleted,
            guessed: MValue::tombstone().ts(),
            ts: MValue::tombstone().ts(),
            roundtrips: wr.roundtrips,
            widened: wr.widened,
            conflict: None,
            op,
        };
        (out, seen.value.is_tombstone())
    }

    pub async fn read(&self) -> ReadOutcome {
        let op = self.fabric.next_op_id();
        let mut roundtrips = 0;
        let mut widened = false;
        let mut total_iterations = 0;
        'restart: loop {
            let mut seen: BTreeMap<u8, MValue> = BTreeMap::new();
            let mut visits: BTreeMap<u8, u32> = BTreeMap::new();
            let mut iterations = 0u32;
            loop {
                iterations += 1;
                let r = if self.opts.mutation == Mutation::ReadLoopWeakRead {
                    self.m.weak_read(op).await
                } else {
                    self.m.read(op).await
                };
                roundtrips += r.roundtrips;
                widened |= r.widened;
                let m = r.value;
                let tid = m.ts().writer;
                let visit = {
                    let v = visits.entry(tid).or_insert(0);
                    *v += 1;
                    *v
                };
                let picked = if m.is_verified() {
                    Some((m.clone(), ReadPath::Verified))
                } else if seen.get(&tid) == Some(&m) {
                    let granted = if self.opts.mutation == Mutation::SkipReaderTrylock {
                        true
                    } else {
                        let t = self.lock(tid).trylock(m.ts().as_u64(), LockMode::Read).await;
                        roundtrips += t.phases;
                        widened |= t.widened;
                        t.granted
                    };
                    granted.then_some((m.clone(), ReadPath::Locked))
                } else if seen.contains_key(&tid) && self.opts.mutation != Mutation::NoWaitFreeExit {
                    Some((seen[&tid].clone(), ReadPath::WaitFree))
                } else {
                    None
                };
                let (value, path) = if let Some(p) = picked {
                    p
                } else {
                    if visit >= 3 {
                        self.bound(BoundKind::ThirdVisit { writer: tid });
                    }
                    seen.insert(tid, m);
                    if iterations < self.opts.iteration_cap {
                        continue;
                    }
                    // only reachable with a broken protocol; the bound event flags it
                    let last = seen[&tid].clone();
                    (last, ReadPath::WaitFree)
                };
                let value = match self.m.resolve(value).await {
                    Some((v, r)) => {
                        roundtrips += r;
                        v
                    }
                    None => {
                        // every known holder of the value became unreachable
                        self.stats.borrow_mut().read_restarts += 1;
                        roundtrips += 1;
                        total_iterations += iterations;
                        continue 'restart;
                    }
                };
                if path == ReadPath::Locked && self.opts.mutation != Mutation::SkipWriteBack {
                    let reg = self.m.clone();
                    let v = value.with_flag(Flag::Verified);
                    self.fabric.spawn(async move {
                        reg.write(v, op).await;
                    });
                }
                total_iterations += iterations;
                self.finish_loop(op, iterations, path, value.ts().as_u64(), roundtrips);
                {
                    let mut st = self.stats.borrow_mut();
                    match path {
                        ReadPath::Verified => st.verified_reads += 1,
                        ReadPath::Locked => st.locked_reads += 1,
                        ReadPath::WaitFree => st.waitfree_reads += 1,
                    }
                    st.note_iterations(total_iterations);
                }
                return ReadOutcome { value, path, iterations: total_iterations, roundtrips, widened, op };
            }
        }
    }

    fn finish_loop(&self, op: u64, iterations: u32, path: ReadPath, ts: u64, roundtrips: u32) {
        let bound = 2 * self.writers + 1;
        if iterations > bound {
            self.bound(BoundKind::ReadIterations { iterations, bound });
        }
        self.fabric.record(TraceEvent::ReadLoop(ReadLoopRecord {
            client: self.client.0,
            reg: self.reg_id,
            op,
            iterations,
            writers: self.writers,
            path,
            ts,
            phases: roundtrips,
        }));
    }

    fn bound(&self, kind: BoundKind) {
        self.fabric.record(TraceEvent::Bound { client: self.client.0, reg: self.reg_id, kind });
    }
}

#[cfg(test)]
mod tests;
