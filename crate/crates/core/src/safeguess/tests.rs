use super::*;
use crate::checker::{
    AuditViolation, BruteVerdict, History, Op, audit_trace, check_bruteforce, check_construction, check_max_register,
    max_ops_from_trace,
};
use crate::fabric::{CrashAt, DelayModel, FabricConfig, SlowdownAt};
use crate::innout::{
    InnOutOptions, InnOutRegister, InnOutStats, OopArena, OopPool, Placement, ReplicaLayout, Xxh3Digest,
};
use crate::value::{Payload, value_id};
use alloc::vec;
use proptest::prelude::*;

const WRITERS: usize = 4;
const LAYOUT: ReplicaLayout = ReplicaLayout { slots: WRITERS, lock_cells: WRITERS, value_capacity: 32 };
const POOL: OopPool = OopPool { base: 8192, value_capacity: 32, per_client: 4096 };

type Reg = SafeGuess<InnOutRegister>;

struct Rig {
    fab: Fabric,
    stats: Rc<RefCell<SafeGuessStats>>,
}

impl Rig {
    fn new(cfg: FabricConfig) -> Self {
        Rig { fab: Fabric::new(cfg).unwrap(), stats: Rc::default() }
    }

    fn handle(&self, client: u8, skew: i64, opts: SafeGuessOptions) -> Rc<Reg> {
        let place =
            Placement { reg_id: 1, replicas: vec![(NodeId(0), 0), (NodeId(1), 0), (NodeId(2), 0)], layout: LAYOUT };
        let nodes = place.nodes();
        let io = Rc::new(InnOutRegister::new(
            self.fab.clone(),
            ClientId(client),
            place.clone(),
            client as usize,
            true,
            Rc::new(RefCell::new(OopArena::new(POOL, ClientId(client)))),
            POOL,
            Rc::new(Xxh3Digest),
            InnOutOptions::default(),
            Rc::new(RefCell::new(InnOutStats::default())),
        ));
        let m = Rc::new(MaxRegister::new(self.fab.clone(), io, ClientId(client), 1, nodes, opts.quorum));
        let cells: LockCells = Rc::new(move |owner| {
            place.replicas.iter().map(|&(n, base)| (n, LAYOUT.lock_offset(base, owner as usize))).collect()
        });
        Rc::new(SafeGuess::new(
            self.fab.clone(),
            ClientId(client),
            1,
            m,
            cells,
            WRITERS as u32,
            Rc::new(RefCell::new(GuessClock::new(client, skew, Resync::OnStale))),
            opts,
            self.stats.clone(),
        ))
    }
}

fn bytes(id: u64) -> Rc<[u8]> {
    let mut b = id.to_le_bytes().to_vec();
    b.resize(24, 0xab);
    Rc::from(b)
}

fn id_of(v: &MValue) -> Option<u64> {
    v.bytes().and_then(|b| value_id(b))
}

#[test]
fn guesses_are_strictly_monotone() {
    let mut c = GuessClock::new(3, 0, Resync::Never);
    let a = c.guess(10).unwrap();
    let b = c.guess(10).unwrap();
    let d = c.guess(5).unwrap();
    assert_eq!((a.counter, b.counter, d.counter), (10, 11, 12));
    assert_eq!(a.writer, 3);
    let mut neg = GuessClock::new(0, -100, Resync::Never);
    assert_eq!(neg.guess(0).unwrap().counter, 1);
}

#[test]
fn stale_guess_resyncs_the_clock() {
    let mut c = GuessClock::new(1, -50, Resync::OnStale);
    assert_eq!(c.guess(100).unwrap().counter, 50);
    c.on_stale(100, Timestamp::new(120, 0));
    assert_eq!(c.guess(110).unwrap().counter, 130);
    let mut never = GuessClock::new(1, -50, Resync::Never);
    never.on_stale(100, Timestamp::new(120, 0));
    assert_eq!(never.guess(110).unwrap().counter, 60);
}

#[test]
fn counter_exhaustion_is_an_error() {
    let mut c = GuessClock::new(2, MAX_COUNTER as i64, Resync::Never);
    assert!(c.guess(0).is_ok());
    assert_eq!(c.guess(0), Err(GuessError::CounterExhausted { writer: 2 }));
}

#[test]
fn uncontended_write_and_read_take_one_roundtrip_each() {
    let rig = Rig::new(FabricConfig::default());
    let w = rig.handle(0, 0, SafeGuessOptions::default());
    let r = rig.handle(1, 0, SafeGuessOptions::default());
    let f = rig.fab.clone();
    let (wo, ro) = rig
        .fab
        .block_on(async move {
            let wo = w.write(bytes(7)).await.unwrap();
            f.sleep(100).await;
            let ro = r.read().await;
            (wo, ro)
        })
        .unwrap();
    assert_eq!((wo.path, wo.roundtrips), (WritePath::Fast, 1));
    assert_eq!((ro.path, ro.roundtrips, ro.iterations), (ReadPath::Verified, 1, 1));
    assert_eq!(id_of(&ro.value), Some(7));
}

#[test]
fn stale_guess_takes_the_slow_path_and_rewrites_above() {
    let rig = Rig::new(FabricConfig::default());
    let ahead = rig.handle(0, 1000, SafeGuessOptions::default());
    let behind = rig.handle(2, -50, SafeGuessOptions::default());
    let reader = rig.handle(1, 0, SafeGuessOptions::default());
    let (a, b, r) = rig
        .fab
        .block_on(async move {
            let a = ahead.write(bytes(1)).await.unwrap();
            let b = behind.write(bytes(2)).await.unwrap();
            let r = reader.read().await;
            (a, b, r)
        })
        .unwrap();
    assert_eq!(b.path, WritePath::Relocked);
    assert_eq!(b.ts, Timestamp::new(a.ts.counter + 1, 2));
    assert!(b.roundtrips <= 4);
    assert!(b.ts > a.ts);
    assert_eq!(id_of(&r.value), Some(2));
}

#[test]
fn writer_yields_to_a_reader_that_locked_its_guess() {
    let rig = Rig::new(FabricConfig::default());
    let ahead = rig.handle(0, 1000, SafeGuessOptions::default());
    // far behind: the first guess is (1, 2)
    let writer = rig.handle(2, -1_000_000, SafeGuessOptions::default());
    let reader = rig.handle(1, 0, SafeGuessOptions::default());
    let out = rig
        .fab
        .block_on(async move {
            ahead.write(bytes(1)).await.unwrap();
            let t = reader.lock(2).trylock(Timestamp::new(1, 2).as_u64(), LockMode::Read).await;
            assert!(t.granted);
            writer.write(bytes(2)).await.unwrap()
        })
        .unwrap();
    assert_eq!(out.guessed, Timestamp::new(1, 2));
    assert_eq!(out.path, WritePath::Yielded);
    assert_eq!(out.conflict, Some(LockConflict::OtherMode));
    assert_eq!(out.ts, out.guessed);
}

#[test]
fn twice_seen_guess_is_locked_and_returned() {
    let rig = Rig::new(FabricConfig::default());
    let crashed_writer = rig.handle(3, 0, SafeGuessOptions::default());
    let reader = rig.handle(1, 0, SafeGuessOptions::default());
    let (first, second) = rig
        .fab
        .block_on(async move {
            // a writer that stored its guess and then stopped
            let v = MValue::new(Timestamp::new(5, 3), Flag::Guessed, bytes(9));
            crashed_writer.max_register().write(v, 0).await;
            let first = reader.read().await;
            let second = reader.read().await;
            (first, second)
        })
        .unwrap();
    assert_eq!((first.path, first.iterations), (ReadPath::Locked, 2));
    assert_eq!(id_of(&first.value), Some(9));
    assert_eq!(second.path, ReadPath::Verified);
    assert_eq!(id_of(&second.value), Some(9));
}

#[test]
fn churning_writer_cannot_starve_a_reader() {
    let rig = Rig::new(FabricConfig::default());
    let churn = rig.handle(3, 0, SafeGuessOptions::default());
    let reader = rig.handle(1, 0, SafeGuessOptions::default());
    let f = rig.fab.clone();
    rig.fab.spawn(async move {
        for i in 1..200u32 {
            let v = MValue::new(Timestamp::new(i, 3), Flag::Guessed, bytes(i as u64));
            churn.max_register().write(v, 0).await;
            f.sleep(1).await;
        }
    });
    let f = rig.fab.clone();
    let out = rig
        .fab
        .block_on(async move {
            f.sleep(30).await;
            reader.read().await
        })
        .unwrap();
    assert_eq!(out.path, ReadPath::WaitFree);
    assert!(out.iterations <= 2 * WRITERS as u32 + 1);
    assert!(matches!(out.value.payload, Payload::Inline(_)));
}

#[test]
fn deleted_register_rejects_writes() {
    let rig = Rig::new(FabricConfig::default());
    let a = rig.handle(0, 0, SafeGuessOptions::default());
    let b = rig.handle(1, 0, SafeGuessOptions::default());
    let (w, r) = rig
        .fab
        .block_on(async move {
            a.write(bytes(1)).await.unwrap();
            a.delete().await;
            (b.write(bytes(2)).await.unwrap(), b.read().await)
        })
        .unwrap();
    assert_eq!(w.path, WritePath::Deleted);
    assert!(r.value.is_tombstone());
}

/// A writer stopped after its VERIFIED value reached node 0 only. Node 0
/// answers first until tick 200 and is slow afterwards, so a read before 200
/// sees the value and a read after it does not unless it was written back.
fn minority_value_then_slow_holder(mutation: Mutation) -> (Option<u64>, Option<u64>, bool) {
    let mut cfg = FabricConfig { delay: DelayModel::fixed(10), ..FabricConfig::default() };
    cfg.node_delay.insert(0, DelayModel::fixed(2));
    cfg.faults.slowdowns = vec![SlowdownAt { at: 200, node: NodeId(0), extra: 1000 }];
    let rig = Rig::new(cfg);
    let opts = SafeGuessOptions { mutation, ..SafeGuessOptions::default() };
    let stopped = rig.handle(3, 0, opts);
    let first = rig.handle(1, 0, opts);
    let second = rig.handle(2, 0, opts);
    let f = rig.fab.clone();
    let out = rig
        .fab
        .block_on(async move {
            let v = MValue::new(Timestamp::new(5, 3), Flag::Verified, bytes(9));
            stopped.max_register().node_register().clone().write(NodeId(0), v).await;
            let a = first.read().await;
            f.sleep(400).await;
            let b = second.read().await;
            (id_of(&a.value), id_of(&b.value))
        })
        .unwrap();
    let ordered =
        !audit_trace(&rig.fab.trace()).violations.iter().any(|v| matches!(v, AuditViolation::ReadLoopOrder { .. }));
    (out.0, out.1, ordered)
}

#[test]
fn full_reads_write_back_a_minority_value() {
    assert_eq!(minority_value_then_slow_holder(Mutation::None), (Some(9), Some(9), true));
}

#[test]
fn weak_read_loop_loses_a_returned_value() {
    assert_eq!(minority_value_then_slow_holder(Mutation::ReadLoopWeakRead), (Some(9), None, false));
}

/// A writer stopped after its GUESSED value reached a majority. Returns the
/// read paths of two readers that run one after the other.
fn paths_after_stopped_guess(mutation: Mutation) -> (ReadPath, ReadPath) {
    let rig = Rig::new(FabricConfig::default());
    let opts = SafeGuessOptions { mutation, ..SafeGuessOptions::default() };
    let stopped = rig.handle(3, 0, opts);
    let first = rig.handle(1, 0, opts);
    let second = rig.handle(2, 0, opts);
    let f = rig.fab.clone();
    rig.fab
        .block_on(async move {
            let v = MValue::new(Timestamp::new(5, 3), Flag::Guessed, bytes(4));
            stopped.max_register().write(v, 0).await;
            let a = first.read().await;
            f.sleep(200).await;
            let b = second.read().await;
            assert_eq!((id_of(&a.value), id_of(&b.value)), (Some(4), Some(4)));
            (a.path, b.path)
        })
        .unwrap()
}

#[test]
fn write_back_lets_later_readers_skip_the_lock() {
    assert_eq!(paths_after_stopped_guess(Mutation::None), (ReadPath::Locked, ReadPath::Verified));
    assert_eq!(paths_after_stopped_guess(Mutation::SkipWriteBack), (ReadPath::Locked, ReadPath::Locked));
}

#[derive(Clone, Debug)]
enum Step {
    Write,
    Read,
    Pause(u64),
}

fn arb_step() -> impl Strategy<Value = Step> {
    prop_oneof![3 => Just(Step::Write), 3 => Just(Step::Read), 1 => (0u64..30).prop_map(Step::Pause)]
}

fn arb_mode() -> impl Strategy<Value = ParallelRead> {
    prop_oneof![Just(ParallelRead::Fused), Just(ParallelRead::Separate), Just(ParallelRead::Full)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]
    #[test]
    fn concurrent_histories_are_linearizable(
        seed in any::<u64>(),
        crash in proptest::option::of((0u8..3, 0u64..300)),
        mode in arb_mode(),
        skews in proptest::collection::vec(-60i64..60, WRITERS),
        scripts in proptest::collection::vec(proptest::collection::vec(arb_step(), 1..7), 2..=WRITERS),
    ) {
        let mut cfg = FabricConfig { seed, ..FabricConfig::default() };
        if let Some((node, at)) = crash {
            cfg.faults.crashes = vec![CrashAt { at, node: NodeId(node) }];
        }
        let rig = Rig::new(cfg);
        let opts = SafeGuessOptions { parallel_read: mode, quorum: QuorumOptions { majority_first: true, widen_after: 80 }, ..SafeGuessOptions::default() };
        let ops: Rc<RefCell<Vec<Op>>> = Rc::default();
        let finished = Rc::new(core::cell::Cell::new(0usize));
        let clients = scripts.len();
        for (c, script) in scripts.into_iter().enumerate() {
            let h = rig.handle(c as u8, skews[c], opts);
            let f = rig.fab.clone();
            let ops = ops.clone();
            let finished = finished.clone();
            rig.fab.spawn(async move {
                for (i, st) in script.into_iter().enumerate() {
                    let invoke = f.now();
                    match st {
                        Step::Write => {
                            let id = ((c as u64) << 32) | (i as u64 + 1);
                            let out = h.write(bytes(id)).await.unwrap();
                            ops.borrow_mut().push(Op::write(c as u32, id, invoke, f.now(), Some(out.ts.as_u64())));
                        }
                        Step::Read => {
                            let out = h.read().await;
                            ops.borrow_mut().push(Op::read(c as u32, id_of(&out.value), invoke, f.now()));
                        }
                        Step::Pause(t) => f.sleep(t).await,
                    }
                }
                finished.set(finished.get() + 1);
            });
        }
        rig.fab.run();
        prop_assert_eq!(finished.get(), clients);
        let h = History::new(ops.borrow().clone());
        let brute = check_bruteforce(&h, 64).unwrap();
        let built = check_construction(&h);
        prop_assert!(matches!(brute, BruteVerdict::Linearizable(_)), "{:?}", brute);
        prop_assert!(built.is_ok(), "{:?}", built);
        let trace = rig.fab.trace();
        let mv = check_max_register(&max_ops_from_trace(&trace));
        prop_assert!(mv.is_empty(), "{:?} {:?}", mv, mode);
        let audit = audit_trace(&trace);
        prop_assert!(audit.is_clean(), "{:?}", audit.violations);
    }
}
