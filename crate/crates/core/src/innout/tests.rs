use super::*;
use crate::checker::{audit_trace, check_max_register, max_ops_from_trace};
use crate::fabric::{CrashAt, FabricConfig};
use crate::maxreg::{MaxRegister, QuorumOptions};
use crate::value::Timestamp;
use alloc::vec;
use proptest::prelude::*;

const LAYOUT: ReplicaLayout = ReplicaLayout { slots: 2, lock_cells: 4, value_capacity: 64 };
const POOL: OopPool = OopPool { base: 4096, value_capacity: 64, per_client: 64 };

struct Setup {
    fab: Fabric,
    stats: Rc<RefCell<InnOutStats>>,
}

impl Setup {
    fn new(cfg: FabricConfig) -> Self {
        Setup { fab: Fabric::new(cfg).unwrap(), stats: Rc::default() }
    }

    fn register(&self, client: u8, opts: InnOutOptions) -> Rc<InnOutRegister> {
        let place =
            Placement { reg_id: 1, replicas: vec![(NodeId(0), 0), (NodeId(1), 0), (NodeId(2), 0)], layout: LAYOUT };
        Rc::new(InnOutRegister::new(
            self.fab.clone(),
            ClientId(client),
            place,
            client as usize % LAYOUT.slots,
            false,
            Rc::new(RefCell::new(OopArena::new(POOL, ClientId(client)))),
            POOL,
            Rc::new(Xxh3Digest),
            opts,
            self.stats.clone(),
        ))
    }

    fn maxreg(&self, client: u8, opts: InnOutOptions) -> Rc<MaxRegister<InnOutRegister>> {
        let r = self.register(client, opts);
        let nodes = r.placement().nodes();
        Rc::new(MaxRegister::new(self.fab.clone(), r, ClientId(client), 1, nodes, QuorumOptions::default()))
    }
}

fn val(counter: u32, writer: u8, flag: Flag, tag: u8) -> MValue {
    MValue::new(Timestamp::new(counter, writer), flag, Rc::from(vec![tag; 24]))
}

#[test]
fn verified_write_is_served_in_place() {
    let s = Setup::new(FabricConfig::default());
    let r = s.register(0, InnOutOptions::default());
    let v = val(3, 0, Flag::Verified, 7);
    let r2 = r.clone();
    let got = s
        .fab
        .block_on(async move {
            r2.clone().write(NodeId(0), v).await;
            r2.read_resolved(NodeId(0)).await
        })
        .unwrap();
    assert_eq!(got.1, 1);
    assert_eq!(got.0.bytes().unwrap()[..], [7; 24]);
    assert_eq!(s.stats.borrow().inplace_hits, 1);
}

#[test]
fn guessed_write_is_not_copied_in_place() {
    let s = Setup::new(FabricConfig::default());
    let r = s.register(0, InnOutOptions::default());
    let got = s
        .fab
        .block_on(async move {
            r.clone().write(NodeId(0), val(3, 0, Flag::Guessed, 7)).await;
            r.read_resolved(NodeId(0)).await
        })
        .unwrap();
    assert_eq!(got.1, 2);
    assert_eq!(got.0.bytes().unwrap()[..], [7; 24]);
}

#[test]
fn corrupt_in_place_copy_falls_back_to_the_buffer() {
    let s = Setup::new(FabricConfig::default());
    let r = s.register(0, InnOutOptions { poison_inplace: true, ..InnOutOptions::default() });
    let got = s
        .fab
        .block_on(async move {
            r.clone().write(NodeId(0), val(3, 0, Flag::Verified, 9)).await;
            r.read_resolved(NodeId(0)).await
        })
        .unwrap();
    assert_eq!(got.1, 2);
    assert_eq!(got.0.bytes().unwrap()[..], [9; 24]);
    assert_eq!(s.stats.borrow().inplace_hits, 0);
}

#[test]
fn stale_in_place_copy_is_not_trusted() {
    let s = Setup::new(FabricConfig::default());
    let a = s.register(0, InnOutOptions::default());
    let b = s.register(1, InnOutOptions { inplace: false, ..InnOutOptions::default() });
    let got = s
        .fab
        .block_on(async move {
            a.clone().write(NodeId(0), val(3, 0, Flag::Verified, 1)).await;
            // larger value in the other slot, in-place copy left behind
            b.clone().write(NodeId(0), val(4, 1, Flag::Verified, 2)).await;
            a.read_resolved(NodeId(0)).await
        })
        .unwrap();
    assert_eq!(got.0.rank, val(4, 1, Flag::Verified, 2).rank);
    assert_eq!(got.0.bytes().unwrap()[..], [2; 24]);
    assert_eq!(got.1, 2);
}

#[test]
fn tombstone_dominates() {
    let s = Setup::new(FabricConfig::default());
    let r = s.register(0, InnOutOptions::default());
    let got = s
        .fab
        .block_on(async move {
            r.clone().write(NodeId(0), val(3, 0, Flag::Verified, 1)).await;
            r.clone().write(NodeId(0), MValue::tombstone()).await;
            r.clone().write(NodeId(0), val(5, 0, Flag::Verified, 1)).await;
            r.read(NodeId(0)).await
        })
        .unwrap();
    assert!(got.is_tombstone());
}

#[test]
fn reverification_reuses_the_buffer() {
    let s = Setup::new(FabricConfig::default());
    let r = s.register(0, InnOutOptions::default());
    let r2 = r.clone();
    s.fab
        .block_on(async move {
            r2.clone().write(NodeId(0), val(3, 0, Flag::Guessed, 1)).await;
            r2.write(NodeId(0), val(3, 0, Flag::Verified, 1)).await;
        })
        .unwrap();
    assert_eq!(s.stats.borrow().buffers_written, 1);
}

#[test]
fn exhausted_arena_is_reported() {
    let mut arena = OopArena::new(OopPool { per_client: 2, ..POOL }, ClientId(3));
    assert_eq!(arena.alloc(NodeId(0)), Ok(7));
    assert_eq!(arena.alloc(NodeId(0)), Ok(8));
    assert_eq!(arena.alloc(NodeId(0)), Err(InnOutError::ArenaExhausted { node: NodeId(0) }));
    assert_eq!(arena.alloc(NodeId(1)), Ok(7));
}

#[test]
fn emulated_max_converges_to_the_largest_input() {
    for seed in 0..50 {
        let fab = Fabric::new(FabricConfig { seed, ..FabricConfig::default() }).unwrap();
        let inputs = [pack_meta(5, 1), pack_meta(9, 2), pack_meta(7, 3), pack_meta(2, 4)];
        for (c, &w) in inputs.iter().enumerate() {
            let f = fab.clone();
            fab.spawn(async move {
                emulated_max(&f, ClientId(c as u8), NodeId(0), 64, w, 0).await;
            });
        }
        fab.run();
        assert_eq!(fab.peek_word(NodeId(0), 64), pack_meta(9, 2));
    }
}

#[derive(Clone, Debug)]
enum Step {
    Write(u32, bool),
    Read,
    Weak,
    Fused(u32),
}

fn arb_step() -> impl Strategy<Value = Step> {
    prop_oneof![
        (1u32..30, any::<bool>()).prop_map(|(c, v)| Step::Write(c, v)),
        Just(Step::Read),
        Just(Step::Weak),
        (1u32..30).prop_map(Step::Fused),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn replicated_innout_is_a_max_register(
        seed in any::<u64>(),
        crash in proptest::option::of((0u8..3, 0u64..300)),
        poison in any::<bool>(),
        scripts in proptest::collection::vec(proptest::collection::vec(arb_step(), 1..8), 2..4),
    ) {
        let mut cfg = FabricConfig { seed, ..FabricConfig::default() };
        if let Some((node, at)) = crash {
            cfg.faults.crashes = vec![CrashAt { at, node: NodeId(node) }];
        }
        let s = Setup::new(cfg);
        let opts = InnOutOptions { poison_inplace: poison, ..InnOutOptions::default() };
        let finished = Rc::new(core::cell::Cell::new(0usize));
        // every read must return the bytes written under its rank
        let bad = Rc::new(core::cell::Cell::new(0usize));
        let clients = scripts.len();
        for (c, script) in scripts.into_iter().enumerate() {
            let m = s.maxreg(c as u8, opts);
            let finished = finished.clone();
            let bad = bad.clone();
            s.fab.spawn(async move {
                for st in script {
                    let got = match st {
                        Step::Write(k, v) => {
                            let flag = if v { Flag::Verified } else { Flag::Guessed };
                            m.write(val(k, c as u8, flag, k as u8 ^ c as u8), 0).await;
                            None
                        }
                        Step::Fused(k) => {
                            m.write_and_weak_read(val(k, c as u8, Flag::Verified, k as u8 ^ c as u8), 0).await;
                            None
                        }
                        Step::Read => Some(m.read(0).await.value),
                        Step::Weak => Some(m.weak_read(0).await.value),
                    };
                    if let Some(v) = got.filter(|v| !v.is_bottom())
                        && let Some((v, _)) = m.resolve(v).await {
                            let ts = v.ts();
                            if v.bytes().unwrap()[..] != [ts.counter as u8 ^ ts.writer; 24] {
                                bad.set(bad.get() + 1);
                            }
                        }
                }
                finished.set(finished.get() + 1);
            });
        }
        s.fab.run();
        prop_assert_eq!(finished.get(), clients);
        prop_assert_eq!(bad.get(), 0);
        let trace = s.fab.trace();
        let ops = max_ops_from_trace(&trace);
        prop_assert!(check_max_register(&ops).is_empty(), "{:?}", check_max_register(&ops));
        prop_assert!(audit_trace(&trace).is_clean());
    }
}
