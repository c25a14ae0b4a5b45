use super::*;
use crate::checker::{check_max_register, max_ops_from_trace};
use crate::fabric::{CrashAt, FabricConfig};
use alloc::vec;
use proptest::prelude::*;

fn handle(fab: &Fabric, client: u8, opts: QuorumOptions) -> Rc<MaxRegister<WordRegister>> {
    let reg = Rc::new(WordRegister::new(fab.clone(), ClientId(client), 0));
    Rc::new(MaxRegister::new(fab.clone(), reg, ClientId(client), 1, vec![NodeId(0), NodeId(1), NodeId(2)], opts))
}

#[test]
fn write_then_read_needs_one_phase_each() {
    let fab = Fabric::new(FabricConfig::default()).unwrap();
    let m = handle(&fab, 0, QuorumOptions::default());
    let (w, r) = fab
        .block_on(async move {
            let w = m.write(7, 0).await;
            let r = m.read(0).await;
            (w, r)
        })
        .unwrap();
    assert_eq!(w.phases, 1);
    assert_eq!((r.value, r.phases, r.wrote_back), (7, 1, false));
}

#[test]
fn write_already_held_by_a_majority_is_free() {
    let fab = Fabric::new(FabricConfig::default()).unwrap();
    let m = handle(&fab, 0, QuorumOptions::default());
    let w = fab
        .block_on(async move {
            m.write(9, 0).await;
            m.write(5, 0).await
        })
        .unwrap();
    assert_eq!(w.phases, 0);
    assert_eq!(w.roundtrips, 0);
}

#[test]
fn read_of_a_minority_value_writes_it_back() {
    // node 0 answers first, so the first read's majority includes it
    let mut cfg = FabricConfig::default();
    cfg.node_delay.insert(0, crate::fabric::DelayModel::fixed(1));
    let fab = Fabric::new(cfg).unwrap();
    fab.poke(NodeId(0), 0, &11u64.to_le_bytes());
    let m = handle(&fab, 1, QuorumOptions { majority_first: false, widen_after: 200 });
    let (first, second) = fab
        .block_on(async move {
            let a = m.read(0).await;
            let b = m.read(0).await;
            (a, b)
        })
        .unwrap();
    fab.run();
    assert_eq!((first.value, first.phases, first.wrote_back), (11, 2, true));
    assert_eq!(second.value, 11);
    assert_eq!(second.phases, 1);
    let held = (0..3).filter(|&n| fab.peek_word(NodeId(n), 0) == 11).count();
    assert!(held >= 2);
}

#[test]
fn weak_read_never_writes_back() {
    let fab = Fabric::new(FabricConfig { seed: 5, ..FabricConfig::default() }).unwrap();
    fab.poke(NodeId(0), 0, &11u64.to_le_bytes());
    let m = handle(&fab, 1, QuorumOptions { majority_first: false, widen_after: 200 });
    let r = fab.block_on(async move { m.weak_read(0).await }).unwrap();
    fab.run();
    assert_eq!(r.phases, 1);
    assert_eq!(fab.peek_word(NodeId(1), 0), 0);
    assert_eq!(fab.peek_word(NodeId(2), 0), 0);
}

#[test]
fn majority_first_widens_around_a_crashed_node() {
    let mut cfg = FabricConfig::default();
    cfg.faults.crashes = vec![CrashAt { at: 0, node: NodeId(0) }];
    let fab = Fabric::new(cfg).unwrap();
    let m = handle(&fab, 0, QuorumOptions { majority_first: true, widen_after: 100 });
    let (w, r) = fab.block_on(async move { (m.write(3, 0).await, m.read(0).await) }).unwrap();
    assert!(w.widened);
    assert_eq!(w.phases, 1);
    assert_eq!(r.value, 3);
    assert!(r.widened);
}

#[derive(Clone, Debug)]
enum Step {
    Write(u64),
    Read,
    Weak,
    Pause(u64),
}

fn arb_step() -> impl Strategy<Value = Step> {
    prop_oneof![(1u64..50).prop_map(Step::Write), Just(Step::Read), Just(Step::Weak), (0u64..40).prop_map(Step::Pause),]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn concurrent_histories_keep_max_register_properties(
        seed in any::<u64>(),
        crash in proptest::option::of((0u8..3, 0u64..300)),
        majority_first in any::<bool>(),
        scripts in proptest::collection::vec(proptest::collection::vec(arb_step(), 1..12), 2..5),
    ) {
        let mut cfg = FabricConfig { seed, ..FabricConfig::default() };
        if let Some((node, at)) = crash {
            cfg.faults.crashes = vec![CrashAt { at, node: NodeId(node) }];
        }
        let fab = Fabric::new(cfg).unwrap();
        let finished = Rc::new(core::cell::Cell::new(0usize));
        let clients = scripts.len();
        for (c, script) in scripts.into_iter().enumerate() {
            let finished = finished.clone();
            let m = handle(&fab, c as u8, QuorumOptions { majority_first, widen_after: 120 });
            let f = fab.clone();
            fab.spawn(async move {
                for s in script {
                    match s {
                        Step::Write(v) => { m.write(v, 0).await; }
                        Step::Read => { m.read(0).await; }
                        Step::Weak => { m.weak_read(0).await; }
                        Step::Pause(t) => f.sleep(t).await,
                    }
                }
                finished.set(finished.get() + 1);
            });
        }
        fab.run();
        prop_assert_eq!(finished.get(), clients);
        let trace = fab.trace();
        let ops = max_ops_from_trace(&trace);
        prop_assert!(check_max_register(&ops).is_empty(), "{:?}", check_max_register(&ops));
        let audit = crate::checker::audit_trace(&trace);
        prop_assert!(audit.is_clean(), "{:?}", audit.violations);
    }
}
