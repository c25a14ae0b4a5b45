use super::*;
use crate::checker::audit_trace;
use crate::fabric::{CrashAt, FabricConfig};
use alloc::vec;

fn lock(fab: &Fabric, client: u8) -> TimestampLock {
    let cells = (0..3).map(|n| (NodeId(n), 64)).collect();
    TimestampLock::new(fab.clone(), ClientId(client), 1, 0, cells, QuorumOptions::default())
}

#[test]
fn uncontended_lock_takes_one_phase_then_none() {
    let fab = Fabric::new(FabricConfig::default()).unwrap();
    let l = lock(&fab, 0);
    let (a, b) = fab
        .block_on(async move { (l.trylock(5, LockMode::Write).await, l.trylock(5, LockMode::Write).await) })
        .unwrap();
    assert!(a.granted && b.granted);
    assert_eq!((a.phases, b.phases), (1, 0));
}

#[test]
fn same_timestamp_other_mode_fails_afterwards() {
    let fab = Fabric::new(FabricConfig::default()).unwrap();
    let w = lock(&fab, 0);
    let r = lock(&fab, 1);
    let (a, b) =
        fab.block_on(async move { (w.trylock(5, LockMode::Write).await, r.trylock(5, LockMode::Read).await) }).unwrap();
    assert!(a.granted);
    assert!(!b.granted);
    assert!(audit_trace(&fab.trace()).is_clean());
}

#[test]
fn larger_timestamp_blocks_smaller_one() {
    let fab = Fabric::new(FabricConfig::default()).unwrap();
    for n in 0..3 {
        fab.poke(NodeId(n), 64, &pack_cell(9, LockMode::Read).to_le_bytes());
    }
    let l = lock(&fab, 0);
    let r = fab.block_on(async move { l.trylock(5, LockMode::Write).await }).unwrap();
    assert!(!r.granted);
    assert_eq!(r.max_cell_cas, 1);
}

#[test]
fn stale_cache_costs_an_extra_cas_round() {
    let fab = Fabric::new(FabricConfig::default()).unwrap();
    for n in 0..3 {
        fab.poke(NodeId(n), 64, &pack_cell(3, LockMode::Read).to_le_bytes());
    }
    let l = lock(&fab, 0);
    let r = fab.block_on(async move { l.trylock(5, LockMode::Write).await }).unwrap();
    assert!(r.granted);
    assert_eq!(r.phases, 2);
}

#[test]
fn cell_attempt_stops_at_equal_or_larger_timestamp() {
    let mut a = CellAttempt::new(4, LockMode::Read, 0);
    assert_eq!(a.next_cas(), Some((0, pack_cell(4, LockMode::Read))));
    a.on_prev(pack_cell(2, LockMode::Write));
    assert_eq!(a.next_cas(), Some((pack_cell(2, LockMode::Write), pack_cell(4, LockMode::Read))));
    a.on_prev(pack_cell(4, LockMode::Write));
    assert!(a.is_done());
    assert_eq!(a.cas_issued(), 2);
    assert!(!decide(4, LockMode::Read, [a.observed()]));
}

#[test]
fn exhaustive_exclusion_from_empty_cells() {
    let rep = explore_exclusion(&ExplorationSetup {
        ts: 7,
        cells: vec![0; 3],
        read_cache: vec![0; 3],
        write_cache: vec![0; 3],
        crashes: true,
    });
    assert!(rep.states > 1000, "{rep:?}");
    assert!(rep.decisions > 0);
    assert_eq!(rep.double_grants, 0);
    assert_eq!(rep.unjustified, 0);
}

#[test]
fn exhaustive_exclusion_from_older_cells_and_stale_caches() {
    let older = vec![pack_cell(6, LockMode::Write), pack_cell(5, LockMode::Read), 0];
    for (rc, wc) in [(vec![0; 3], older.clone()), (older.clone(), vec![0; 3]), (older.clone(), older.clone())] {
        let rep = explore_exclusion(&ExplorationSetup {
            ts: 7,
            cells: older.clone(),
            read_cache: rc,
            write_cache: wc,
            crashes: true,
        });
        assert_eq!(rep.double_grants, 0);
        assert_eq!(rep.unjustified, 0);
    }
}

#[test]
fn concurrent_lockers_never_both_win() {
    for seed in 0..200u64 {
        let mut cfg = FabricConfig { seed, ..FabricConfig::default() };
        if seed % 3 == 0 {
            cfg.faults.crashes = vec![CrashAt { at: seed % 40, node: NodeId((seed % 3) as u8) }];
        }
        let fab = Fabric::new(cfg).unwrap();
        let results = Rc::new(RefCell::new(Vec::new()));
        for (c, mode) in [(0u8, LockMode::Write), (1, LockMode::Read), (2, LockMode::Read)] {
            let l = lock(&fab, c);
            let res = results.clone();
            let f = fab.clone();
            fab.spawn(async move {
                f.sleep(seed % 7 * c as u64).await;
                let r = l.trylock(11, mode).await;
                res.borrow_mut().push((mode, r.granted));
            });
        }
        fab.run();
        let res = results.borrow();
        assert_eq!(res.len(), 3);
        let w = res.iter().any(|(m, g)| *m == LockMode::Write && *g);
        let r = res.iter().any(|(m, g)| *m == LockMode::Read && *g);
        assert!(!(w && r), "seed {seed}: {res:?}");
        let audit = audit_trace(&fab.trace());
        assert!(audit.is_clean(), "{:?}", audit.violations);
    }
}
