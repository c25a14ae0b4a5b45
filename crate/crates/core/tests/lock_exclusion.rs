//! Exhaustive lock exploration from arbitrary starting cells.

use proptest::prelude::*;
use swarm_core::tslock::{ExplorationSetup, LockMode, explore_exclusion, pack_cell};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn two_modes_never_both_acquire(
        ts in 2u64..9,
        raw in proptest::collection::vec((any::<u64>(), any::<bool>(), any::<bool>()), 3),
        crashes in any::<bool>(),
    ) {
        // cells hold older timestamps; a cache is either cold or current
        let cells: Vec<u64> = raw.iter().map(|&(x, w, _)| match x % 3 {
            0 => 0,
            _ => pack_cell(1 + x % (ts - 1), if w { LockMode::Write } else { LockMode::Read }),
        }).collect();
        let read_cache: Vec<u64> = cells.iter().zip(&raw).map(|(&c, r)| if r.2 { c } else { 0 }).collect();
        let rep = explore_exclusion(&ExplorationSetup {
            ts,
            cells: cells.clone(),
            read_cache,
            write_cache: cells,
            crashes,
        });
        prop_assert!(rep.decisions > 0);
        prop_assert_eq!(rep.double_grants, 0);
        prop_assert_eq!(rep.unjustified, 0);
    }

    #[test]
    fn a_newer_cell_blocks_both_modes(ts in 2u64..9, newer in 1u64..5, crashes in any::<bool>()) {
        let high = pack_cell(ts + newer, LockMode::Read);
        let rep = explore_exclusion(&ExplorationSetup {
            ts,
            cells: vec![high, high, high],
            read_cache: vec![high; 3],
            write_cache: vec![high; 3],
            crashes,
        });
        prop_assert_eq!(rep.double_grants, 0);
        prop_assert_eq!(rep.unjustified, 0);
    }
}

#[test]
fn cell_packing_orders_by_timestamp_then_mode() {
    assert!(pack_cell(4, LockMode::Read) > pack_cell(3, LockMode::Write));
    assert_ne!(pack_cell(4, LockMode::Read), pack_cell(4, LockMode::Write));
}
