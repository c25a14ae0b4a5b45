//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p swarm-harness --test acceptance`.

use std::cell::Cell;
use std::path::PathBuf;
use std::process::ExitCode;
use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swarm_core::checker::{AuditViolation, audit_trace, check_max_register, max_ops_from_trace};
use swarm_core::fabric::{ClientId, CrashAt, Fabric, FabricConfig, NodeId};
use swarm_core::maxreg::{MaxRegister, QuorumOptions, WordRegister};
use swarm_core::safeguess::Mutation;
use swarm_core::trace::{MaxRegKind, TraceEvent};
use swarm_core::tslock::{ExplorationSetup, LockMode, explore_exclusion, pack_cell};
use swarm_harness::config::Scenario;
use swarm_harness::experiments::{RANDOM_BOUND, SuiteReport, random_suite, sweep_buffers};
use swarm_harness::runner::{Protocol, RunOutput, run_scenario};
use swarm_harness::workload::OpKind;

/// Seeds of the randomized suite, shared by criteria 1 and 10.
const RANDOM_SEEDS: u64 = 1000;
/// Seeds of every multi-seed scenario criterion.
const SCENARIO_SEEDS: u64 = 10;
const MIN_UPDATE_ONE_RT: f64 = 0.99;
const MIN_STALE: f64 = 0.30;
const MAX_UPDATE_RT: u32 = 4;
const EXCLUSION_BUDGET: Duration = Duration::from_secs(60);
const MAXREG_CASES: u64 = 400;
const SLOTS: [usize; 5] = [1, 2, 4, 8, 16];

fn scenario(name: &str) -> Scenario {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "scenarios", &format!("{name}.toml")].iter().collect();
    Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn runs(name: &str, protocol: Protocol) -> Vec<RunOutput> {
    let sc = scenario(name);
    (0..SCENARIO_SEEDS).map(|s| run_scenario(&sc.with_seed(s), protocol).expect("scenario runs")).collect()
}

/// Bound events and bound-kind audit findings across every unmutated run.
#[derive(Default)]
struct BoundTally {
    runs: usize,
    read_loops: usize,
    fired: usize,
}

impl BoundTally {
    fn run(&mut self, r: &RunOutput) {
        self.runs += 1;
        self.fired += r.runtime_bounds;
        if let Some(a) = &r.audit {
            self.read_loops += a.read_loops_checked;
            self.fired += a.violations.iter().filter(|v| is_bound(v)).count();
        }
    }

    fn suite(&mut self, s: &SuiteReport) {
        self.runs += s.runs;
        // a bound violation is also an audit violation
        self.fired += s.runtime_bounds + s.audit_violations;
    }
}

fn is_bound(v: &AuditViolation) -> bool {
    matches!(
        v,
        AuditViolation::ReadIterations { .. }
            | AuditViolation::MaxRegPhases { .. }
            | AuditViolation::CasPerCell { .. }
            | AuditViolation::Runtime { .. }
    )
}

struct Gate {
    failed: usize,
}

impl Gate {
    fn report(&mut self, n: u32, name: &str, ok: bool, detail: String) {
        self.failed += !ok as usize;
        println!("{} criterion {n:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn linearizability(gate: &mut Gate, tally: &mut BoundTally) {
    let t = Instant::now();
    let r = random_suite(0..RANDOM_SEEDS, Mutation::None).expect("suite runs");
    tally.suite(&r);
    let ok = r.runs as u64 >= RANDOM_SEEDS
        && r.dirty_seeds.is_empty()
        && r.linearizability_violations == 0
        && r.construction_rejections == 0
        && r.disagreements == 0
        && r.brute_checked == r.histories
        && r.construction_checked == r.histories
        && r.longest_history <= RANDOM_BOUND;
    gate.report(
        1,
        "randomized linearizability",
        ok,
        format!(
            "{} runs, {} histories (longest {}), brute force {} / construction {} checked, {} violations, {} disagreements, {} dirty runs, {:.1}s",
            r.runs,
            r.histories,
            r.longest_history,
            r.brute_checked,
            r.construction_checked,
            r.linearizability_violations + r.construction_rejections,
            r.disagreements,
            r.dirty_seeds.len(),
            t.elapsed().as_secs_f64()
        ),
    );
}

fn common_case(gate: &mut Gate, tally: &mut BoundTally) {
    let swarm = runs("ycsb_b", Protocol::Swarm);
    let (mut g, mut g1, mut u, mut u1, mut clean) = (0, 0, 0, 0, true);
    for r in &swarm {
        tally.run(r);
        let (gm, um) = (r.metrics.kind(OpKind::Get), r.metrics.kind(OpKind::Update));
        g += gm.completed();
        g1 += gm.roundtrips.get(&1).copied().unwrap_or(0);
        u += um.completed();
        u1 += um.roundtrips.get(&1).copied().unwrap_or(0);
        clean &= r.is_clean();
    }
    let abd = runs("ycsb_b", Protocol::Abd);
    let mut abd_writes = 0;
    let mut abd_exact = true;
    for r in &abd {
        let um = r.metrics.kind(OpKind::Update);
        abd_writes += um.completed();
        abd_exact &= um.roundtrips.keys().all(|&k| k == 2) && um.failed == 0;
        clean &= r.is_clean();
    }
    let uf = u1 as f64 / u.max(1) as f64;
    let ok = g > 0 && g1 == g && u > 0 && uf >= MIN_UPDATE_ONE_RT && abd_writes > 0 && abd_exact && clean;
    gate.report(
        2,
        "common-case roundtrips",
        ok,
        format!(
            "gets {g1}/{g} at 1 rt, updates {u1}/{u} = {:.4} at 1 rt (need >= {MIN_UPDATE_ONE_RT}), abd writes {abd_writes} all at 2 rt: {abd_exact}, {} seeds clean: {clean}",
            uf, SCENARIO_SEEDS
        ),
    );
}

fn lock_exclusion(gate: &mut Gate) {
    let t = Instant::now();
    let older = vec![pack_cell(6, LockMode::Write), pack_cell(5, LockMode::Read), 0];
    let same = vec![pack_cell(7, LockMode::Read), 0, 0];
    let starts = [
        (vec![0; 3], vec![0; 3], vec![0; 3]),
        (older.clone(), vec![0; 3], older.clone()),
        (older.clone(), older.clone(), vec![0; 3]),
        (older.clone(), older.clone(), older.clone()),
        (same.clone(), same.clone(), vec![0; 3]),
    ];
    let (mut states, mut doubles, mut unjustified, mut explorations) = (0, 0, 0, 0);
    for (cells, read_cache, write_cache) in starts {
        for crashes in [false, true] {
            let rep = explore_exclusion(&ExplorationSetup {
                ts: 7,
                cells: cells.clone(),
                read_cache: read_cache.clone(),
                write_cache: write_cache.clone(),
                crashes,
            });
            explorations += 1;
            states += rep.states;
            doubles += rep.double_grants;
            unjustified += rep.unjustified;
        }
    }
    let took = t.elapsed();
    let ok = states > 0 && doubles == 0 && unjustified == 0 && took < EXCLUSION_BUDGET;
    gate.report(
        3,
        "timestamp lock exclusion",
        ok,
        format!(
            "{explorations} explorations over 3 cells, {states} states, {doubles} double grants, {unjustified} unjustified failures, {:.2}s",
            took.as_secs_f64()
        ),
    );
}

fn max_register(gate: &mut Gate, tally: &mut BoundTally) {
    let (mut calls, mut prop, mut phase_bad, mut audit_bad, mut unfinished) = (0, 0, 0, 0, 0);
    for case in 0..MAXREG_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let mut cfg = FabricConfig { seed: case, ..FabricConfig::default() };
        if rng.random_bool(0.4) {
            cfg.faults.crashes = vec![CrashAt { at: rng.random_range(0..300), node: NodeId(rng.random_range(0..3)) }];
        }
        let fab = Fabric::new(cfg).expect("fabric");
        let opts = QuorumOptions { majority_first: rng.random_bool(0.5), widen_after: 120 };
        let clients = rng.random_range(2..=4u8);
        let done = Rc::new(Cell::new(0u8));
        for c in 0..clients {
            let reg = Rc::new(WordRegister::new(fab.clone(), ClientId(c), 0));
            let m = MaxRegister::new(fab.clone(), reg, ClientId(c), 1, vec![NodeId(0), NodeId(1), NodeId(2)], opts);
            let steps: Vec<(u8, u64)> =
                (0..rng.random_range(1..16)).map(|_| (rng.random_range(0..4), rng.random_range(1..40))).collect();
            let (f, done) = (fab.clone(), done.clone());
            fab.spawn(async move {
                for (kind, x) in steps {
                    match kind {
                        0 => {
                            m.write(x << 8 | c as u64, 0).await;
                        }
                        1 => {
                            m.read(0).await;
                        }
                        2 => {
                            m.weak_read(0).await;
                        }
                        _ => f.sleep(x).await,
                    }
                }
                done.set(done.get() + 1);
            });
        }
        fab.run();
        unfinished += (done.get() != clients) as usize;
        let trace = fab.trace();
        prop += check_max_register(&max_ops_from_trace(&trace)).len();
        for r in &trace {
            match &r.event {
                TraceEvent::MaxReg(m) => {
                    calls += 1;
                    let ok = match m.kind {
                        MaxRegKind::Write => m.phases <= 1,
                        MaxRegKind::Read => (1..=2).contains(&m.phases),
                        MaxRegKind::WeakRead => m.phases == 1,
                    };
                    phase_bad += !ok as usize;
                }
                TraceEvent::Bound { .. } => tally.fired += 1,
                _ => {}
            }
        }
        audit_bad += audit_trace(&trace).violations.len();
        tally.runs += 1;
    }
    let ok = calls > 0 && prop == 0 && phase_bad == 0 && audit_bad == 0 && unfinished == 0;
    gate.report(
        4,
        "max register properties",
        ok,
        format!(
            "{MAXREG_CASES} random histories, {calls} calls, {prop} property violations, {phase_bad} calls outside their roundtrip range, {audit_bad} audit findings, {unfinished} stuck"
        ),
    );
}

fn node_failure(gate: &mut Gate, tally: &mut BoundTally) {
    let out = runs("node_failure", Protocol::Swarm);
    let (mut ops, mut failed, mut post, mut post_done, mut crashed, mut clean) = (0, 0, 0, 0, 0, true);
    for r in &out {
        tally.run(r);
        ops += r.metrics.ops;
        failed += r.metrics.failed;
        clean &= r.is_clean();
        if let Some(&(_, at)) = r.crashes.first() {
            crashed += 1;
            for h in r.measured().filter(|h| h.invoke >= at) {
                post += 1;
                post_done += (h.response.is_some() && !h.failed()) as usize;
            }
        }
    }
    let ok = crashed == out.len() && failed == 0 && post > 0 && post_done == post && clean;
    gate.report(
        6,
        "node-failure availability",
        ok,
        format!(
            "{} runs with a crashed node: {crashed}, {ops} ops, {failed} failed, {post_done}/{post} post-crash ops completed, all clean: {clean}",
            out.len()
        ),
    );
}

fn stale_guess(gate: &mut Gate, tally: &mut BoundTally) {
    let out = runs("stale_guess", Protocol::Swarm);
    let (mut min_stale, mut slow, mut clean) = (f64::MAX, 0, true);
    for r in &out {
        tally.run(r);
        min_stale = min_stale.min(r.metrics.stale_fraction(0));
        slow += r.metrics.trylock_granted + r.metrics.trylock_denied;
        clean &= r.is_clean();
    }
    let ok = min_stale >= MIN_STALE && slow > 0 && clean;
    gate.report(
        7,
        "stale-guess correctness",
        ok,
        format!(
            "lowest stale fraction of the skewed writer {:.3} (need >= {MIN_STALE}), {slow} slow-path operations, {} seeds clean: {clean}",
            min_stale, SCENARIO_SEEDS
        ),
    );
}

fn contention(gate: &mut Gate, tally: &mut BoundTally) {
    let out = runs("hot_key", Protocol::Swarm);
    let (mut worst_update, mut worst_iter, mut bound, mut updates, mut gets, mut clean) = (0, 0, 0, 0, 0, true);
    for r in &out {
        tally.run(r);
        let um = r.metrics.kind(OpKind::Update);
        updates += um.completed();
        gets += r.metrics.kind(OpKind::Get).completed();
        worst_update = worst_update.max(um.max_roundtrips().unwrap_or(0));
        worst_iter = worst_iter.max(r.metrics.read_iterations.keys().next_back().copied().unwrap_or(0));
        bound = 2 * r.clients as u32 + 1;
        clean &= r.is_clean() && um.failed == 0;
    }
    let ok = updates > 0 && gets > 0 && worst_update <= MAX_UPDATE_RT && worst_iter <= bound && clean;
    gate.report(
        8,
        "contention bounds",
        ok,
        format!(
            "{updates} updates, worst {worst_update} rt (need <= {MAX_UPDATE_RT}), {gets} gets, worst {worst_iter} read-loop iterations (bound {bound}), {} seeds clean: {clean}",
            SCENARIO_SEEDS
        ),
    );
}

fn buffer_sweep(gate: &mut Gate, tally: &mut BoundTally) {
    let sc = scenario("hot_key");
    let seeds: Vec<u64> = (0..SCENARIO_SEEDS).collect();
    let points = sweep_buffers(&sc, &SLOTS, &seeds).expect("sweep runs");
    tally.runs += points.iter().map(|p| p.seeds).sum::<usize>();
    let fractions: Vec<f64> = points.iter().map(|p| p.one_roundtrip_fraction()).collect();
    let monotone = fractions.windows(2).all(|w| w[1] >= w[0]);
    let per_writer =
        points.iter().find(|p| p.slots == sc.workload.clients).map(|p| p.one_roundtrip_fraction()).unwrap_or(0.0);
    let clean = points.iter().all(|p| p.clean_runs == p.seeds);
    let ok = monotone && per_writer >= MIN_UPDATE_ONE_RT && clean;
    let listing: Vec<String> = points.iter().zip(&fractions).map(|(p, f)| format!("k={}: {f:.4}", p.slots)).collect();
    gate.report(
        9,
        "buffer sweep",
        ok,
        format!(
            "{} over {} seeds, nondecreasing: {monotone}, one slot per writer {per_writer:.4} (need >= {MIN_UPDATE_ONE_RT}), clean: {clean}",
            listing.join(", "),
            SCENARIO_SEEDS
        ),
    );
}

fn wait_freedom(gate: &mut Gate, tally: &BoundTally) {
    gate.report(
        5,
        "wait-freedom bounds",
        tally.runs > 0 && tally.fired == 0,
        format!(
            "{} bound events over {} unmutated runs ({} read loops audited individually)",
            tally.fired, tally.runs, tally.read_loops
        ),
    );
}

fn mutation_sensitivity(gate: &mut Gate) {
    let mut ok = true;
    let mut parts = Vec::new();
    for m in [Mutation::SkipReaderTrylock, Mutation::WriterIgnoresTrylock, Mutation::ReadLoopWeakRead] {
        let r = random_suite(0..RANDOM_SEEDS, m).expect("suite runs");
        ok &= r.detected() >= 1;
        parts.push(format!(
            "{m:?}: {} detected ({} linearizability, {} audit, {} max register) in {} runs",
            r.detected(),
            r.linearizability_violations,
            r.audit_violations,
            r.max_register_violations,
            r.dirty_seeds.len()
        ));
    }
    gate.report(10, "mutation sensitivity", ok, parts.join("; "));
}

fn main() -> ExitCode {
    let t = Instant::now();
    let mut gate = Gate { failed: 0 };
    let mut tally = BoundTally::default();
    linearizability(&mut gate, &mut tally);
    common_case(&mut gate, &mut tally);
    lock_exclusion(&mut gate);
    max_register(&mut gate, &mut tally);
    node_failure(&mut gate, &mut tally);
    stale_guess(&mut gate, &mut tally);
    contention(&mut gate, &mut tally);
    buffer_sweep(&mut gate, &mut tally);
    wait_freedom(&mut gate, &tally);
    mutation_sensitivity(&mut gate);
    println!("acceptance: {} of 10 criteria failed, {:.1}s", gate.failed, t.elapsed().as_secs_f64());
    match gate.failed {
        0 => ExitCode::SUCCESS,
        _ => ExitCode::FAILURE,
    }
}
