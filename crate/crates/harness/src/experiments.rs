//! Multi-run experiments: the randomized linearizability suite, the
//! metadata-slot sweep and the ABD comparison.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use swarm_core::safeguess::{Mutation, ParallelRead};

use crate::config::{CrashSpec, Delay, Scenario};
use crate::metrics::Metrics;
use crate::runner::{Protocol, RunError, RunOutput, run_scenario};
use crate::workload::{KeyDistribution, OpKind};

/// Brute-force bound of randomized scenarios; covers every history they produce.
pub const RANDOM_BOUND: usize = 80;

/// Small contended scenario drawn from `seed`: 3 to 5 clients over 1 to 3
/// keys with 20 to 40 operations per key, mixed clock skew, optional cold
/// caches, uneven node and client latencies, both quorum policies and, one
/// time in three, a node crash partway through. The write's parallel read
/// takes each of its three forms.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sc = Scenario { name: format!("random-{seed}"), ..Scenario::default() };
    let clients = rng.random_range(3..=5usize);
    let keys = rng.random_range(1..=3usize);
    let per_key = rng.random_range(20..=40usize);
    let w = &mut sc.workload;
    w.clients = clients;
    w.keys = keys;
    w.distribution = KeyDistribution::Uniform;
    // the preload insert counts towards each key's history
    w.ops_per_client = (keys * per_key - keys) / clients;
    w.read_fraction = rng.random_range(0.3..0.7);
    w.warm = rng.random_bool(0.5);
    w.think = Delay { base: 0, jitter: rng.random_range(0..40) };
    sc.clients.skew = (0..clients)
        .map(|_| match rng.random_bool(0.5) {
            true => 0,
            false => rng.random_range(-60..=60),
        })
        .collect();
    sc.fabric.delay.jitter = rng.random_range(0..=40);
    sc.store.majority_first = rng.random_bool(0.5);
    if rng.random_bool(0.5) {
        let slow = rng.random_range(0..sc.fabric.nodes);
        let d = Delay { base: rng.random_range(10..=80), jitter: rng.random_range(0..=80) };
        sc.fabric.node_delay.insert(slow.to_string(), d);
    }
    if rng.random_bool(0.5) {
        // writers on slow links against readers on fast ones
        let slow = rng.random_range(1..=2);
        for c in 0..clients {
            let f = match c < slow {
                true => {
                    let d = Delay { base: 0, jitter: rng.random_range(300..=1000) };
                    sc.clients.delay.insert(c.to_string(), d);
                    rng.random_range(0.0..0.2)
                }
                false => rng.random_range(0.8..=1.0),
            };
            sc.clients.read_fraction.insert(c.to_string(), f);
        }
    }
    if rng.random_bool(1.0 / 3.0) {
        let total = (clients * sc.workload.ops_per_client) as u64;
        sc.faults.crash.push(CrashSpec {
            node: rng.random_range(0..sc.fabric.nodes as u8),
            at: None,
            after_ops: Some(rng.random_range(0..total)),
        });
    }
    sc.store.parallel_read = [ParallelRead::Fused, ParallelRead::Separate, ParallelRead::Full][rng.random_range(0..3)];
    sc.check.bound = RANDOM_BOUND;
    sc.with_seed(seed)
}

/// Aggregate of many randomized runs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SuiteReport {
    pub runs: usize,
    pub histories: usize,
    pub brute_checked: usize,
    pub construction_checked: usize,
    /// Keys on which the two linearizability checkers disagreed.
    pub disagreements: usize,
    /// Keys rejected by brute force, or by the construction where brute
    /// force did not run.
    pub linearizability_violations: usize,
    /// Keys whose timestamp order was not a linearization.
    pub construction_rejections: usize,
    pub audit_violations: usize,
    pub max_register_violations: usize,
    pub runtime_bounds: usize,
    pub failed_ops: u64,
    pub liveness_lost: usize,
    pub longest_history: usize,
    /// Seeds of runs that were not clean.
    pub dirty_seeds: Vec<u64>,
}

impl SuiteReport {
    pub fn add(&mut self, seed: u64, run: &RunOutput) {
        self.runs += 1;
        if let Some(c) = &run.check {
            self.histories += c.keys;
            self.brute_checked += c.brute_checked;
            self.construction_checked += c.construction_checked;
            self.disagreements += c.disagreements.len();
            let by = |name: &str| -> BTreeSet<usize> {
                c.violations.iter().filter(|v| v.checker == name).map(|v| v.key).collect()
            };
            let built = by("construction");
            self.construction_rejections += built.len();
            let mut keys = by("bruteforce");
            keys.extend(built.into_iter().filter(|k| !c.disagreements.contains(k)));
            self.linearizability_violations += keys.len();
        }
        self.audit_violations += run.audit.as_ref().map_or(0, |a| a.violations.len());
        self.max_register_violations += run.max_register_violations;
        self.runtime_bounds += run.runtime_bounds;
        self.failed_ops += run.metrics.failed;
        self.liveness_lost += run.liveness_lost() as usize;
        let mut per_key = BTreeMap::<usize, usize>::new();
        for r in &run.records {
            *per_key.entry(r.key).or_default() += 1;
        }
        self.longest_history = self.longest_history.max(per_key.into_values().max().unwrap_or(0));
        if !run.is_clean() {
            self.dirty_seeds.push(seed);
        }
    }

    /// Violations found by the checkers or the trace audit. A construction
    /// rejection that brute force overrules is not counted.
    pub fn detected(&self) -> usize {
        self.linearizability_violations + self.audit_violations + self.max_register_violations
    }
}

/// Runs [`random_scenario`] for every seed with the given protocol mutation.
pub fn random_suite(seeds: impl IntoIterator<Item = u64>, mutation: Mutation) -> Result<SuiteReport, RunError> {
    let mut rep = SuiteReport::default();
    for seed in seeds {
        let mut sc = random_scenario(seed);
        sc.store.mutation = mutation;
        let run = run_scenario(&sc, Protocol::Swarm)?;
        rep.add(seed, &run);
    }
    Ok(rep)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub slots: usize,
    pub seeds: usize,
    pub updates: u64,
    pub one_roundtrip_updates: u64,
    pub clean_runs: usize,
    pub metrics: Metrics,
}

impl SweepPoint {
    pub fn one_roundtrip_fraction(&self) -> f64 {
        self.one_roundtrip_updates as f64 / self.updates.max(1) as f64
    }
}

/// Reruns `sc` with each slot count over `seeds`, aggregating per count.
pub fn sweep_buffers(sc: &Scenario, slots: &[usize], seeds: &[u64]) -> Result<Vec<SweepPoint>, RunError> {
    let mut out = Vec::new();
    for &k in slots {
        let mut point = SweepPoint {
            slots: k,
            seeds: seeds.len(),
            updates: 0,
            one_roundtrip_updates: 0,
            clean_runs: 0,
            metrics: Metrics::default(),
        };
        for &seed in seeds {
            let mut s = sc.with_seed(seed);
            s.store.slots = Some(k);
            let run = run_scenario(&s, Protocol::Swarm)?;
            let u = run.metrics.kind(OpKind::Update);
            point.updates += u.completed();
            point.one_roundtrip_updates += u.roundtrips.get(&1).copied().unwrap_or(0);
            point.clean_runs += run.is_clean() as usize;
            point.metrics.merge(&run.metrics);
        }
        out.push(point);
    }
    Ok(out)
}

pub struct Comparison {
    pub swarm: RunOutput,
    pub abd: RunOutput,
}

impl Comparison {
    pub fn medians(&self) -> (Option<u32>, Option<u32>) {
        (
            self.swarm.metrics.kind(OpKind::Update).median_roundtrips(),
            self.abd.metrics.kind(OpKind::Update).median_roundtrips(),
        )
    }

    pub fn report(&self) -> String {
        let (s, a) = self.medians();
        let su = self.swarm.metrics.kind(OpKind::Update);
        let au = self.abd.metrics.kind(OpKind::Update);
        let sg = self.swarm.metrics.kind(OpKind::Get);
        let ag = self.abd.metrics.kind(OpKind::Get);
        format!(
            "update roundtrips: swarm median {} (1-rt {:.2}%), abd median {} (2-rt {:.2}%)\n\
             get roundtrips:    swarm median {}, abd median {}\n",
            s.map_or("-".into(), |v| v.to_string()),
            100.0 * su.fraction_at(1),
            a.map_or("-".into(), |v| v.to_string()),
            100.0 * au.fraction_at(2),
            sg.median_roundtrips().map_or("-".into(), |v| v.to_string()),
            ag.median_roundtrips().map_or("-".into(), |v| v.to_string()),
        )
    }
}

/// Runs the same scenario once with each protocol.
pub fn compare_abd(sc: &Scenario) -> Result<Comparison, RunError> {
    Ok(Comparison { swarm: run_scenario(sc, Protocol::Swarm)?, abd: run_scenario(sc, Protocol::Abd)? })
}
