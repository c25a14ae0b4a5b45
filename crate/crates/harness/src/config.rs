//! Scenario files.
//!
//! A scenario is a TOML document with the sections `[fabric]`, `[store]`,
//! `[workload]`, `[clients]`, `[faults]` and `[check]`. Every field has a
//! default, so an empty file is a valid scenario. Errors carry the line they
//! refer to when one can be found.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use swarm_core::fabric::{CrashAt, DelayModel, FabricConfig, FaultSchedule, NodeId, SlowdownAt, Tick};
use swarm_core::kvstore::KvConfig;
use swarm_core::maxreg::QuorumOptions;
use swarm_core::safeguess::{Mutation, ParallelRead, Resync, SafeGuessOptions};
use swarm_core::trace::TraceLevel;

use crate::workload::WorkloadSpec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Delay {
    pub base: Tick,
    #[serde(default)]
    pub jitter: Tick,
}

impl From<Delay> for DelayModel {
    fn from(d: Delay) -> Self {
        DelayModel { base: d.base, jitter: d.jitter }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub name: String,
    pub fabric: FabricSection,
    pub store: StoreSection,
    pub workload: WorkloadSpec,
    pub clients: ClientsSection,
    pub faults: FaultsSection,
    pub check: CheckSection,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            fabric: FabricSection::default(),
            store: StoreSection::default(),
            workload: WorkloadSpec::default(),
            clients: ClientsSection::default(),
            faults: FaultsSection::default(),
            check: CheckSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FabricSection {
    pub nodes: usize,
    pub f: usize,
    pub seed: u64,
    pub delay: Delay,
    pub service_delay: Delay,
    /// Per-node overrides, keyed by node id.
    pub node_delay: BTreeMap<String, Delay>,
    pub read_word_ticks: Tick,
    pub write_word_ticks: Tick,
    pub trace: TraceLevel,
}

impl Default for FabricSection {
    fn default() -> Self {
        let d = FabricConfig::default();
        FabricSection {
            nodes: d.nodes,
            f: d.f,
            seed: d.seed,
            delay: Delay { base: d.delay.base, jitter: d.delay.jitter },
            service_delay: Delay { base: d.service_delay.base, jitter: d.service_delay.jitter },
            node_delay: BTreeMap::new(),
            read_word_ticks: d.read_word_ticks,
            write_word_ticks: d.write_word_ticks,
            trace: d.trace,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreSection {
    pub replication: usize,
    /// Metadata slots per key; defaults to one per client.
    pub slots: Option<usize>,
    pub value_capacity: usize,
    pub inplace: bool,
    pub poison_inplace: bool,
    pub cache_capacity: usize,
    pub regions_per_client: u32,
    pub buffers_per_client: u32,
    pub resync: Resync,
    pub parallel_read: ParallelRead,
    pub mutation: Mutation,
    pub majority_first: bool,
    pub widen_after: Tick,
    pub iteration_cap: u32,
    pub fetch_timeout: Tick,
}

impl Default for StoreSection {
    fn default() -> Self {
        let kv = KvConfig::default();
        StoreSection {
            replication: kv.replication,
            slots: None,
            value_capacity: kv.value_capacity,
            inplace: kv.inplace,
            poison_inplace: kv.poison_inplace,
            cache_capacity: kv.cache_capacity,
            regions_per_client: kv.regions_per_client,
            buffers_per_client: kv.buffers_per_client,
            resync: kv.resync,
            parallel_read: kv.register.parallel_read,
            mutation: kv.register.mutation,
            majority_first: kv.register.quorum.majority_first,
            widen_after: kv.register.quorum.widen_after,
            iteration_cap: kv.register.iteration_cap,
            fetch_timeout: kv.fetch_timeout,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsSection {
    /// Clock skew of clients without an entry in `skew`.
    pub default_skew: i64,
    /// Clock skew per client id.
    pub skew: Vec<i64>,
    /// Extra one-way delay of a client's messages, keyed by client id.
    pub delay: BTreeMap<String, Delay>,
    /// Per-client override of `workload.read_fraction`, keyed by client id.
    pub read_fraction: BTreeMap<String, f64>,
}

impl ClientsSection {
    pub fn skew_of(&self, client: usize) -> i64 {
        self.skew.get(client).copied().unwrap_or(self.default_skew)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultsSection {
    pub crash: Vec<CrashSpec>,
    pub slowdown: Vec<SlowdownSpec>,
}

/// Crash a node at a tick, or once a number of measured operations finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub node: u8,
    pub at: Option<Tick>,
    pub after_ops: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowdownSpec {
    pub node: u8,
    pub at: Tick,
    pub extra: Tick,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    pub enabled: bool,
    /// Largest per-key history handed to the brute-force checker.
    pub bound: usize,
    pub audit: bool,
    pub max_register: bool,
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection { enabled: true, bound: swarm_core::checker::DEFAULT_BOUND, audit: true, max_register: true }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { line: None, message: format!("cannot read {}: {e}", path.display()) })?;
        Scenario::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Scenario, ConfigError> {
        let sc: Scenario = toml::from_str(text).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        sc.validate().map_err(|(path, message)| ConfigError {
            line: locate(text, &path),
            message: format!("{path}: {message}"),
        })?;
        Ok(sc)
    }

    /// Checks cross-field constraints; errors name the offending key path.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |p: &str, m: String| Err((p.to_string(), m));
        if let Err((p, m)) = self.workload.validate() {
            return err(&format!("workload.{p}"), m);
        }
        let clients = self.workload.clients;
        if self.clients.skew.len() > clients {
            return err("clients.skew", format!("{} entries for {clients} clients", self.clients.skew.len()));
        }
        if self.workload.value_size > self.store.value_capacity {
            return err("workload.value_size", format!("exceeds store.value_capacity {}", self.store.value_capacity));
        }
        if self.store.slots == Some(0) {
            return err("store.slots", "must be at least 1".into());
        }
        if self.store.replication == 0 || self.store.replication > self.fabric.nodes {
            return err("store.replication", format!("must be in 1..={} (the node count)", self.fabric.nodes));
        }
        for k in self.fabric.node_delay.keys() {
            match k.parse::<u8>() {
                Ok(n) if (n as usize) < self.fabric.nodes => {}
                _ => return err("fabric.node_delay", format!("unknown node {k:?}")),
            }
        }
        for (table, ids) in [
            ("clients.delay", self.clients.delay.keys().collect::<Vec<_>>()),
            ("clients.read_fraction", self.clients.read_fraction.keys().collect()),
        ] {
            for k in ids {
                match k.parse::<usize>() {
                    Ok(c) if c < clients => {}
                    _ => return err(&format!("{table}.{k}"), format!("unknown client {k:?}")),
                }
            }
        }
        for c in 0..clients {
            if let Err((p, m)) = self.workload_of(c).validate() {
                return err(&format!("clients.{p}.{c}"), m);
            }
        }
        for c in &self.faults.crash {
            if c.at.is_some() == c.after_ops.is_some() {
                return err(
                    "faults.crash",
                    format!("crash of node {} needs exactly one of `at` and `after_ops`", c.node),
                );
            }
        }
        if let Err(e) = self.fabric_config().validate() {
            let path = match e {
                swarm_core::fabric::FabricError::MajorityCrash { .. }
                | swarm_core::fabric::FabricError::UnknownNode(_) => "faults.crash",
                _ => "fabric.nodes",
            };
            return err(path, e.to_string());
        }
        let mut nodes: Vec<u8> = self.faults.crash.iter().map(|c| c.node).collect();
        nodes.sort();
        nodes.dedup();
        if let Some(n) = nodes.iter().find(|&&n| n as usize >= self.fabric.nodes) {
            return err("faults.crash", format!("unknown node {n}"));
        }
        if nodes.len() > self.fabric.f {
            return err(
                "faults.crash",
                format!("{} crashed nodes leave no majority with f = {}", nodes.len(), self.fabric.f),
            );
        }
        Ok(())
    }

    /// Fabric configuration; operation-count crashes are applied by the runner.
    pub fn fabric_config(&self) -> FabricConfig {
        let fs = &self.fabric;
        FabricConfig {
            nodes: fs.nodes,
            f: fs.f,
            delay: fs.delay.into(),
            node_delay: fs
                .node_delay
                .iter()
                .filter_map(|(k, d)| Some((k.parse().ok()?, DelayModel::from(*d))))
                .collect(),
            client_delay: self
                .clients
                .delay
                .iter()
                .filter_map(|(k, d)| Some((k.parse().ok()?, DelayModel::from(*d))))
                .collect(),
            service_delay: fs.service_delay.into(),
            read_word_ticks: fs.read_word_ticks,
            write_word_ticks: fs.write_word_ticks,
            seed: fs.seed,
            faults: FaultSchedule {
                crashes: self
                    .faults
                    .crash
                    .iter()
                    .filter_map(|c| Some(CrashAt { at: c.at?, node: NodeId(c.node) }))
                    .collect(),
                slowdowns: self
                    .faults
                    .slowdown
                    .iter()
                    .map(|s| SlowdownAt { at: s.at, node: NodeId(s.node), extra: s.extra })
                    .collect(),
            },
            trace: fs.trace,
            ..FabricConfig::default()
        }
    }

    pub fn kv_config(&self) -> KvConfig {
        let s = &self.store;
        let writers = self.workload.clients as u32;
        KvConfig {
            replication: s.replication,
            writers,
            slots: s.slots.unwrap_or(writers as usize),
            value_capacity: s.value_capacity,
            inplace: s.inplace,
            poison_inplace: s.poison_inplace,
            register: SafeGuessOptions {
                quorum: QuorumOptions { majority_first: s.majority_first, widen_after: s.widen_after },
                parallel_read: s.parallel_read,
                mutation: s.mutation,
                iteration_cap: s.iteration_cap,
            },
            cache_capacity: s.cache_capacity,
            regions_per_client: s.regions_per_client,
            buffers_per_client: s.buffers_per_client,
            resync: s.resync,
            fetch_timeout: s.fetch_timeout,
        }
    }

    /// Workload of one client, with its overrides applied.
    pub fn workload_of(&self, client: usize) -> WorkloadSpec {
        let mut w = self.workload.clone();
        if let Some(&f) = self.clients.read_fraction.get(&client.to_string()) {
            w.read_fraction = f;
        }
        w
    }

    /// Same scenario with every seed replaced.
    pub fn with_seed(&self, seed: u64) -> Scenario {
        let mut sc = self.clone();
        sc.fabric.seed = seed;
        sc.workload.seed = Some(seed);
        sc
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of a dotted key path such as `workload.read_fraction`, falling back
/// to the line of its table header.
fn locate(text: &str, path: &str) -> Option<usize> {
    let (table, key) = match path.rsplit_once('.') {
        Some((t, k)) => (t, k),
        None => (path, ""),
    };
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == path || current == table {
                header.get_or_insert(i + 1);
            }
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        let full = match current.is_empty() {
            true => k.to_string(),
            false => format!("{current}.{k}"),
        };
        if full == path || (current == table && k == key) {
            return Some(i + 1);
        }
    }
    header
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_scenario() {
        assert_eq!(Scenario::parse("").unwrap(), Scenario::default());
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = Scenario::parse("[workload]\nclients = 4\nread_fraction = = 3\n").unwrap_err();
        assert_eq!(e.line, Some(3), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_line() {
        let e = Scenario::parse("name = \"x\"\n\n[store]\nreplicas = 3\n").unwrap_err();
        assert_eq!(e.line, Some(4), "{e}");
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let e = Scenario::parse("[workload]\nclients = 4\n\nread_fraction = 1.5\n").unwrap_err();
        assert_eq!(e.line, Some(4), "{e}");
        assert!(e.message.contains("read_fraction"));
    }

    #[test]
    fn client_delays_name_existing_clients() {
        let e = Scenario::parse("[workload]\nclients = 2\n\n[clients.delay]\n2 = { base = 5 }\n").unwrap_err();
        assert_eq!(e.line, Some(5), "{e}");
    }

    #[test]
    fn read_fraction_overrides_apply_per_client() {
        let sc = Scenario::parse("[workload]\nclients = 3\nread_fraction = 0.5\n\n[clients.read_fraction]\n1 = 0.9\n")
            .unwrap();
        assert_eq!(sc.workload_of(0).read_fraction, 0.5);
        assert_eq!(sc.workload_of(1).read_fraction, 0.9);
        let e = Scenario::parse("[clients.read_fraction]\n0 = 1.5\n").unwrap_err();
        assert_eq!(e.line, Some(2), "{e}");
    }

    #[test]
    fn majority_crash_schedules_are_rejected() {
        let text = "[fabric]\nnodes = 3\nf = 1\n\n[[faults.crash]]\nnode = 0\nat = 5\n\n[[faults.crash]]\nnode = 1\nafter_ops = 10\n";
        let e = Scenario::parse(text).unwrap_err();
        assert_eq!(e.line, Some(5), "{e}");
    }

    #[test]
    fn knobs_reach_the_store_config() {
        let sc = Scenario::parse(
            "[workload]\nclients = 6\n[store]\nslots = 2\nmutation = \"SkipWriteBack\"\nresync = \"Never\"\n[fabric.node_delay]\n1 = { base = 40 }\n[clients.delay]\n5 = { base = 90, jitter = 10 }\n",
        )
        .unwrap();
        let kv = sc.kv_config();
        assert_eq!((kv.writers, kv.slots), (6, 2));
        assert_eq!(kv.register.mutation, Mutation::SkipWriteBack);
        assert_eq!(kv.resync, Resync::Never);
        assert_eq!(sc.fabric_config().node_delay[&1], DelayModel::fixed(40));
        assert_eq!(sc.fabric_config().client_delay[&5], DelayModel { base: 90, jitter: 10 });
    }
}
