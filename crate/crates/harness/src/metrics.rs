//! Roundtrip histograms and path tallies of the measured phase.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use swarm_core::fabric::Tick;
use swarm_core::innout::InnOutStats;
use swarm_core::safeguess::{ReadPath, WritePath};

use crate::runner::{HistRecord, Outcome};
use crate::workload::OpKind;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpMetrics {
    pub count: u64,
    pub failed: u64,
    /// Completed operations by critical-path roundtrips.
    pub roundtrips: BTreeMap<u32, u64>,
    pub latency_total: Tick,
    pub latency_max: Tick,
}

impl OpMetrics {
    pub fn completed(&self) -> u64 {
        self.roundtrips.values().sum()
    }

    /// Fraction of completed operations with exactly `rt` roundtrips.
    pub fn fraction_at(&self, rt: u32) -> f64 {
        ratio(self.roundtrips.get(&rt).copied().unwrap_or(0), self.completed())
    }

    pub fn max_roundtrips(&self) -> Option<u32> {
        self.roundtrips.keys().next_back().copied()
    }

    pub fn median_roundtrips(&self) -> Option<u32> {
        let n = self.completed();
        let mut seen = 0;
        for (&rt, &c) in &self.roundtrips {
            seen += c;
            if 2 * seen >= n.max(1) {
                return Some(rt);
            }
        }
        None
    }

    pub fn mean_latency(&self) -> f64 {
        self.latency_total as f64 / self.completed().max(1) as f64
    }

    pub fn merge(&mut self, o: &OpMetrics) {
        self.count += o.count;
        self.failed += o.failed;
        for (&k, &v) in &o.roundtrips {
            *self.roundtrips.entry(k).or_default() += v;
        }
        self.latency_total += o.latency_total;
        self.latency_max = self.latency_max.max(o.latency_max);
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    match b {
        0 => 0.0,
        _ => a as f64 / b as f64,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ops: u64,
    pub failed: u64,
    pub by_kind: BTreeMap<OpKind, OpMetrics>,
    /// Every measured operation lands in exactly one path.
    pub paths: BTreeMap<String, u64>,
    /// Read-loop iterations of gets.
    pub read_iterations: BTreeMap<u32, u64>,
    pub widened_ops: u64,
    pub index_roundtrips: u64,
    pub inplace_hits: u64,
    pub inplace_misses: u64,
    pub buffer_fetches: u64,
    pub cas_retries: u64,
    pub trylock_granted: u64,
    pub trylock_denied: u64,
    pub stale_guesses: Vec<u64>,
    pub writes_by_client: Vec<u64>,
    pub sim_ticks: Tick,
}

fn path_of(r: &HistRecord) -> String {
    let tail = match (r.outcome, r.kind) {
        (Outcome::Error, _) => "error".to_string(),
        (Outcome::Pending, _) => "pending".to_string(),
        (Outcome::NotFound, _) => "not_found".to_string(),
        (Outcome::NoSuchKey, _) => "no_such_key".to_string(),
        (Outcome::Updated, _) => "updated_live_key".to_string(),
        (_, OpKind::Get) => match r.read_path {
            Some(ReadPath::Verified) => "verified".into(),
            Some(ReadPath::Locked) => "locked".into(),
            Some(ReadPath::WaitFree) => "wait_free".into(),
            None => "max_register".into(),
        },
        (_, _) => match r.write_path {
            Some(WritePath::Fast) => "fast".into(),
            Some(WritePath::Relocked) => "relocked".into(),
            Some(WritePath::Yielded) => "yielded".into(),
            Some(WritePath::Deleted) => "deleted".into(),
            None => "two_phase".into(),
        },
    };
    format!("{}.{tail}", r.kind.name())
}

impl Metrics {
    /// `clients` gives per-client counters their length; `stats` holds the
    /// measured-phase In-n-Out counters and stale guesses of each client.
    pub fn collect<'a>(
        records: impl Iterator<Item = &'a HistRecord>,
        clients: usize,
        stats: &[(InnOutStats, u64)],
        sim_ticks: Tick,
    ) -> Metrics {
        let mut m = Metrics {
            stale_guesses: stats.iter().map(|s| s.1).collect(),
            writes_by_client: vec![0; clients],
            sim_ticks,
            ..Metrics::default()
        };
        m.stale_guesses.resize(clients, 0);
        for s in stats {
            m.inplace_hits += s.0.inplace_hits;
            m.inplace_misses += s.0.inplace_misses;
            m.buffer_fetches += s.0.fetches;
            m.cas_retries += s.0.cas_retries;
        }
        for r in records {
            m.ops += 1;
            *m.paths.entry(path_of(r)).or_default() += 1;
            let k = m.by_kind.entry(r.kind).or_default();
            k.count += 1;
            if r.failed() {
                m.failed += 1;
                k.failed += 1;
                continue;
            }
            *k.roundtrips.entry(r.roundtrips).or_default() += 1;
            let lat = r.response.unwrap_or(r.invoke) - r.invoke;
            k.latency_total += lat;
            k.latency_max = k.latency_max.max(lat);
            if r.kind == OpKind::Get && r.read_path.is_some() {
                *m.read_iterations.entry(r.iterations).or_default() += 1;
            }
            if r.kind.writes()
                && let Some(c) = m.writes_by_client.get_mut(r.client as usize)
            {
                *c += 1;
            }
            m.widened_ops += r.widened as u64;
            m.index_roundtrips += r.index_roundtrips as u64;
            match (r.read_path, r.write_path) {
                (Some(ReadPath::Locked), _) | (_, Some(WritePath::Relocked)) => m.trylock_granted += 1,
                (_, Some(WritePath::Yielded)) => m.trylock_denied += 1,
                _ => {}
            }
        }
        m
    }

    pub fn kind(&self, k: OpKind) -> OpMetrics {
        self.by_kind.get(&k).cloned().unwrap_or_default()
    }

    /// Stale guesses of `client` over its writes.
    pub fn stale_fraction(&self, client: usize) -> f64 {
        ratio(
            self.stale_guesses.get(client).copied().unwrap_or(0),
            self.writes_by_client.get(client).copied().unwrap_or(0),
        )
    }

    pub fn inplace_hit_rate(&self) -> f64 {
        ratio(self.inplace_hits, self.inplace_hits + self.inplace_misses)
    }

    /// Long-format rows `metric,label,value`.
    pub fn rows(&self) -> Vec<(String, String, String)> {
        let mut out = vec![
            ("ops".into(), String::new(), self.ops.to_string()),
            ("failed".into(), String::new(), self.failed.to_string()),
            ("sim_ticks".into(), String::new(), self.sim_ticks.to_string()),
            ("widened_ops".into(), String::new(), self.widened_ops.to_string()),
            ("index_roundtrips".into(), String::new(), self.index_roundtrips.to_string()),
            ("inplace_hits".into(), String::new(), self.inplace_hits.to_string()),
            ("inplace_misses".into(), String::new(), self.inplace_misses.to_string()),
            ("buffer_fetches".into(), String::new(), self.buffer_fetches.to_string()),
            ("cas_retries".into(), String::new(), self.cas_retries.to_string()),
            ("trylock_granted".into(), String::new(), self.trylock_granted.to_string()),
            ("trylock_denied".into(), String::new(), self.trylock_denied.to_string()),
        ];
        for (k, om) in &self.by_kind {
            for (rt, c) in &om.roundtrips {
                out.push((format!("{}_roundtrips", k.name()), rt.to_string(), c.to_string()));
            }
            out.push((format!("{}_failed", k.name()), String::new(), om.failed.to_string()));
            out.push((format!("{}_mean_latency", k.name()), String::new(), format!("{:.2}", om.mean_latency())));
        }
        for (p, c) in &self.paths {
            out.push(("path".into(), p.clone(), c.to_string()));
        }
        for (i, c) in &self.read_iterations {
            out.push(("read_iterations".into(), i.to_string(), c.to_string()));
        }
        for (c, s) in self.stale_guesses.iter().enumerate() {
            out.push(("stale_guesses".into(), c.to_string(), s.to_string()));
        }
        out
    }

    pub fn merge(&mut self, o: &Metrics) {
        self.ops += o.ops;
        self.failed += o.failed;
        for (k, v) in &o.by_kind {
            self.by_kind.entry(*k).or_default().merge(v);
        }
        for (k, v) in &o.paths {
            *self.paths.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &o.read_iterations {
            *self.read_iterations.entry(*k).or_default() += v;
        }
        self.widened_ops += o.widened_ops;
        self.index_roundtrips += o.index_roundtrips;
        self.inplace_hits += o.inplace_hits;
        self.inplace_misses += o.inplace_misses;
        self.buffer_fetches += o.buffer_fetches;
        self.cas_retries += o.cas_retries;
        self.trylock_granted += o.trylock_granted;
        self.trylock_denied += o.trylock_denied;
        for (dst, src) in
            [(&mut self.stale_guesses, &o.stale_guesses), (&mut self.writes_by_client, &o.writes_by_client)]
        {
            if dst.len() < src.len() {
                dst.resize(src.len(), 0);
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        self.sim_ticks += o.sim_ticks;
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} ops, {} failed, {} sim ticks\n", self.ops, self.failed, self.sim_ticks);
        for (k, om) in &self.by_kind {
            s += &format!(
                "  {:<7} n={:<6} 1-rt={:>6.2}%  median={} max={} mean latency={:.1}\n",
                k.name(),
                om.count,
                100.0 * om.fraction_at(1),
                om.median_roundtrips().map_or("-".into(), |v| v.to_string()),
                om.max_roundtrips().map_or("-".into(), |v| v.to_string()),
                om.mean_latency(),
            );
        }
        s += "  paths:";
        for (p, c) in &self.paths {
            s += &format!(" {p}={c}");
        }
        s += &format!(
            "\n  in-place hit rate {:.2}%, trylocks granted {} denied {}, widened ops {}\n",
            100.0 * self.inplace_hit_rate(),
            self.trylock_granted,
            self.trylock_denied,
            self.widened_ops
        );
        s
    }
}
