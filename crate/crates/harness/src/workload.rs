//! YCSB-style operation streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use swarm_core::fabric::{MAX_CLIENT, Tick};

use crate::config::Delay;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyDistribution {
    Uniform,
    #[default]
    Zipfian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    /// Fraction of gets; updates take whatever the other fractions leave.
    pub read_fraction: f64,
    pub insert_fraction: f64,
    pub delete_fraction: f64,
    pub keys: usize,
    pub distribution: KeyDistribution,
    pub theta: f64,
    pub value_size: usize,
    pub clients: usize,
    pub ops_per_client: usize,
    /// Defaults to the fabric seed.
    pub seed: Option<u64>,
    /// Pause between two operations of one client.
    pub think: Delay,
    /// Insert, before the measured phase, every key it will touch.
    pub preload: bool,
    /// Have every client get each key it will touch before the measured phase.
    pub warm: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            read_fraction: 0.95,
            insert_fraction: 0.0,
            delete_fraction: 0.0,
            keys: 100,
            distribution: KeyDistribution::Zipfian,
            theta: 0.99,
            value_size: 16,
            clients: 4,
            ops_per_client: 100,
            seed: None,
            think: Delay { base: 0, jitter: 0 },
            preload: true,
            warm: true,
        }
    }
}

impl WorkloadSpec {
    /// Errors name the offending field.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |p: &str, m: &str| Err((p.to_string(), m.to_string()));
        for (name, v) in [
            ("read_fraction", self.read_fraction),
            ("insert_fraction", self.insert_fraction),
            ("delete_fraction", self.delete_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(name, "must be in [0, 1]");
            }
        }
        if self.read_fraction + self.insert_fraction + self.delete_fraction > 1.0 + 1e-9 {
            return err("read_fraction", "fractions add up to more than 1");
        }
        if self.keys == 0 {
            return err("keys", "must be at least 1");
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return err("theta", "must be positive");
        }
        if self.value_size < 8 {
            return err("value_size", "must be at least 8 bytes to carry a value id");
        }
        if self.clients == 0 || self.clients > MAX_CLIENT as usize {
            return err("clients", &format!("must be in 1..={MAX_CLIENT}"));
        }
        Ok(())
    }

    pub fn update_fraction(&self) -> f64 {
        (1.0 - self.read_fraction - self.insert_fraction - self.delete_fraction).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Get,
    Update,
    Insert,
    Delete,
}

impl OpKind {
    pub const ALL: [OpKind; 4] = [OpKind::Get, OpKind::Update, OpKind::Insert, OpKind::Delete];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Get => "get",
            OpKind::Update => "update",
            OpKind::Insert => "insert",
            OpKind::Delete => "delete",
        }
    }

    pub fn writes(self) -> bool {
        !matches!(self, OpKind::Get)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlannedOp {
    pub kind: OpKind,
    pub key: usize,
    /// Id carried by the value of a write.
    pub value: u64,
}

/// Per-client operation stream.
pub struct Generator {
    rng: ChaCha8Rng,
    spec: WorkloadSpec,
    zipf: Option<Zipf<f64>>,
    client: u8,
    seq: u64,
}

impl Generator {
    pub fn new(spec: &WorkloadSpec, seed: u64, client: u8) -> Generator {
        let mut s = ChaCha8Rng::seed_from_u64(seed);
        s.set_stream(client as u64 + 1);
        let zipf = match spec.distribution {
            KeyDistribution::Zipfian => {
                Some(Zipf::new(spec.keys as f64, spec.theta).expect("validated zipf parameters"))
            }
            KeyDistribution::Uniform => None,
        };
        Generator { rng: s, spec: spec.clone(), zipf, client, seq: 0 }
    }

    pub fn next_key(&mut self) -> usize {
        match &self.zipf {
            Some(z) => (z.sample(&mut self.rng) as usize).clamp(1, self.spec.keys) - 1,
            None => self.rng.random_range(0..self.spec.keys),
        }
    }

    pub fn next_op(&mut self) -> PlannedOp {
        let x: f64 = self.rng.random();
        let s = &self.spec;
        let kind = if x < s.read_fraction {
            OpKind::Get
        } else if x < s.read_fraction + s.insert_fraction {
            OpKind::Insert
        } else if x < s.read_fraction + s.insert_fraction + s.delete_fraction {
            OpKind::Delete
        } else {
            OpKind::Update
        };
        let key = self.next_key();
        self.seq += 1;
        PlannedOp { kind, key, value: client_value_id(self.client, self.seq) }
    }

    pub fn think(&mut self) -> Tick {
        let d = self.spec.think;
        d.base + self.rng.random_range(0..=d.jitter)
    }
}

/// Unique value id of a client's `seq`-th operation.
pub fn client_value_id(client: u8, seq: u64) -> u64 {
    (client as u64 + 1) << 40 | seq
}

/// Value id of the preloaded value of `key`.
pub fn preload_value_id(key: usize) -> u64 {
    1 << 56 | key as u64
}

pub fn key_name(key: usize) -> Vec<u8> {
    format!("user{key:08}").into_bytes()
}

/// Value bytes: the id in little-endian order, padded to `size`.
pub fn encode_value(id: u64, size: usize) -> Vec<u8> {
    let mut v = id.to_le_bytes().to_vec();
    v.resize(size.max(8), 0xab);
    v
}
