//! Open-loop micro-benchmark workload: Zipfian keys on distinct shards with
//! increment payloads, plus dependent transactions decomposed into three
//! one-shot pieces guarded by sentinel lock keys.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};

use crate::types::{Guard, Key, Micros, Op, OpKind, ShardId, Value, MS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    pub keys_per_shard: u64,
    pub ops_per_txn: u32,
    /// Zipf exponent in [0, 1).
    pub skew: f64,
    /// Mean arrivals per second at each coordinator.
    pub rate_per_coord: f64,
    /// Arrivals start at this local time, leaving room for OWD probing.
    pub start_us: Micros,
    pub duration_us: Micros,
    /// Probability that an op reads instead of incrementing.
    pub read_fraction: f64,
    /// Probability that an arrival is a dependent transaction.
    pub interactive_fraction: f64,
    pub outstanding_cap: usize,
    /// Every transaction gets fresh keys, so nothing conflicts.
    pub disjoint: bool,
    /// Attempts of a dependent transaction before it is aborted.
    pub dependent_attempts: u32,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            keys_per_shard: 1_000_000,
            ops_per_txn: 3,
            skew: 0.5,
            rate_per_coord: 100.0,
            start_us: 500 * MS,
            duration_us: 5_000 * MS,
            read_fraction: 0.0,
            interactive_fraction: 0.0,
            outstanding_cap: 64,
            disjoint: false,
            dependent_attempts: 3,
        }
    }
}

/// A transaction whose writes depend on values it reads: both sources live
/// on `shard` and the sum is written to a key chosen from that sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependentTemplate {
    pub shard: ShardId,
    pub a: Key,
    pub b: Key,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Generated {
    OneShot(Vec<Op>),
    Dependent(DependentTemplate),
}

const LOCK_SPACE: Key = 1 << 40;
const DERIVED_SPACE: Key = 1 << 41;
const PRIVATE_SPACE: Key = 1 << 42;
/// Distinct derived keys per shard.
const DERIVED_SLOTS: Value = 64;

fn aligned(base: Key, shard_count: u32) -> Key {
    base.div_ceil(shard_count as Key) * shard_count as Key
}

/// Sentinel lock of `key`; homed on the same shard.
pub fn lock_key(key: Key, shard_count: u32) -> Key {
    aligned(LOCK_SPACE, shard_count) + key
}

/// Key and value a dependent transaction writes for source values `va`, `vb`.
pub fn derived(t: &DependentTemplate, va: Value, vb: Value, shard_count: u32) -> (Key, Value) {
    let sum = va + vb;
    let slot = sum.rem_euclid(DERIVED_SLOTS) as Key;
    let key = aligned(DERIVED_SPACE, shard_count) + slot * shard_count as Key + t.shard as Key;
    (key, sum)
}

/// Piece 1: take both locks and read both sources.
pub fn lock_and_read(t: &DependentTemplate, shard_count: u32) -> Vec<Op> {
    vec![
        Op { key: lock_key(t.a, shard_count), kind: OpKind::Increment(1) },
        Op { key: lock_key(t.b, shard_count), kind: OpKind::Increment(1) },
        Op { key: t.a, kind: OpKind::Read },
        Op { key: t.b, kind: OpKind::Read },
    ]
}

/// Outcome of piece 1: source values if both locks were free.
pub fn locked_values(t: &DependentTemplate, values: &[(Key, Value)], shard_count: u32) -> Option<(Value, Value)> {
    let get = |k: Key| values.iter().find(|(x, _)| *x == k).map(|(_, v)| *v);
    let free = get(lock_key(t.a, shard_count))? == 0 && get(lock_key(t.b, shard_count))? == 0;
    free.then(|| Some((get(t.a)?, get(t.b)?))).flatten()
}

/// Piece 2: write the derived key iff locks are still ours and the sources
/// still hold the values read.
pub fn validate_and_write(t: &DependentTemplate, va: Value, vb: Value, shard_count: u32) -> (Vec<Op>, Vec<Guard>) {
    let (key, value) = derived(t, va, vb, shard_count);
    let guard = vec![
        Guard { key: lock_key(t.a, shard_count), expect: 1 },
        Guard { key: lock_key(t.b, shard_count), expect: 1 },
        Guard { key: t.a, expect: va },
        Guard { key: t.b, expect: vb },
    ];
    (vec![Op { key, kind: OpKind::Write(value) }], guard)
}

/// Piece 3: release both locks.
pub fn unlock(t: &DependentTemplate, shard_count: u32) -> Vec<Op> {
    vec![
        Op { key: lock_key(t.a, shard_count), kind: OpKind::Increment(-1) },
        Op { key: lock_key(t.b, shard_count), kind: OpKind::Increment(-1) },
    ]
}

pub struct Workload {
    pub cfg: WorkloadConfig,
    shard_count: u32,
    coord: u32,
    rng: ChaCha8Rng,
    zipf: Zipf<f64>,
    gap: Exp<f64>,
    private_next: Key,
}

impl Workload {
    pub fn new(cfg: WorkloadConfig, shard_count: u32, coord: u32, seed: u64) -> Self {
        assert!(cfg.ops_per_txn >= 1 && cfg.ops_per_txn <= shard_count);
        let zipf = Zipf::new(cfg.keys_per_shard as f64, cfg.skew).expect("valid zipf");
        let gap = Exp::new(cfg.rate_per_coord.max(1e-9)).expect("valid rate");
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ ((coord as u64) << 32) ^ 0x9e37_79b9),
            cfg,
            shard_count,
            coord,
            zipf,
            gap,
            private_next: 0,
        }
    }

    /// Time to the next arrival, exponentially distributed.
    pub fn next_gap_us(&mut self) -> Micros {
        ((self.gap.sample(&mut self.rng) * 1e6) as Micros).max(1)
    }

    /// Zipf-ranked key homed on `shard`; rank 0 is the hottest.
    pub fn key_on(&mut self, shard: ShardId) -> Key {
        let rank = self.zipf.sample(&mut self.rng) as Key - 1;
        rank * self.shard_count as Key + shard as Key
    }

    fn private_key(&mut self, shard: ShardId) -> Key {
        let n = self.private_next;
        self.private_next += 1;
        let m = self.shard_count as Key;
        aligned(PRIVATE_SPACE, self.shard_count) + (n * 1024 + self.coord as Key) * m + shard as Key
    }

    pub fn gen(&mut self) -> Generated {
        let m = self.shard_count;
        if self.rng.random_bool(self.cfg.interactive_fraction.clamp(0.0, 1.0)) {
            let shard = self.rng.random_range(0..m);
            let a = self.key_on(shard);
            let mut b = self.key_on(shard);
            while b == a {
                b += m as Key;
            }
            return Generated::Dependent(DependentTemplate { shard, a, b });
        }
        let mut shards: Vec<ShardId> = sample(&mut self.rng, m as usize, self.cfg.ops_per_txn as usize)
            .into_iter()
            .map(|s| s as ShardId)
            .collect();
        shards.sort_unstable();
        let ops = shards
            .into_iter()
            .map(|s| {
                let key = if self.cfg.disjoint { self.private_key(s) } else { self.key_on(s) };
                let kind = if self.rng.random_bool(self.cfg.read_fraction.clamp(0.0, 1.0)) {
                    OpKind::Read
                } else {
                    OpKind::Increment(1)
                };
                Op { key, kind }
            })
            .collect();
        Generated::OneShot(ops)
    }
}
