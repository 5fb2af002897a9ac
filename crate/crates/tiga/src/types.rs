//! Shared domain types: transaction identifiers, totally ordered timestamps,
//! one-shot transactions, views and log entries.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub type Key = u64;
pub type Value = i64;
pub type ShardId = u32;
pub type ReplicaId = u32;
pub type CoordId = u32;
/// Microseconds, either on the true timeline or a node's local clock.
pub type Micros = i64;

pub const MS: Micros = 1_000;

/// Home shard of a key.
pub fn shard_of(key: Key, shard_count: u32) -> ShardId {
    (key % shard_count as u64) as ShardId
}

/// Unique per submission; retries reuse it.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct TxnId {
    pub coord: CoordId,
    pub seq: u64,
}

impl TxnId {
    pub fn new(coord: CoordId, seq: u64) -> Self {
        Self { coord, seq }
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}/s{}", self.coord, self.seq)
    }
}

/// Ordered by clock time, then coordinator id, then sequence. Distinct
/// transactions never compare equal because the tie-break is their id.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Timestamp {
    pub time_us: Micros,
    pub id: TxnId,
}

impl Timestamp {
    pub fn new(time_us: Micros, id: TxnId) -> Self {
        Self { time_us, id }
    }

    /// Smallest timestamp owned by `id` that is strictly greater than `self`.
    pub fn successor_for(&self, id: TxnId) -> Timestamp {
        let candidate = Timestamp::new(self.time_us, id);
        if candidate > *self {
            candidate
        } else {
            Timestamp::new(self.time_us + 1, id)
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.time_us, self.id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", content = "arg", rename_all = "snake_case")]
pub enum OpKind {
    Read,
    /// Returns the pre-value and stores pre-value + delta.
    Increment(Value),
    /// Returns the pre-value and stores the given value.
    Write(Value),
}

impl OpKind {
    pub fn reads(&self) -> bool {
        matches!(self, OpKind::Read | OpKind::Increment(_))
    }

    pub fn writes(&self) -> bool {
        matches!(self, OpKind::Increment(_) | OpKind::Write(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Op {
    pub key: Key,
    pub kind: OpKind,
}

/// Precondition of a one-shot procedure: every write is skipped unless each
/// listed key currently holds the listed value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guard {
    pub key: Key,
    pub expect: Value,
}

/// A one-shot stored procedure with its key sets known up front.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Txn {
    pub id: TxnId,
    pub t: Timestamp,
    pub ops: Vec<Op>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub guard: Vec<Guard>,
    /// Sorted, deduplicated home shards of every accessed key.
    pub shards: Vec<ShardId>,
}

impl Txn {
    pub fn new(id: TxnId, ops: Vec<Op>, guard: Vec<Guard>, shard_count: u32) -> Self {
        let shards: BTreeSet<ShardId> = ops
            .iter()
            .map(|op| op.key)
            .chain(guard.iter().map(|g| g.key))
            .map(|k| shard_of(k, shard_count))
            .collect();
        Self {
            id,
            t: Timestamp::new(0, id),
            ops,
            guard,
            shards: shards.into_iter().collect(),
        }
    }

    pub fn read_set(&self) -> BTreeSet<Key> {
        self.ops
            .iter()
            .filter(|op| op.kind.reads())
            .map(|op| op.key)
            .chain(self.guard.iter().map(|g| g.key))
            .collect()
    }

    pub fn write_set(&self) -> BTreeSet<Key> {
        self.ops
            .iter()
            .filter(|op| op.kind.writes())
            .map(|op| op.key)
            .collect()
    }

    /// Every key touched, each paired with whether it is written.
    pub fn accesses(&self) -> Vec<(Key, bool)> {
        let writes = self.write_set();
        let mut keys: BTreeSet<Key> = self.read_set();
        keys.extend(writes.iter().copied());
        keys.into_iter().map(|k| (k, writes.contains(&k))).collect()
    }

    /// Accesses restricted to the keys homed on `shard`.
    pub fn accesses_on(&self, shard: ShardId, shard_count: u32) -> Vec<(Key, bool)> {
        self.accesses()
            .into_iter()
            .filter(|(k, _)| shard_of(*k, shard_count) == shard)
            .collect()
    }

    pub fn is_multi_shard(&self) -> bool {
        self.shards.len() > 1
    }

    pub fn is_read_only(&self) -> bool {
        self.ops.iter().all(|op| !op.kind.writes())
    }
}

/// True iff the two transactions have a read-write or write-write conflict.
pub fn conflicts(a: &Txn, b: &Txn) -> bool {
    let (ar, aw) = (a.read_set(), a.write_set());
    let (br, bw) = (b.read_set(), b.write_set());
    !aw.is_disjoint(&bw) || !aw.is_disjoint(&br) || !ar.is_disjoint(&bw)
}

/// Outcome of executing the ops of one shard (or all shards, when merged).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResult {
    /// One value per executed op, in op order: read value or pre-value.
    pub values: Vec<(Key, Value)>,
    /// False when a guard failed and writes were skipped.
    pub applied: bool,
}

impl ExecResult {
    /// Merges per-shard results into op order of `txn`.
    pub fn merge(txn: &Txn, parts: &[ExecResult]) -> ExecResult {
        let mut values = Vec::with_capacity(txn.ops.len());
        for op in &txn.ops {
            if let Some(v) = parts
                .iter()
                .flat_map(|p| p.values.iter())
                .find(|(k, _)| *k == op.key)
            {
                values.push(*v);
            }
        }
        ExecResult {
            values,
            applied: parts.iter().all(|p| p.applied),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Agreement before execution; used when leaders are co-located.
    Preventive,
    /// Optimistic execution, validated and possibly revoked afterwards.
    Detective,
}

/// Global view record held by the view manager and cached everywhere.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub g_view: u64,
    /// Local view per shard; the leader of shard s is `g_vec[s] % (2f+1)`.
    pub g_vec: Vec<u64>,
    pub mode: Mode,
}

impl ViewRecord {
    pub fn leader_of(&self, shard: ShardId, replicas: u32) -> ReplicaId {
        (self.g_vec[shard as usize] % replicas as u64) as ReplicaId
    }

    pub fn l_view(&self, shard: ShardId) -> u64 {
        self.g_vec[shard as usize]
    }
}

/// A log slot: the transaction and the timestamp it holds in this log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub txn: Txn,
}

impl LogEntry {
    pub fn new(txn: Txn) -> Self {
        Self { txn }
    }

    pub fn id(&self) -> TxnId {
        self.txn.id
    }

    pub fn t(&self) -> Timestamp {
        self.txn.t
    }
}

/// Super-quorum size for the fast path.
pub fn super_quorum(f: u32) -> u32 {
    1 + f + f.div_ceil(2)
}

/// Replicas per shard.
pub fn replicas(f: u32) -> u32 {
    2 * f + 1
}
