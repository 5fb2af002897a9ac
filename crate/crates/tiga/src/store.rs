use std::collections::BTreeMap;

use crate::types::{shard_of, ExecResult, Key, OpKind, ShardId, Timestamp, Txn, Value};

/// Multi-version key-value store. Versions per key are kept sorted by
/// timestamp; a missing key reads as 0.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VersionedStore {
    versions: BTreeMap<Key, Vec<(Timestamp, Value)>>,
}

impl VersionedStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Latest value written strictly before `t`.
    pub fn read_before(&self, key: Key, t: Timestamp) -> Value {
        let Some(vs) = self.versions.get(&key) else {
            return 0;
        };
        let idx = vs.partition_point(|(vt, _)| *vt < t);
        if idx == 0 { 0 } else { vs[idx - 1].1 }
    }

    pub fn latest(&self, key: Key) -> Value {
        self.versions
            .get(&key)
            .and_then(|vs| vs.last())
            .map_or(0, |(_, v)| *v)
    }

    fn put(&mut self, key: Key, t: Timestamp, v: Value) {
        let vs = self.versions.entry(key).or_default();
        match vs.binary_search_by(|(vt, _)| vt.cmp(&t)) {
            Ok(i) => vs[i].1 = v,
            Err(i) => vs.insert(i, (t, v)),
        }
    }

    /// Executes the ops of `txn` homed on `shard` at `txn.t`. Guards on this
    /// shard are checked first; a failed guard skips every write.
    pub fn execute(&mut self, txn: &Txn, shard: ShardId, shard_count: u32) -> ExecResult {
        let mine = |k: Key| shard_of(k, shard_count) == shard;
        let applied = txn
            .guard
            .iter()
            .filter(|g| mine(g.key))
            .all(|g| self.read_before(g.key, txn.t) == g.expect);
        let mut staged: BTreeMap<Key, Value> = BTreeMap::new();
        let mut values = Vec::new();
        for op in txn.ops.iter().filter(|op| mine(op.key)) {
            let pre = staged
                .get(&op.key)
                .copied()
                .unwrap_or_else(|| self.read_before(op.key, txn.t));
            values.push((op.key, pre));
            if !applied {
                continue;
            }
            match op.kind {
                OpKind::Read => {}
                OpKind::Increment(d) => {
                    staged.insert(op.key, pre + d);
                }
                OpKind::Write(v) => {
                    staged.insert(op.key, v);
                }
            }
        }
        for (k, v) in staged {
            self.put(k, txn.t, v);
        }
        ExecResult { values, applied }
    }

    /// Removes the versions `txn` created at `t`. Idempotent.
    pub fn revoke(&mut self, txn: &Txn, t: Timestamp) {
        for key in txn.write_set() {
            if let Some(vs) = self.versions.get_mut(&key) {
                if let Ok(i) = vs.binary_search_by(|(vt, _)| vt.cmp(&t)) {
                    vs.remove(i);
                }
                if vs.is_empty() {
                    self.versions.remove(&key);
                }
            }
        }
    }

    /// Latest value of every key ever written.
    pub fn snapshot(&self) -> BTreeMap<Key, Value> {
        self.versions
            .iter()
            .filter_map(|(k, vs)| vs.last().map(|(_, v)| (*k, *v)))
            .collect()
    }

    pub fn version_count(&self) -> usize {
        self.versions.values().map(Vec::len).sum()
    }
}
