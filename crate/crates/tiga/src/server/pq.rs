use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::types::{ExecResult, Key, Micros, ShardId, Timestamp, Txn, TxnId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Waiting for its timestamp to expire.
    Queued,
    /// Released by a leader, waiting for agreement; holds the optimistic
    /// result when executed.
    Released { result: Option<ExecResult> },
}

#[derive(Clone, Debug)]
pub struct PqEntry {
    pub txn: Txn,
    pub phase: Phase,
}

/// Transactions ordered by timestamp with a per-key index of the keys they
/// touch on this shard, so "is there a conflicting smaller entry" is cheap.
#[derive(Debug)]
pub struct PendingQueue {
    shard: ShardId,
    shard_count: u32,
    entries: BTreeMap<Timestamp, PqEntry>,
    by_id: HashMap<TxnId, Timestamp>,
    readers: HashMap<Key, BTreeSet<Timestamp>>,
    writers: HashMap<Key, BTreeSet<Timestamp>>,
}

impl PendingQueue {
    pub fn new(shard: ShardId, shard_count: u32) -> Self {
        Self {
            shard,
            shard_count,
            entries: BTreeMap::new(),
            by_id: HashMap::new(),
            readers: HashMap::new(),
            writers: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: TxnId) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn get(&self, id: TxnId) -> Option<&PqEntry> {
        self.by_id.get(&id).and_then(|t| self.entries.get(t))
    }

    pub fn get_mut(&mut self, id: TxnId) -> Option<&mut PqEntry> {
        let t = self.by_id.get(&id)?;
        self.entries.get_mut(t)
    }

    fn index(&mut self, txn: &Txn, add: bool) {
        for (key, written) in txn.accesses_on(self.shard, self.shard_count) {
            let map = if written {
                &mut self.writers
            } else {
                &mut self.readers
            };
            if add {
                map.entry(key).or_default().insert(txn.t);
            } else if let Some(set) = map.get_mut(&key) {
                set.remove(&txn.t);
                if set.is_empty() {
                    map.remove(&key);
                }
            }
        }
    }

    pub fn insert(&mut self, txn: Txn, phase: Phase) {
        debug_assert!(!self.contains(txn.id));
        self.index(&txn, true);
        self.by_id.insert(txn.id, txn.t);
        self.entries.insert(txn.t, PqEntry { txn, phase });
    }

    pub fn remove(&mut self, id: TxnId) -> Option<PqEntry> {
        let t = self.by_id.remove(&id)?;
        let e = self.entries.remove(&t)?;
        self.index(&e.txn, false);
        Some(e)
    }

    /// Moves an entry to timestamp `t` as a queued entry.
    pub fn reposition(&mut self, id: TxnId, t: Timestamp) {
        if let Some(mut e) = self.remove(id) {
            e.txn.t = t;
            self.insert(e.txn, Phase::Queued);
        }
    }

    /// True if some entry with a smaller timestamp conflicts with `txn` on
    /// this shard's keys.
    pub fn blocked(&self, txn: &Txn) -> bool {
        let smaller = |map: &HashMap<Key, BTreeSet<Timestamp>>, key: Key| {
            map.get(&key)
                .is_some_and(|s| s.range(..txn.t).next().is_some())
        };
        txn.accesses_on(self.shard, self.shard_count)
            .into_iter()
            .any(|(key, written)| {
                smaller(&self.writers, key) || (written && smaller(&self.readers, key))
            })
    }

    /// Queued entries whose time has come and which no smaller conflicting
    /// entry blocks, in timestamp order.
    pub fn releasable(&self, now: Micros) -> Vec<TxnId> {
        self.entries
            .range(..)
            .take_while(|(t, _)| t.time_us <= now)
            .filter(|(_, e)| e.phase == Phase::Queued && !self.blocked(&e.txn))
            .map(|(_, e)| e.txn.id)
            .collect()
    }

    /// Earliest time of any queued entry.
    pub fn next_queued(&self) -> Option<Micros> {
        self.entries
            .values()
            .find(|e| e.phase == Phase::Queued)
            .map(|e| e.txn.t.time_us)
    }

    /// Empties the queue, returning every transaction in timestamp order.
    pub fn drain(&mut self) -> Vec<PqEntry> {
        self.by_id.clear();
        self.readers.clear();
        self.writers.clear();
        std::mem::take(&mut self.entries).into_values().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PqEntry> {
        self.entries.values()
    }
}
