//! Post-hoc oracle over committed histories.
//!
//! A history passes when (1) replaying it serially in timestamp order
//! reproduces every recorded result and every shard's final store, (2) the
//! conflict order observed in the leaders' logs is acyclic, and (3) some
//! serial order consistent with conflicts also respects real time. For (3)
//! conflicting pairs are ordered by timestamp and every pair
//! `commit_i < start_j` adds an edge `i -> j`; a strongly connected
//! component means no such order exists.

use std::collections::{BTreeMap, HashMap};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::VersionedStore;
use crate::types::{shard_of, ExecResult, Guard, Key, Micros, Op, ShardId, Timestamp, Txn, TxnId, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitPath {
    Fast,
    Slow,
}

/// One committed transaction as observed by its coordinator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub id: TxnId,
    pub ops: Vec<Op>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub guard: Vec<Guard>,
    pub shards: Vec<ShardId>,
    /// True time of the first submission.
    pub start_us: Micros,
    pub commit_us: Micros,
    pub t: Timestamp,
    pub result: ExecResult,
    pub path: CommitPath,
    pub retries: u32,
}

impl HistoryRecord {
    pub fn txn(&self, shard_count: u32) -> Txn {
        let mut t = Txn::new(self.id, self.ops.clone(), self.guard.clone(), shard_count);
        t.t = self.t;
        t
    }
}

/// Final state of one shard's leader.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardFinal {
    pub shard: ShardId,
    pub store: BTreeMap<Key, Value>,
    /// Log in append order.
    pub log: Vec<TxnId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    Cycle,
    Realtime,
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub first: TxnId,
    pub second: TxnId,
    pub kind: Violation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail(Witness),
}

impl Verdict {
    pub fn passed(&self) -> bool {
        *self == Verdict::Pass
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("transaction {0} has no result for every op")]
    MissingResult(TxnId),
    #[error("transaction {0} recorded twice")]
    Duplicate(TxnId),
    #[error("commit before start for {0}")]
    BadInterval(TxnId),
}

/// Keeps one record per id: the earliest start, with the first commit seen.
pub fn merge_history(records: impl IntoIterator<Item = HistoryRecord>) -> Vec<HistoryRecord> {
    let mut by_id: BTreeMap<TxnId, HistoryRecord> = BTreeMap::new();
    for r in records {
        match by_id.get_mut(&r.id) {
            Some(e) => e.start_us = e.start_us.min(r.start_us),
            None => {
                by_id.insert(r.id, r);
            }
        }
    }
    by_id.into_values().collect()
}

/// Restricts checks to the keys of one shard, or all keys.
#[derive(Clone, Copy)]
struct Scope {
    shard: Option<ShardId>,
    shard_count: u32,
}

impl Scope {
    fn has(&self, key: Key) -> bool {
        self.shard.is_none_or(|s| shard_of(key, self.shard_count) == s)
    }

    fn accesses(&self, txn: &Txn) -> Vec<(Key, bool)> {
        txn.accesses().into_iter().filter(|(k, _)| self.has(*k)).collect()
    }
}

pub fn check_strict_serializability(
    history: &[HistoryRecord],
    finals: &[ShardFinal],
    shard_count: u32,
) -> Result<Verdict, CheckError> {
    check(history, finals, Scope { shard: None, shard_count })
}

/// Runs the same three checks on each shard's sub-history.
pub fn linearizability_per_shard(
    history: &[HistoryRecord],
    finals: &[ShardFinal],
    shard_count: u32,
) -> Result<Vec<(ShardId, Verdict)>, CheckError> {
    (0..shard_count)
        .map(|s| {
            let sub: Vec<HistoryRecord> = history.iter().filter(|r| r.shards.contains(&s)).cloned().collect();
            let fin: Vec<ShardFinal> = finals.iter().filter(|f| f.shard == s).cloned().collect();
            check(&sub, &fin, Scope { shard: Some(s), shard_count }).map(|v| (s, v))
        })
        .collect()
}

fn check(history: &[HistoryRecord], finals: &[ShardFinal], scope: Scope) -> Result<Verdict, CheckError> {
    let mut seen = HashMap::new();
    for r in history {
        if seen.insert(r.id, ()).is_some() {
            return Err(CheckError::Duplicate(r.id));
        }
        if r.result.values.len() != r.ops.len() {
            return Err(CheckError::MissingResult(r.id));
        }
        if r.commit_us < r.start_us {
            return Err(CheckError::BadInterval(r.id));
        }
    }
    let txns: Vec<Txn> = history.iter().map(|r| r.txn(scope.shard_count)).collect();
    if let Some(w) = value_check(history, &txns, finals, scope) {
        return Ok(Verdict::Fail(w));
    }
    if let Some(w) = cycle_check(&txns, finals, scope) {
        return Ok(Verdict::Fail(w));
    }
    if let Some(w) = realtime_check(history, &txns, scope) {
        return Ok(Verdict::Fail(w));
    }
    Ok(Verdict::Pass)
}

fn by_timestamp(history: &[HistoryRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by_key(|&i| history[i].t);
    order
}

fn value_check(history: &[HistoryRecord], txns: &[Txn], finals: &[ShardFinal], scope: Scope) -> Option<Witness> {
    let m = scope.shard_count;
    let mut store = VersionedStore::new();
    let mut last_touch: HashMap<Key, TxnId> = HashMap::new();
    for i in by_timestamp(history) {
        let txn = &txns[i];
        let parts: Vec<ExecResult> = txn.shards.iter().map(|&s| store.execute(txn, s, m)).collect();
        let replay = ExecResult::merge(txn, &parts);
        let recorded = &history[i].result;
        let keep = |v: &[(Key, Value)]| -> Vec<(Key, Value)> { v.iter().copied().filter(|(k, _)| scope.has(*k)).collect() };
        let applied_matters = scope.shard.is_none() || txn.guard.iter().any(|g| scope.has(g.key));
        let mismatch = keep(&replay.values) != keep(&recorded.values)
            || (applied_matters && replay.applied != recorded.applied);
        if mismatch {
            let prev = scope
                .accesses(txn)
                .iter()
                .filter_map(|(k, _)| last_touch.get(k).copied())
                .max_by_key(|id| history.iter().find(|r| r.id == *id).map(|r| r.t));
            return Some(Witness {
                first: prev.unwrap_or(txn.id),
                second: txn.id,
                kind: Violation::Value,
            });
        }
        for (k, _) in scope.accesses(txn) {
            last_touch.insert(k, txn.id);
        }
    }
    let replayed = store.snapshot();
    for f in finals {
        let expect: BTreeMap<Key, Value> = replayed
            .iter()
            .filter(|(k, _)| shard_of(**k, m) == f.shard && scope.has(**k))
            .map(|(k, v)| (*k, *v))
            .collect();
        let got: BTreeMap<Key, Value> = f.store.iter().filter(|(k, _)| scope.has(**k)).map(|(k, v)| (*k, *v)).collect();
        if expect != got {
            let key = expect
                .keys()
                .chain(got.keys())
                .find(|k| expect.get(k) != got.get(k))
                .copied()
                .expect("maps differ");
            let id = last_touch.get(&key).copied().unwrap_or_default();
            return Some(Witness { first: id, second: id, kind: Violation::Value });
        }
    }
    None
}

/// Adds per-key conflict edges for a sequence of transactions: each read
/// follows the last write, each write follows the last write and every read
/// since.
fn chain_edges(
    seq: impl Iterator<Item = usize>,
    txns: &[Txn],
    scope: Scope,
    mut edge: impl FnMut(usize, usize),
) {
    let mut last_write: HashMap<Key, usize> = HashMap::new();
    let mut readers: HashMap<Key, Vec<usize>> = HashMap::new();
    for i in seq {
        for (k, w) in scope.accesses(&txns[i]) {
            if let Some(&p) = last_write.get(&k) {
                if p != i {
                    edge(p, i);
                }
            }
            if w {
                for r in readers.remove(&k).unwrap_or_default() {
                    if r != i {
                        edge(r, i);
                    }
                }
                last_write.insert(k, i);
            } else {
                readers.entry(k).or_default().push(i);
            }
        }
    }
}

fn cycle_check(txns: &[Txn], finals: &[ShardFinal], scope: Scope) -> Option<Witness> {
    let index: HashMap<TxnId, usize> = txns.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
    let mut g: DiGraph<usize, ()> = DiGraph::new();
    let nodes: Vec<NodeIndex> = (0..txns.len()).map(|i| g.add_node(i)).collect();
    for f in finals {
        let shard_scope = Scope {
            shard: Some(f.shard),
            shard_count: scope.shard_count,
        };
        let seq = f.log.iter().filter_map(|id| index.get(id).copied());
        chain_edges(seq, txns, shard_scope, |a, b| {
            g.add_edge(nodes[a], nodes[b], ());
        });
    }
    for comp in tarjan_scc(&g) {
        if comp.len() > 1 {
            let mut ids: Vec<TxnId> = comp.iter().map(|n| txns[g[*n]].id).collect();
            ids.sort();
            return Some(Witness { first: ids[0], second: ids[1], kind: Violation::Cycle });
        }
    }
    None
}

fn realtime_check(history: &[HistoryRecord], txns: &[Txn], scope: Scope) -> Option<Witness> {
    // Cheap pass: timestamps already respect every real-time pair.
    let mut by_commit: Vec<usize> = (0..history.len()).collect();
    by_commit.sort_by_key(|&i| history[i].commit_us);
    let mut by_start: Vec<usize> = (0..history.len()).collect();
    by_start.sort_by_key(|&i| history[i].start_us);
    let mut max_t: Option<Timestamp> = None;
    let mut c = 0;
    let mut inverted = false;
    for &j in &by_start {
        while c < by_commit.len() && history[by_commit[c]].commit_us < history[j].start_us {
            let t = history[by_commit[c]].t;
            max_t = Some(max_t.map_or(t, |m| m.max(t)));
            c += 1;
        }
        if max_t.is_some_and(|m| m > history[j].t) {
            inverted = true;
            break;
        }
    }
    if !inverted {
        return None;
    }

    let n = history.len();
    let mut g: DiGraph<(), ()> = DiGraph::new();
    let nodes: Vec<NodeIndex> = (0..n).map(|_| g.add_node(())).collect();
    chain_edges(by_timestamp(history).into_iter(), txns, scope, |a, b| {
        g.add_edge(nodes[a], nodes[b], ());
    });
    // Real-time edges through a chain of time points; at equal times starts
    // precede commits so only strict `commit < start` pairs are linked.
    let mut events: Vec<(Micros, u8, usize)> = Vec::with_capacity(2 * n);
    for (i, r) in history.iter().enumerate() {
        events.push((r.start_us, 0, i));
        events.push((r.commit_us, 1, i));
    }
    events.sort_unstable();
    let mut prev: Option<NodeIndex> = None;
    for &(_, kind, i) in &events {
        let p = g.add_node(());
        if let Some(q) = prev {
            g.add_edge(q, p, ());
        }
        if kind == 1 {
            g.add_edge(nodes[i], p, ());
        } else {
            g.add_edge(p, nodes[i], ());
        }
        prev = Some(p);
    }
    for comp in tarjan_scc(&g) {
        let members: Vec<usize> = comp.iter().filter_map(|x| (x.index() < n).then_some(x.index())).collect();
        if members.len() < 2 {
            continue;
        }
        let mut best: Option<(usize, usize)> = None;
        for &i in &members {
            for &j in &members {
                if history[i].commit_us < history[j].start_us && history[i].t > history[j].t {
                    // Tightest real-time gap first: the most direct witness.
                    let key = |a: usize, b: usize| (history[b].start_us - history[a].commit_us, history[a].id, history[b].id);
                    let better = best.is_none_or(|(a, b)| key(i, j) < key(a, b));
                    if better {
                        best = Some((i, j));
                    }
                }
            }
        }
        let (i, j) = best.expect("a cycle needs an inverted real-time edge");
        return Some(Witness {
            first: history[i].id,
            second: history[j].id,
            kind: Violation::Realtime,
        });
    }
    None
}
