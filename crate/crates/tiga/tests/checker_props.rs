use std::collections::BTreeMap;

use proptest::prelude::*;

use tiga::checker::{check_strict_serializability, linearizability_per_shard, CommitPath, HistoryRecord, ShardFinal, Verdict, Violation};
use tiga::store::VersionedStore;
use tiga::types::{conflicts, shard_of, ExecResult, Key, Op, OpKind, ShardId, Timestamp, Txn, TxnId};

const SHARDS: u32 = 3;

fn op() -> impl Strategy<Value = Op> {
    (0u64..6, 0u8..3, -5i64..5).prop_map(|(key, k, v)| Op {
        key,
        kind: match k {
            0 => OpKind::Read,
            1 => OpKind::Increment(v),
            _ => OpKind::Write(v),
        },
    })
}

/// Executes `ops` serially, one per 100 us slot with non-overlapping
/// intervals, and records what a correct system would report.
fn serial(all: &[Vec<Op>]) -> (Vec<HistoryRecord>, Vec<ShardFinal>) {
    let mut store = VersionedStore::new();
    let mut logs: BTreeMap<ShardId, Vec<TxnId>> = BTreeMap::new();
    let mut history = Vec::new();
    for (i, ops) in all.iter().enumerate() {
        let mut txn = Txn::new(TxnId::new(0, i as u64), ops.clone(), vec![], SHARDS);
        let start = i as i64 * 100;
        txn.t = Timestamp::new(start + 10, txn.id);
        let parts: Vec<ExecResult> = txn.shards.iter().map(|&s| store.execute(&txn, s, SHARDS)).collect();
        for &s in &txn.shards {
            logs.entry(s).or_default().push(txn.id);
        }
        history.push(HistoryRecord {
            id: txn.id,
            ops: ops.clone(),
            guard: vec![],
            shards: txn.shards.clone(),
            start_us: start,
            commit_us: start + 50,
            t: txn.t,
            result: ExecResult::merge(&txn, &parts),
            path: CommitPath::Fast,
            retries: 0,
        });
    }
    let snap = store.snapshot();
    let finals = (0..SHARDS)
        .map(|s| ShardFinal {
            shard: s,
            store: snap.iter().filter(|(k, _)| shard_of(**k, SHARDS) == s).map(|(k, v)| (*k, *v)).collect(),
            log: logs.remove(&s).unwrap_or_default(),
        })
        .collect();
    (history, finals)
}

fn histories() -> impl Strategy<Value = Vec<Vec<Op>>> {
    prop::collection::vec(prop::collection::vec(op(), 1..4), 1..25)
}

proptest! {
    #[test]
    fn serial_histories_pass(all in histories()) {
        let (h, f) = serial(&all);
        prop_assert_eq!(check_strict_serializability(&h, &f, SHARDS), Ok(Verdict::Pass));
        for (_, v) in linearizability_per_shard(&h, &f, SHARDS).unwrap() {
            prop_assert_eq!(v, Verdict::Pass);
        }
    }

    #[test]
    fn tampered_value_fails(all in histories(), pick in any::<prop::sample::Index>(), slot in any::<prop::sample::Index>()) {
        let (mut h, f) = serial(&all);
        let r = pick.get_mut(&mut h);
        let v = slot.get_mut(&mut r.result.values);
        v.1 += 1;
        let verdict = check_strict_serializability(&h, &f, SHARDS).unwrap();
        prop_assert!(matches!(verdict, Verdict::Fail(w) if w.kind == Violation::Value));
    }

    /// Moving an earlier-stamped conflicting txn to run entirely after a
    /// later-stamped one leaves no serial order that respects real time.
    #[test]
    fn realtime_inversion_fails(all in histories()) {
        let (mut h, f) = serial(&all);
        let txns: Vec<Txn> = h.iter().map(|r| r.txn(SHARDS)).collect();
        let pair = (0..txns.len())
            .flat_map(|i| (i + 1..txns.len()).map(move |j| (i, j)))
            .find(|&(i, j)| conflicts(&txns[i], &txns[j]));
        prop_assume!(pair.is_some());
        let (i, j) = pair.unwrap();
        h[i].start_us = h[j].commit_us + 1;
        h[i].commit_us = h[i].start_us + 1;
        let verdict = check_strict_serializability(&h, &f, SHARDS).unwrap();
        prop_assert!(matches!(verdict, Verdict::Fail(w) if w.kind == Violation::Realtime), "{:?}", verdict);
    }
}

#[test]
fn final_store_mismatch_fails() {
    let inc = |key: Key| Op { key, kind: OpKind::Increment(1) };
    let (h, mut f) = serial(&[vec![inc(0)], vec![inc(0), inc(1)]]);
    *f[0].store.get_mut(&0).unwrap() += 1;
    let verdict = check_strict_serializability(&h, &f, SHARDS).unwrap();
    assert!(matches!(verdict, Verdict::Fail(w) if w.kind == Violation::Value));
}

#[test]
fn log_order_against_timestamps_is_a_cycle() {
    let inc = |key: Key| Op { key, kind: OpKind::Increment(1) };
    let (h, mut f) = serial(&[vec![inc(0), inc(1)], vec![inc(0), inc(1)]]);
    f[0].log.reverse();
    let verdict = check_strict_serializability(&h, &f, SHARDS).unwrap();
    assert!(matches!(verdict, Verdict::Fail(w) if w.kind == Violation::Cycle), "{verdict:?}");
}
