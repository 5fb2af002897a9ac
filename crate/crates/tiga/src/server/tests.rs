use super::*;
use crate::types::{Op, OpKind};

fn record(m: u32, mode: Mode) -> ViewRecord {
    ViewRecord {
        g_view: 0,
        g_vec: vec![0; m as usize],
        mode,
    }
}

fn replica(shard: ShardId, r: ReplicaId, m: u32, mode: Mode) -> Replica {
    let cfg = ServerConfig {
        shard_count: m,
        ..ServerConfig::default()
    };
    Replica::new(cfg, shard, r, record(m, mode))
}

fn txn(seq: u64, t: i64, ops: Vec<Op>, m: u32) -> Txn {
    let mut x = Txn::new(TxnId::new(0, seq), ops, vec![], m);
    x.t = Timestamp::new(t, x.id);
    x
}

fn read(key: Key) -> Op {
    Op { key, kind: OpKind::Read }
}

fn inc(key: Key) -> Op {
    Op { key, kind: OpKind::Increment(1) }
}

fn write(key: Key) -> Op {
    Op { key, kind: OpKind::Write(1) }
}

fn coord() -> NodeId {
    NodeId::Coordinator(0)
}

fn out(now: Micros) -> Out {
    Outbox::new(now, now)
}

fn tick(r: &mut Replica, now: Micros) -> Out {
    let mut o = out(now);
    r.on_timer(Timer::Tick, &mut o);
    o
}

fn submit(r: &mut Replica, x: Txn, now: Micros) -> Out {
    let mut o = out(now);
    r.on_message(coord(), Msg::Submit { txn: x }, &mut o);
    o
}

fn replies(o: &Out) -> Vec<Reply> {
    o.sends()
        .iter()
        .filter_map(|(_, m)| match m {
            Msg::Reply(r) => Some(r.clone()),
            _ => None,
        })
        .collect()
}

fn count(o: &Out, tag: &str) -> usize {
    use crate::sim::Tag;
    o.sends().iter().filter(|(_, m)| m.tag() == tag).count()
}

fn stamps(entries: &[(Key, i64)]) -> HashMap<Key, Timestamp> {
    entries
        .iter()
        .map(|&(k, t)| (k, Timestamp::new(t, TxnId::new(9, 9))))
        .collect()
}

#[test]
fn empty_maps_accept_everything() {
    let x = txn(1, 1, vec![write(1), read(2)], 1);
    assert!(conflict_detection(&x, &HashMap::new(), &HashMap::new(), 0, 1));
}

/// Every (access, map) pair of the conflict matrix: reads only conflict with
/// released writes; writes conflict with both.
#[test]
fn conflict_matrix() {
    let later = stamps(&[(1, 120)]);
    let none = HashMap::new();
    let r = txn(1, 100, vec![read(1)], 1);
    let w = txn(2, 100, vec![write(1)], 1);
    assert!(conflict_detection(&r, &later, &none, 0, 1));
    assert!(!conflict_detection(&r, &none, &later, 0, 1));
    assert!(!conflict_detection(&w, &later, &none, 0, 1));
    assert!(!conflict_detection(&w, &none, &later, 0, 1));
}

#[test]
fn later_timestamp_accepted() {
    let x = txn(1, 100, vec![read(1)], 1);
    assert!(conflict_detection(&x, &HashMap::new(), &stamps(&[(1, 90)]), 0, 1));
}

#[test]
fn leader_bumps_stale_timestamp() {
    let mut l = replica(0, 0, 1, Mode::Detective);
    l.wmap = stamps(&[(1, 90)]);
    submit(&mut l, txn(1, 80, vec![read(1)], 1), 85);
    let e = l.pq.get(TxnId::new(0, 1)).expect("queued");
    assert!(e.txn.t.time_us > 90);
    assert_eq!(l.counters.bumps, 1);
}

#[test]
fn follower_holds_stale_timestamp() {
    let mut f = replica(0, 1, 1, Mode::Detective);
    f.wmap = stamps(&[(1, 90)]);
    submit(&mut f, txn(1, 80, vec![read(1)], 1), 85);
    assert!(f.pq.is_empty());
    assert!(f.held.contains_key(&TxnId::new(0, 1)));
}

#[test]
fn single_shard_release_replies_and_syncs() {
    let mut l = replica(0, 0, 1, Mode::Detective);
    submit(&mut l, txn(1, 10, vec![inc(1)], 1), 0);
    assert!(replies(&tick(&mut l, 9)).is_empty());
    let o = tick(&mut l, 10);
    let rs = replies(&o);
    assert_eq!(rs.len(), 1);
    assert_eq!(rs[0].result.as_ref().unwrap().values, vec![(1, 0)]);
    assert_eq!(count(&o, "notice"), 0);
    assert_eq!(count(&o, "log-sync"), 2);
    assert_eq!(l.log().len(), 1);
}

#[test]
fn duplicate_submit_answers_from_cache() {
    let mut l = replica(0, 0, 1, Mode::Detective);
    let x = txn(1, 10, vec![inc(1)], 1);
    submit(&mut l, x.clone(), 0);
    let first = replies(&tick(&mut l, 10));
    let again = replies(&submit(&mut l, x, 20));
    assert_eq!(again.len(), 1);
    assert_eq!(again[0].result, first[0].result);
    assert_eq!(l.counters.executions, 1);
}

fn two_leaders(mode: Mode) -> (Replica, Replica) {
    (replica(0, 0, 2, mode), replica(1, 0, 2, mode))
}

fn notices(o: &Out) -> Vec<(NodeId, Msg)> {
    o.sends()
        .iter()
        .filter(|(_, m)| matches!(m, Msg::Notice { .. }))
        .cloned()
        .collect()
}

fn deliver(to: &mut Replica, from: &Replica, msgs: Vec<(NodeId, Msg)>, now: Micros) -> Out {
    let mut o = out(now);
    for (dst, m) in msgs {
        if dst == to.node() {
            to.on_message(from.node(), m, &mut o);
        }
    }
    o
}

#[test]
fn equal_timestamps_agree_in_one_exchange() {
    let (mut a, mut b) = two_leaders(Mode::Detective);
    let x = txn(1, 7, vec![inc(0), inc(1)], 2);
    submit(&mut a, x.clone(), 0);
    submit(&mut b, x, 0);
    let oa = tick(&mut a, 7);
    let ob = tick(&mut b, 7);
    deliver(&mut b, &a, notices(&oa), 8);
    deliver(&mut a, &b, notices(&ob), 8);
    assert_eq!(a.log().len(), 1);
    assert_eq!(b.log().len(), 1);
    assert_eq!(a.counters.case2 + a.counters.case3, 0);
}

#[test]
fn smaller_timestamp_revokes_and_repositions() {
    let (mut a, mut b) = two_leaders(Mode::Detective);
    let x = txn(1, 7, vec![inc(0), inc(1)], 2);
    let mut y = x.clone();
    y.t = Timestamp::new(5, x.id);
    submit(&mut a, x, 0);
    submit(&mut b, y, 0);
    let oa = tick(&mut a, 7);
    let ob = tick(&mut b, 5);
    // b learns 7, revokes its execution at 5 and waits for 7.
    let ob2 = deliver(&mut b, &a, notices(&oa), 8);
    assert_eq!(b.counters.case3, 1);
    assert_eq!(b.counters.revokes, 1);
    assert_eq!(b.store.version_count(), 0);
    assert!(notices(&ob2).is_empty());
    // a hears 5, keeps 7 and asks for confirmation.
    let oa2 = deliver(&mut a, &b, notices(&ob), 8);
    assert_eq!(a.counters.case2, 1);
    assert_eq!(a.log().len(), 0);
    deliver(&mut b, &a, notices(&oa2), 9);
    let ob3 = tick(&mut b, 9);
    let re = replies(&ob3);
    assert_eq!(re.len(), 1);
    assert_eq!(re[0].t.time_us, 7);
    assert_eq!(b.log().len(), 1);
    deliver(&mut a, &b, notices(&ob3), 10);
    assert_eq!(a.log().len(), 1);
    assert_eq!(a.log()[0].t, b.log()[0].t);
}

#[test]
fn completed_leader_answers_a_lost_notice() {
    let (mut a, mut b) = two_leaders(Mode::Detective);
    let x = txn(1, 7, vec![inc(0), inc(1)], 2);
    submit(&mut a, x.clone(), 0);
    submit(&mut b, x.clone(), 0);
    let _lost = tick(&mut a, 7);
    let ob = tick(&mut b, 7);
    deliver(&mut a, &b, notices(&ob), 8);
    assert_eq!(a.log().len(), 1);
    assert_eq!(b.log().len(), 0);
    let mut retry = out(300);
    b.on_timer(Timer::NoticeRetry(x.id), &mut retry);
    let answer = deliver(&mut a, &b, notices(&retry), 301);
    assert!(matches!(notices(&answer)[..], [(_, Msg::Notice { settled: true, .. })]));
    let last = deliver(&mut b, &a, notices(&answer), 302);
    assert_eq!(b.log().len(), 1);
    assert!(deliver(&mut a, &b, notices(&last), 303).sends().is_empty());
}

/// The leaders hold different values for `y`, so each orders the pair
/// differently and each waits on the other. A resubmission makes the
/// leader with the larger value publish it, which untangles the pair.
#[test]
fn crossed_orders_resolve_on_resubmission() {
    let (mut a, mut b) = two_leaders(Mode::Detective);
    let x = txn(1, 10, vec![inc(0), inc(1)], 2);
    let ya = txn(2, 20, vec![inc(0), inc(1)], 2);
    let yb = txn(2, 5, vec![inc(0), inc(1)], 2);
    submit(&mut a, x.clone(), 0);
    submit(&mut a, ya.clone(), 0);
    submit(&mut b, x.clone(), 0);
    submit(&mut b, yb, 0);
    let oa = tick(&mut a, 12);
    let ob = tick(&mut b, 12);
    deliver(&mut b, &a, notices(&oa), 13);
    deliver(&mut a, &b, notices(&ob), 13);
    assert_eq!(a.log().len() + b.log().len(), 0);
    let oa = submit(&mut a, ya, 400);
    assert_eq!(notices(&oa).len(), 1);
    deliver(&mut b, &a, notices(&oa), 401);
    assert_eq!(b.counters.revokes, 1);
    let ob = tick(&mut b, 401);
    deliver(&mut a, &b, notices(&ob), 402);
    let oa = tick(&mut a, 402);
    deliver(&mut b, &a, notices(&oa), 403);
    let ob = tick(&mut b, 403);
    deliver(&mut a, &b, notices(&ob), 404);
    let ids = |r: &Replica| r.log().iter().map(|t| (t.id, t.t)).collect::<Vec<_>>();
    assert_eq!(a.log().len(), 2);
    assert_eq!(ids(&a), ids(&b));
    assert_eq!(a.log()[0].id, x.id);
}

#[test]
fn preventive_replies_after_agreement() {
    let (mut a, mut b) = two_leaders(Mode::Preventive);
    let x = txn(1, 7, vec![inc(0), inc(1)], 2);
    submit(&mut a, x.clone(), 0);
    submit(&mut b, x, 0);
    let oa = tick(&mut a, 7);
    assert!(replies(&oa).is_empty());
    let ob = tick(&mut b, 7);
    let done = deliver(&mut a, &b, notices(&ob), 8);
    assert_eq!(replies(&done).len(), 1);
    deliver(&mut b, &a, notices(&oa), 8);
    assert_eq!(b.counters.revokes, 0);
}

#[test]
fn head_blocks_conflicting_successor() {
    let (mut a, _) = two_leaders(Mode::Detective);
    let x = txn(1, 7, vec![inc(0), inc(1)], 2);
    let y = txn(2, 8, vec![read(0)], 2);
    submit(&mut a, x, 0);
    submit(&mut a, y, 0);
    let o = tick(&mut a, 9);
    assert_eq!(replies(&o).len(), 1);
    assert!(a.pq.contains(TxnId::new(0, 2)));
}

#[test]
fn single_shard_sends_no_agreement_messages() {
    let (mut a, _) = two_leaders(Mode::Detective);
    submit(&mut a, txn(1, 7, vec![inc(0)], 2), 0);
    assert_eq!(count(&tick(&mut a, 7), "notice"), 0);
}

#[test]
fn unknown_transaction_is_fetched_from_notifier() {
    let (mut a, mut b) = two_leaders(Mode::Detective);
    let x = txn(1, 7, vec![inc(0), inc(1)], 2);
    submit(&mut a, x, 0);
    let oa = tick(&mut a, 7);
    let ob = deliver(&mut b, &a, notices(&oa), 8);
    let wait = ob
        .timers()
        .iter()
        .find(|(_, t)| matches!(t, Timer::FetchCheck(_)))
        .expect("fetch armed")
        .0;
    let mut o = out(wait);
    b.on_timer(Timer::FetchCheck(TxnId::new(0, 1)), &mut o);
    assert_eq!(count(&o, "fetch-txn"), 1);
    let mut o = out(wait);
    let body = a.find_body(TxnId::new(0, 1)).unwrap();
    b.on_message(a.node(), Msg::TxnBody { txn: body }, &mut o);
    let ob = tick(&mut b, wait + MS);
    deliver(&mut a, &b, notices(&ob), wait + MS);
    assert_eq!(a.log().len(), 1);
}

fn sync(r: &mut Replica, pos: u64, id: TxnId, t: i64, now: Micros) -> Out {
    let mut o = out(now);
    r.on_message(
        NodeId::server(0, 0),
        Msg::LogSync {
            g_view: 0,
            l_view: 0,
            pos,
            id,
            t: Timestamp::new(t, id),
        },
        &mut o,
    );
    o
}

#[test]
fn held_entry_is_restamped_by_leader() {
    let mut f = replica(0, 1, 1, Mode::Detective);
    f.wmap = stamps(&[(1, 6)]);
    submit(&mut f, txn(1, 5, vec![inc(1)], 1), 0);
    assert!(f.held.contains_key(&TxnId::new(0, 1)));
    let o = sync(&mut f, 0, TxnId::new(0, 1), 7, 8);
    assert_eq!(f.sync_point(), 1);
    assert_eq!(f.log()[0].t.time_us, 7);
    let rs = replies(&o);
    assert_eq!(rs.len(), 1);
    assert_eq!(rs[0].kind, ReplyKind::Slow);
}

#[test]
fn released_entry_rehashed_on_sync() {
    let mut f = replica(0, 1, 1, Mode::Detective);
    submit(&mut f, txn(1, 5, vec![inc(1)], 1), 0);
    tick(&mut f, 5);
    assert_eq!(f.tail.len(), 1);
    sync(&mut f, 0, TxnId::new(0, 1), 7, 8);
    let mut expect = LogHash::default();
    expect.toggle(entry_digest(&f.log()[0]));
    assert!(f.tail.is_empty());
    assert_eq!(f.log_hash(), expect.value());
}

#[test]
fn missing_entry_is_fetched_from_leader() {
    let mut f = replica(0, 1, 1, Mode::Detective);
    let o = sync(&mut f, 0, TxnId::new(0, 1), 7, 8);
    assert_eq!(count(&o, "sync-fetch"), 1);
    let mut o = out(9);
    f.on_message(
        NodeId::server(0, 0),
        Msg::SyncFill {
            g_view: 0,
            entries: vec![(0, txn(1, 7, vec![inc(1)], 1))],
        },
        &mut o,
    );
    assert_eq!(f.sync_point(), 1);
}

#[test]
fn stale_unsynced_entry_is_dropped() {
    let mut f = replica(0, 1, 1, Mode::Detective);
    submit(&mut f, txn(1, 5, vec![inc(2)], 1), 0);
    tick(&mut f, 5);
    let base = f.log_hash();
    assert_ne!(base, Hash160::ZERO);
    submit(&mut f, txn(2, 2_000 * MS, vec![inc(1)], 1), 0);
    sync(&mut f, 0, TxnId::new(0, 2), 2_000 * MS, 2_000 * MS);
    assert!(f.tail.is_empty());
    let mut expect = LogHash::default();
    expect.toggle(entry_digest(&f.log()[0]));
    assert_eq!(f.log_hash(), expect.value());
}

#[test]
fn commit_point_is_f_plus_one_cover() {
    let mut l = replica(0, 0, 1, Mode::Detective);
    l.log = (0..10).map(|i| txn(i, i as i64, vec![inc(1)], 1)).collect();
    l.advance_commit_point();
    assert_eq!(l.commit_point, 0);
    l.follower_sps.insert(1, 8);
    l.follower_sps.insert(2, 3);
    l.advance_commit_point();
    assert_eq!(l.commit_point, 8);
    l.follower_sps.insert(1, 2);
    l.advance_commit_point();
    assert_eq!(l.commit_point, 8);
}

#[test]
fn follower_executes_committed_prefix_in_log_order() {
    let mut f = replica(0, 1, 1, Mode::Detective);
    for i in 0..3u64 {
        let x = txn(i, 10 + i as i64, vec![inc(1)], 1);
        let mut o = out(20);
        f.on_message(
            NodeId::server(0, 0),
            Msg::SyncFill { g_view: 0, entries: vec![(i, x)] },
            &mut o,
        );
    }
    let mut o = out(30);
    f.on_message(
        NodeId::server(0, 0),
        Msg::CommitPoint { g_view: 0, commit_point: 2, log_len: 3 },
        &mut o,
    );
    assert_eq!(f.store.latest(1), 2);
    assert_eq!(f.result_of(TxnId::new(0, 1)).unwrap().values, vec![(1, 1)]);
}
