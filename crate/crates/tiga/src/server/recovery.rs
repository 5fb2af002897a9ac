//! View change, timestamp verification across shards, and rejoin after a
//! restart.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::message::{Msg, Status, Timer};
use crate::sim::NodeId;
use crate::store::VersionedStore;
use crate::types::{Key, ReplicaId, ShardId, Timestamp, Txn, TxnId, ViewRecord, MS};

use super::pq::PendingQueue;
use super::{Out, Replica};

/// One replica's contribution to a view change.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VcLog {
    pub lnv: u64,
    pub log: Vec<Txn>,
    pub sync_point: u64,
}

#[derive(Debug, Default)]
pub struct ViewChangeState {
    mine: Option<VcLog>,
    /// Executed prefix of a follower store at view-change start.
    checkpoint: Option<Vec<(TxnId, Timestamp)>>,
    logs: BTreeMap<u64, BTreeMap<ReplicaId, VcLog>>,
    verifies: BTreeMap<u64, BTreeMap<ShardId, Vec<Txn>>>,
    rebuilt: Option<Vec<Txn>>,
    /// Verification entries sent to each peer shard in the current view.
    verify_out: BTreeMap<ShardId, Vec<Txn>>,
}

fn touches_on(txn: &Txn, shard: ShardId, m: u32) -> Vec<(Key, bool)> {
    txn.accesses_on(shard, m)
}

fn conflict_on(a: &Txn, b: &Txn, shard: ShardId, m: u32) -> bool {
    let bs: BTreeMap<Key, bool> = touches_on(b, shard, m).into_iter().collect();
    touches_on(a, shard, m)
        .into_iter()
        .any(|(k, aw)| bs.get(&k).is_some_and(|bw| aw || *bw))
}

/// Builds the new leader's log from f+1 view-change logs of one shard.
///
/// The synced prefix with the largest sync point among the most recent
/// normal view is kept verbatim. Beyond it, an entry survives if at least
/// `ceil(f/2)+1` of those logs hold it with the same timestamp and it does
/// not conflict with a kept entry of larger timestamp. Survivors follow in
/// timestamp order.
pub fn rebuild_log(msgs: &[VcLog], f: u32, shard: ShardId, shard_count: u32) -> Vec<Txn> {
    let Some(top) = msgs.iter().map(|v| v.lnv).max() else {
        return Vec::new();
    };
    let recent: Vec<&VcLog> = msgs.iter().filter(|v| v.lnv == top).collect();
    let best = recent
        .iter()
        .max_by_key(|v| v.sync_point)
        .expect("nonempty");
    let sp = (best.sync_point as usize).min(best.log.len());
    let mut out: Vec<Txn> = best.log[..sp].to_vec();
    let kept: BTreeSet<TxnId> = out.iter().map(|t| t.id).collect();

    let mut votes: HashMap<(TxnId, Timestamp), (usize, &Txn)> = HashMap::new();
    for v in &recent {
        let start = (v.sync_point as usize).min(v.log.len());
        let mut seen = BTreeSet::new();
        for t in &v.log[start..] {
            if kept.contains(&t.id) || !seen.insert((t.id, t.t)) {
                continue;
            }
            votes.entry((t.id, t.t)).or_insert((0, t)).0 += 1;
        }
    }
    let need = f.div_ceil(2) as usize + 1;
    let mut chosen: BTreeMap<TxnId, &Txn> = BTreeMap::new();
    for ((id, t), (n, txn)) in votes {
        if n < need {
            continue;
        }
        let slot = chosen.entry(id).or_insert(txn);
        if slot.t < t {
            *slot = txn;
        }
    }
    let mut extra: Vec<Txn> = chosen
        .into_values()
        .filter(|c| !out.iter().any(|a| a.t > c.t && conflict_on(a, c, shard, shard_count)))
        .cloned()
        .collect();
    extra.sort_by_key(|t| t.t);
    out.extend(extra);
    out
}

/// Applies peer shards' verification entries: each shared transaction takes
/// the largest timestamp any shard holds, missing ones are added, and the
/// log is re-sorted by timestamp.
pub fn merge_verified<'a>(
    log: Vec<Txn>,
    peers: impl IntoIterator<Item = &'a [Txn]>,
    shard: ShardId,
) -> Vec<Txn> {
    let mut by_id: BTreeMap<TxnId, Txn> = log.into_iter().map(|t| (t.id, t)).collect();
    for entries in peers {
        for e in entries.iter().filter(|e| e.shards.contains(&shard)) {
            match by_id.get_mut(&e.id) {
                Some(mine) if mine.t < e.t => mine.t = e.t,
                Some(_) => {}
                None => {
                    by_id.insert(e.id, e.clone());
                }
            }
        }
    }
    let mut out: Vec<Txn> = by_id.into_values().collect();
    out.sort_by_key(|t| t.t);
    out
}

/// A follower store built from `checkpoint` can be extended to `log` iff
/// every checkpointed entry keeps its timestamp and no other entry falls
/// before a conflicting checkpointed one.
pub fn checkpoint_valid(
    checkpoint: &[(TxnId, Timestamp)],
    log: &[Txn],
    shard: ShardId,
    shard_count: u32,
) -> bool {
    let ck: HashMap<TxnId, Timestamp> = checkpoint.iter().copied().collect();
    let mut found = 0;
    let mut touch_max: HashMap<Key, Timestamp> = HashMap::new();
    let mut write_max: HashMap<Key, Timestamp> = HashMap::new();
    for t in log {
        let Some(ct) = ck.get(&t.id) else { continue };
        if *ct != t.t {
            return false;
        }
        found += 1;
        for (k, w) in t.accesses_on(shard, shard_count) {
            let e = touch_max.entry(k).or_insert(t.t);
            *e = (*e).max(t.t);
            if w {
                let e = write_max.entry(k).or_insert(t.t);
                *e = (*e).max(t.t);
            }
        }
    }
    if found != ck.len() {
        return false;
    }
    log.iter().filter(|t| !ck.contains_key(&t.id)).all(|t| {
        t.accesses_on(shard, shard_count).into_iter().all(|(k, w)| {
            let map = if w { &touch_max } else { &write_max };
            map.get(&k).is_none_or(|m| *m < t.t)
        })
    })
}

impl Replica {
    fn leader_in(&self, record: &ViewRecord) -> NodeId {
        NodeId::server(self.shard, record.leader_of(self.shard, self.n()))
    }

    /// Entry point after a restart: fetch the view and the leader's state.
    pub fn begin_rejoin(&mut self, out: &mut Out) {
        self.status = Status::Recovering;
        out.send(NodeId::ViewManager(0), Msg::InquireView);
        out.timer_after(300 * MS, Timer::RejoinRetry);
    }

    pub(super) fn on_rejoin_retry(&mut self, out: &mut Out) {
        if self.status == Status::Recovering {
            self.begin_rejoin(out);
        }
    }

    pub(super) fn on_recovering_message(&mut self, _from: NodeId, msg: Msg, out: &mut Out) {
        match msg {
            Msg::ViewReply { record } => {
                let leader = self.leader_in(&record);
                if record.g_view >= self.view.g_view && leader != self.node() {
                    out.send(leader, Msg::StateTransferReq { g_view: record.g_view });
                    self.view = record;
                }
            }
            Msg::StateTransferRep { record, log, commit_point }
                if record.g_view >= self.view.g_view && self.leader_in(&record) != self.node() =>
            {
                self.install(record, log, commit_point, out);
            }
            _ => {}
        }
    }

    /// Handles view-change traffic; false when `msg` is not of that kind.
    pub(super) fn on_view_change_message(&mut self, from: NodeId, msg: Msg, out: &mut Out) -> bool {
        match msg {
            Msg::ViewChangeReq { record } => self.on_view_change_req(record, out),
            Msg::ViewChange { g_view, lnv, log, sync_point } => {
                let NodeId::Server { replica, .. } = from else { return true };
                if self.status == Status::Normal && g_view == self.view.g_view {
                    if self.is_leader() {
                        out.send(
                            from,
                            Msg::StartView {
                                record: self.view.clone(),
                                log: self.log.clone(),
                            },
                        );
                    }
                } else if g_view >= self.view.g_view {
                    self.vc
                        .logs
                        .entry(g_view)
                        .or_default()
                        .insert(replica, VcLog { lnv, log, sync_point });
                    self.try_rebuild(out);
                }
            }
            Msg::TsVerify { g_view, shard, entries } => {
                if self.status == Status::Normal && g_view == self.view.g_view {
                    if let Some(mine) = self.vc.verify_out.get(&shard) {
                        out.send(
                            from,
                            Msg::TsVerify {
                                g_view,
                                shard: self.shard,
                                entries: mine.clone(),
                            },
                        );
                    }
                } else if g_view >= self.view.g_view {
                    self.vc.verifies.entry(g_view).or_default().insert(shard, entries);
                    self.try_finalize(out);
                }
            }
            Msg::StartView { record, log } => {
                let newer = record.g_view > self.view.g_view
                    || (record.g_view == self.view.g_view && self.status == Status::ViewChange);
                if newer && self.leader_in(&record) != self.node() {
                    self.install(record, log, 0, out);
                }
            }
            Msg::StateTransferReq { .. } => {
                if self.status == Status::Normal && self.is_leader() {
                    out.send(
                        from,
                        Msg::StateTransferRep {
                            record: self.view.clone(),
                            log: self.log.clone(),
                            commit_point: self.commit_point,
                        },
                    );
                }
            }
            Msg::ViewReply { .. } | Msg::StateTransferRep { .. } => {}
            _ => return false,
        }
        true
    }

    fn on_view_change_req(&mut self, record: ViewRecord, out: &mut Out) {
        if self.status == Status::Recovering || record.g_view < self.view.g_view {
            return;
        }
        if record.g_view == self.view.g_view {
            if self.status == Status::ViewChange {
                self.send_my_log(out);
            }
            return;
        }
        let mine = match (self.status, self.vc.mine.take()) {
            (Status::ViewChange, Some(m)) => m,
            _ => self.draft_log(),
        };
        self.vc.mine = Some(mine);
        self.vc.rebuilt = None;
        self.vc.verify_out.clear();
        self.view = record;
        self.status = Status::ViewChange;
        self.tick_at = None;
        self.send_my_log(out);
        out.timer_after(self.cfg.view_change_retry_us, Timer::ViewChangeRetry);
        self.try_rebuild(out);
    }

    /// Snapshot of this replica's log for a view change; empties volatile
    /// state. Held transactions are dropped.
    fn draft_log(&mut self) -> VcLog {
        if self.store_is_checkpoint {
            self.vc.checkpoint = Some(
                self.log[..self.executed_upto]
                    .iter()
                    .map(|t| (t.id, t.t))
                    .collect(),
            );
        } else {
            self.vc.checkpoint = None;
        }
        let sync_point = self.log.len() as u64;
        let mut log = self.log.clone();
        log.append(&mut self.tail);
        log.extend(self.pq.drain().into_iter().map(|e| e.txn));
        self.held.clear();
        self.held_order.clear();
        self.pending_sync.clear();
        self.agreements.clear();
        self.orphans.clear();
        self.replies.clear();
        self.follower_sps.clear();
        VcLog { lnv: self.lnv, log, sync_point }
    }

    fn send_my_log(&mut self, out: &mut Out) {
        let Some(mine) = self.vc.mine.clone() else { return };
        let g_view = self.view.g_view;
        let leader = self.leader_in(&self.view);
        if leader == self.node() {
            self.vc.logs.entry(g_view).or_default().insert(self.replica, mine);
        } else {
            out.send(
                leader,
                Msg::ViewChange {
                    g_view,
                    lnv: mine.lnv,
                    log: mine.log,
                    sync_point: mine.sync_point,
                },
            );
        }
    }

    pub(super) fn on_view_change_retry(&mut self, out: &mut Out) {
        if self.status != Status::ViewChange {
            return;
        }
        self.send_my_log(out);
        if self.vc.rebuilt.is_some() {
            let got = self.vc.verifies.get(&self.view.g_view);
            for (&s, entries) in &self.vc.verify_out {
                if got.is_none_or(|g| !g.contains_key(&s)) {
                    out.send(
                        self.leader_node(s),
                        Msg::TsVerify {
                            g_view: self.view.g_view,
                            shard: self.shard,
                            entries: entries.clone(),
                        },
                    );
                }
            }
        }
        out.timer_after(self.cfg.view_change_retry_us, Timer::ViewChangeRetry);
    }

    fn try_rebuild(&mut self, out: &mut Out) {
        if self.status != Status::ViewChange || !self.is_leader() || self.vc.rebuilt.is_some() {
            return;
        }
        let g_view = self.view.g_view;
        let Some(logs) = self.vc.logs.get(&g_view) else { return };
        if logs.len() < self.cfg.f as usize + 1 {
            return;
        }
        let msgs: Vec<VcLog> = logs.values().cloned().collect();
        let rebuilt = rebuild_log(&msgs, self.cfg.f, self.shard, self.cfg.shard_count);
        for s in (0..self.cfg.shard_count).filter(|&s| s != self.shard) {
            let entries: Vec<Txn> = rebuilt
                .iter()
                .filter(|t| t.shards.contains(&s))
                .cloned()
                .collect();
            out.send(
                self.leader_node(s),
                Msg::TsVerify {
                    g_view,
                    shard: self.shard,
                    entries: entries.clone(),
                },
            );
            self.vc.verify_out.insert(s, entries);
        }
        self.vc.rebuilt = Some(rebuilt);
        self.try_finalize(out);
    }

    fn try_finalize(&mut self, out: &mut Out) {
        if self.status != Status::ViewChange || self.vc.rebuilt.is_none() {
            return;
        }
        let g_view = self.view.g_view;
        let peers = self.cfg.shard_count as usize - 1;
        let have = self.vc.verifies.get(&g_view).map_or(0, |v| v.len());
        if have < peers {
            return;
        }
        let rebuilt = self.vc.rebuilt.take().expect("checked");
        let verifies = self.vc.verifies.remove(&g_view).unwrap_or_default();
        let log = merge_verified(rebuilt, verifies.values().map(|v| v.as_slice()), self.shard);
        self.finalize(log, out);
    }

    fn reset_volatile(&mut self, log: Vec<Txn>) {
        self.pq = PendingQueue::new(self.shard, self.cfg.shard_count);
        self.tail.clear();
        self.held.clear();
        self.held_order.clear();
        self.pending_sync.clear();
        self.bodies.clear();
        self.agreements.clear();
        self.orphans.clear();
        self.replies.clear();
        self.follower_sps.clear();
        self.tick_at = None;
        self.last_fetch = None;
        self.in_log = log.iter().enumerate().map(|(i, t)| (t.id, i as u64)).collect();
        self.log = log;
        let entries = self.log.clone();
        for t in &entries {
            self.stamp(t);
        }
        self.rehash_all();
        let g = self.view.g_view;
        self.vc.logs.retain(|v, _| *v > g);
        self.vc.verifies.retain(|v, _| *v > g);
        self.vc.mine = None;
    }

    /// New leader installs the verified log and rebuilds its store.
    fn finalize(&mut self, log: Vec<Txn>, out: &mut Out) {
        let checkpoint = self.vc.checkpoint.take();
        self.reset_volatile(log);
        let (shard, m) = (self.shard, self.cfg.shard_count);
        let reuse = checkpoint
            .as_ref()
            .filter(|ck| checkpoint_valid(ck, &self.log, shard, m))
            .map(|ck| ck.iter().map(|(id, _)| *id).collect::<BTreeSet<_>>());
        let skip = match reuse {
            Some(ids) => ids,
            None => {
                self.store = VersionedStore::new();
                self.counters.full_rebuilds += 1;
                BTreeSet::new()
            }
        };
        for i in 0..self.log.len() {
            if skip.contains(&self.log[i].id) {
                continue;
            }
            let txn = self.log[i].clone();
            let r = self.store.execute(&txn, shard, m);
            self.counters.reexecuted += 1;
            self.results.insert(txn.id, r);
        }
        self.executed_upto = self.log.len();
        self.store_is_checkpoint = false;
        self.commit_point = 0;
        self.status = Status::Normal;
        self.lnv = self.view.g_view;
        let start = Msg::StartView {
            record: self.view.clone(),
            log: self.log.clone(),
        };
        for f in self.followers() {
            out.send(f, start.clone());
        }
        self.dirty = true;
        self.schedule_tick(out);
    }

    /// Follower adopts a leader's log; its store restarts from empty and
    /// catches up through the commit point.
    fn install(&mut self, record: ViewRecord, log: Vec<Txn>, commit_point: u64, out: &mut Out) {
        self.view = record;
        self.reset_volatile(log);
        self.vc.checkpoint = None;
        self.vc.rebuilt = None;
        self.vc.verify_out.clear();
        self.store = VersionedStore::new();
        self.store_is_checkpoint = true;
        self.executed_upto = 0;
        self.commit_point = commit_point.min(self.log.len() as u64);
        self.status = Status::Normal;
        self.lnv = self.view.g_view;
        self.execute_committed();
        self.schedule_tick(out);
    }
}
