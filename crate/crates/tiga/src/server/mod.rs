//! Shard replica: conflict detection, timestamp-ordered release, optimistic
//! execution with revoke, inter-leader timestamp agreement, fast replies and
//! log synchronization. View change and rejoin live in [`recovery`].

pub mod pq;
pub mod recovery;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::hash::{entry_digest, Hash160, LogHash, PerKeyHashes};
use crate::message::{Msg, Reply, ReplyKind, Status, Timer};
use crate::sim::{NodeId, Outbox};
use crate::store::VersionedStore;
use crate::types::{
    replicas, ExecResult, Key, Micros, Mode, ReplicaId, ShardId, Timestamp, Txn, TxnId,
    ViewRecord, MS,
};

use pq::{PendingQueue, Phase};
use recovery::ViewChangeState;

pub type Out = Outbox<Msg, Timer>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashMode {
    /// XOR over every log entry.
    #[default]
    WholeLog,
    /// Per-key accumulators; read-only transactions are not hashed.
    PerKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub f: u32,
    pub shard_count: u32,
    pub tick_us: Micros,
    pub hash_mode: HashMode,
    /// Followers answer coordinator inquiries instead of sending slow replies.
    pub batched_inquiry: bool,
    /// Test hook: a leader holding the agreed timestamp releases after the
    /// first round without waiting for the others to confirm.
    pub disable_round2: bool,
    /// Wait before fetching an unknown transaction named in a notification.
    pub fetch_timeout_us: Micros,
    pub notice_retry_us: Micros,
    pub sync_report_us: Micros,
    pub heartbeat_us: Micros,
    pub hold_cap: usize,
    /// Silence after which a coordinator is presumed dead.
    pub coord_timeout_us: Micros,
    pub view_change_retry_us: Micros,
    pub recovery_coordinator: u32,
    /// Unsynced follower entries this far behind the synced log are dropped.
    pub tail_grace_us: Micros,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            f: 1,
            shard_count: 1,
            tick_us: MS,
            hash_mode: HashMode::WholeLog,
            batched_inquiry: false,
            disable_round2: false,
            fetch_timeout_us: 120 * MS,
            notice_retry_us: 250 * MS,
            sync_report_us: 20 * MS,
            heartbeat_us: 50 * MS,
            hold_cap: 10_000,
            coord_timeout_us: 1_000 * MS,
            view_change_retry_us: 200 * MS,
            recovery_coordinator: u32::MAX,
            tail_grace_us: 1_000 * MS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerCounters {
    pub executions: u64,
    pub revokes: u64,
    pub case2: u64,
    pub case3: u64,
    pub bumps: u64,
    pub held: u64,
    pub fetches: u64,
    pub reexecuted: u64,
    pub full_rebuilds: u64,
}

/// Per-transaction agreement bookkeeping at a leader: the largest timestamp
/// heard from each participating shard.
#[derive(Clone, Debug, Default)]
struct Agreement {
    q: BTreeMap<ShardId, Timestamp>,
    agreed: Option<Timestamp>,
    rebroadcast: bool,
}

pub struct Replica {
    pub cfg: ServerConfig,
    pub shard: ShardId,
    pub replica: ReplicaId,
    pub status: Status,
    pub view: ViewRecord,
    /// Last global view in which this replica was normal.
    pub lnv: u64,
    pub(crate) pq: PendingQueue,
    /// Rejected at a follower; waits for log synchronization.
    held: HashMap<TxnId, Txn>,
    held_order: VecDeque<TxnId>,
    rmap: HashMap<Key, Timestamp>,
    wmap: HashMap<Key, Timestamp>,
    /// Leader: the whole log. Follower: the prefix synced with the leader.
    pub(crate) log: Vec<Txn>,
    in_log: HashMap<TxnId, u64>,
    /// Follower entries released locally but not yet synced, release order.
    tail: Vec<Txn>,
    pub commit_point: u64,
    log_hash: LogHash,
    key_hash: PerKeyHashes,
    pub store: VersionedStore,
    /// Follower: prefix of `log` applied to `store`.
    executed_upto: usize,
    /// `store` holds exactly the executed prefix (no optimistic effects).
    store_is_checkpoint: bool,
    results: HashMap<TxnId, ExecResult>,
    agreements: HashMap<TxnId, Agreement>,
    orphans: HashMap<TxnId, BTreeSet<NodeId>>,
    replies: HashMap<TxnId, Reply>,
    reply_to: HashMap<TxnId, NodeId>,
    follower_sps: BTreeMap<ReplicaId, u64>,
    pending_sync: BTreeMap<u64, (TxnId, Timestamp)>,
    bodies: HashMap<TxnId, Txn>,
    last_fetch: Option<(u64, Micros)>,
    tick_at: Option<Micros>,
    dirty: bool,
    coord_heard: BTreeMap<u32, Micros>,
    takeover_sent: HashMap<TxnId, Micros>,
    pub(crate) vc: ViewChangeState,
    pub counters: ServerCounters,
}

impl Replica {
    pub fn new(cfg: ServerConfig, shard: ShardId, replica: ReplicaId, view: ViewRecord) -> Self {
        let m = cfg.shard_count;
        Self {
            cfg,
            shard,
            replica,
            status: Status::Normal,
            lnv: view.g_view,
            view,
            pq: PendingQueue::new(shard, m),
            held: HashMap::new(),
            held_order: VecDeque::new(),
            rmap: HashMap::new(),
            wmap: HashMap::new(),
            log: Vec::new(),
            in_log: HashMap::new(),
            tail: Vec::new(),
            commit_point: 0,
            log_hash: LogHash::default(),
            key_hash: PerKeyHashes::default(),
            store: VersionedStore::new(),
            executed_upto: 0,
            store_is_checkpoint: true,
            results: HashMap::new(),
            agreements: HashMap::new(),
            orphans: HashMap::new(),
            replies: HashMap::new(),
            reply_to: HashMap::new(),
            follower_sps: BTreeMap::new(),
            pending_sync: BTreeMap::new(),
            bodies: HashMap::new(),
            last_fetch: None,
            tick_at: None,
            dirty: false,
            coord_heard: BTreeMap::new(),
            takeover_sent: HashMap::new(),
            vc: ViewChangeState::default(),
            counters: ServerCounters::default(),
        }
    }

    pub fn node(&self) -> NodeId {
        NodeId::server(self.shard, self.replica)
    }

    fn n(&self) -> u32 {
        replicas(self.cfg.f)
    }

    pub fn is_leader(&self) -> bool {
        self.view.leader_of(self.shard, self.n()) == self.replica
    }

    pub fn l_view(&self) -> u64 {
        self.view.l_view(self.shard)
    }

    fn leader_node(&self, shard: ShardId) -> NodeId {
        NodeId::server(shard, self.view.leader_of(shard, self.n()))
    }

    fn followers(&self) -> Vec<NodeId> {
        let leader = self.view.leader_of(self.shard, self.n());
        (0..self.n())
            .filter(|&r| r != leader)
            .map(|r| NodeId::server(self.shard, r))
            .collect()
    }

    pub fn log(&self) -> &[Txn] {
        &self.log
    }

    pub fn sync_point(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn log_hash(&self) -> Hash160 {
        self.log_hash.value()
    }

    pub fn pq_len(&self) -> usize {
        self.pq.len()
    }

    pub fn result_of(&self, id: TxnId) -> Option<&ExecResult> {
        self.results.get(&id)
    }

    /// One-line summary of what this replica knows about `id`.
    pub fn describe_txn(&self, id: TxnId) -> String {
        let mut parts = vec![format!("{} {:?} g{}", self.node(), self.status, self.view.g_view)];
        if let Some(e) = self.pq.get(id) {
            let head = self.pq.iter().next().map(|h| (h.txn.id, h.txn.t));
            parts.push(format!("pq t={:?} phase={:?} head={head:?}", e.txn.t, e.phase));
        }
        if let Some(p) = self.in_log.get(&id) {
            parts.push(format!("log@{p} t={:?}", self.log[*p as usize].t));
        }
        if self.held.contains_key(&id) {
            parts.push("held".into());
        }
        if self.tail.iter().any(|t| t.id == id) {
            parts.push("tail".into());
        }
        if let Some(a) = self.agreements.get(&id) {
            parts.push(format!("agreement q={:?} agreed={:?}", a.q, a.agreed));
        }
        if self.orphans.contains_key(&id) {
            parts.push("orphan".into());
        }
        parts.join(" | ")
    }

    /// Node startup: periodic timers.
    pub fn start(&mut self, out: &mut Out) {
        out.timer_after(self.cfg.heartbeat_us, Timer::Heartbeat);
        out.timer_after(self.cfg.sync_report_us, Timer::SyncReport);
        out.timer_after(200 * MS, Timer::CoordCheck);
        self.send_heartbeat(out);
    }

    fn send_heartbeat(&self, out: &mut Out) {
        out.send(
            NodeId::ViewManager(0),
            Msg::Heartbeat {
                g_view: self.view.g_view,
                status: self.status,
            },
        );
    }

    fn reply_target(&self, id: TxnId) -> NodeId {
        self.reply_to
            .get(&id)
            .copied()
            .unwrap_or(NodeId::Coordinator(id.coord))
    }

    fn local_keys(&self, txn: &Txn) -> Vec<Key> {
        txn.accesses_on(self.shard, self.cfg.shard_count)
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    // ----- hashing -------------------------------------------------------

    fn hash_in(&mut self, txn: &Txn) {
        self.log_hash.toggle(entry_digest(txn));
        self.key_hash.toggle(txn);
    }

    fn hash_out(&mut self, txn: &Txn) {
        self.hash_in(txn);
    }

    /// Reply hash for `txn` before it is hashed into the log.
    fn hash_before(&self, txn: &Txn) -> Hash160 {
        match self.cfg.hash_mode {
            HashMode::WholeLog => self.log_hash.value(),
            HashMode::PerKey => self.key_hash.reply_hash(txn, &self.local_keys(txn), true),
        }
    }

    pub(crate) fn rehash_all(&mut self) {
        self.log_hash = LogHash::default();
        self.key_hash = PerKeyHashes::default();
        let entries: Vec<Txn> = self.log.iter().chain(self.tail.iter()).cloned().collect();
        for t in &entries {
            self.hash_in(t);
        }
    }

    // ----- conflict detection ------------------------------------------

    pub fn conflict_free(&self, txn: &Txn) -> bool {
        conflict_detection(txn, &self.rmap, &self.wmap, self.shard, self.cfg.shard_count)
    }

    /// Largest recorded stamp the transaction must exceed.
    fn max_conflicting_stamp(&self, txn: &Txn) -> Option<Timestamp> {
        txn.accesses_on(self.shard, self.cfg.shard_count)
            .into_iter()
            .flat_map(|(k, written)| {
                let w = self.wmap.get(&k).copied();
                let r = if written { self.rmap.get(&k).copied() } else { None };
                [w, r]
            })
            .flatten()
            .max()
    }

    pub(crate) fn stamp(&mut self, txn: &Txn) {
        for (k, written) in txn.accesses_on(self.shard, self.cfg.shard_count) {
            let map = if written { &mut self.wmap } else { &mut self.rmap };
            let slot = map.entry(k).or_insert(txn.t);
            if *slot < txn.t {
                *slot = txn.t;
            }
            // Increments read and write; record the read side too.
            if written && txn.read_set().contains(&k) {
                let r = self.rmap.entry(k).or_insert(txn.t);
                if *r < txn.t {
                    *r = txn.t;
                }
            }
        }
    }

    // ----- tick scheduling ---------------------------------------------

    fn grid_after(&self, now: Micros) -> Micros {
        (now.div_euclid(self.cfg.tick_us) + 1) * self.cfg.tick_us
    }

    fn grid_ceil(&self, at: Micros) -> Micros {
        let tick = self.cfg.tick_us;
        at.div_euclid(tick) * tick + if at.rem_euclid(tick) == 0 { 0 } else { tick }
    }

    fn arm_tick(&mut self, out: &mut Out, at: Micros) {
        if self.tick_at.is_some_and(|x| x >= out.now() && x <= at) {
            return;
        }
        self.tick_at = Some(at);
        out.timer_at(at, Timer::Tick);
    }

    /// Keeps ticks firing exactly where a periodic tick would release work.
    fn schedule_tick(&mut self, out: &mut Out) {
        if self.status != Status::Normal {
            return;
        }
        let next = self.grid_after(out.now());
        if std::mem::take(&mut self.dirty) {
            self.arm_tick(out, next);
        } else if let Some(t) = self.pq.next_queued() {
            let at = self.grid_ceil(t).max(next);
            self.arm_tick(out, at);
        }
    }

    // ----- entry points ------------------------------------------------

    pub fn on_message(&mut self, from: NodeId, msg: Msg, out: &mut Out) {
        match self.status {
            Status::Recovering => {
                self.on_recovering_message(from, msg, out);
                return;
            }
            Status::ViewChange => {
                if !self.on_view_change_message(from, msg.clone(), out) {
                    if let Msg::Probe { send_local } = msg {
                        self.on_probe(from, send_local, out);
                    }
                }
                return;
            }
            Status::Normal => {}
        }
        match msg {
            Msg::Submit { txn } => self.on_submit(from, txn, out),
            Msg::Notice { g_view, id, shard, t, settled } => self.on_notice(from, g_view, id, shard, t, settled, out),
            Msg::FetchTxn { id } => self.on_fetch(from, id, out),
            Msg::TxnBody { txn } => self.on_body(txn, out),
            Msg::LogSync { g_view, l_view, pos, id, t } => {
                if g_view == self.view.g_view && l_view == self.l_view() && !self.is_leader() {
                    if pos >= self.log.len() as u64 {
                        self.pending_sync.insert(pos, (id, t));
                    }
                    self.apply_syncs(out);
                }
            }
            Msg::SyncFetch { g_view, from: start, upto } => {
                if g_view == self.view.g_view && self.is_leader() {
                    let end = (upto as usize).min(self.log.len()).min(start as usize + 64);
                    let entries: Vec<(u64, Txn)> = (start as usize..end)
                        .map(|p| (p as u64, self.log[p].clone()))
                        .collect();
                    if !entries.is_empty() {
                        out.send(from, Msg::SyncFill { g_view, entries });
                    }
                }
            }
            Msg::SyncFill { g_view, entries } => {
                if g_view == self.view.g_view && !self.is_leader() {
                    for (pos, txn) in entries {
                        if pos >= self.log.len() as u64 {
                            self.pending_sync.insert(pos, (txn.id, txn.t));
                            self.bodies.insert(txn.id, txn);
                        }
                    }
                    self.apply_syncs(out);
                }
            }
            Msg::SyncReport { g_view, sync_point } => {
                if g_view == self.view.g_view && self.is_leader() {
                    if let NodeId::Server { replica, .. } = from {
                        let e = self.follower_sps.entry(replica).or_insert(0);
                        *e = (*e).max(sync_point);
                        self.advance_commit_point();
                    }
                }
            }
            Msg::CommitPoint { g_view, commit_point, log_len } => {
                if g_view == self.view.g_view && !self.is_leader() {
                    self.on_commit_point(commit_point, log_len, out);
                }
            }
            Msg::SyncInquiry => {
                if !self.is_leader() {
                    out.send(
                        from,
                        Msg::SyncInquiryReply {
                            g_view: self.view.g_view,
                            l_view: self.l_view(),
                            shard: self.shard,
                            replica: self.replica,
                            sync_point: self.sync_point(),
                        },
                    );
                }
            }
            Msg::Probe { send_local } => self.on_probe(from, send_local, out),
            other => {
                self.on_view_change_message(from, other, out);
            }
        }
        self.schedule_tick(out);
    }

    pub fn on_timer(&mut self, timer: Timer, out: &mut Out) {
        match timer {
            Timer::Heartbeat => {
                self.send_heartbeat(out);
                out.timer_after(self.cfg.heartbeat_us, Timer::Heartbeat);
                return;
            }
            Timer::RejoinRetry => {
                self.on_rejoin_retry(out);
                return;
            }
            Timer::ViewChangeRetry => {
                self.on_view_change_retry(out);
                return;
            }
            _ => {}
        }
        if self.status != Status::Normal {
            // Periodic timers keep running so that they resume afterwards.
            match timer {
                Timer::SyncReport => out.timer_after(self.cfg.sync_report_us, Timer::SyncReport),
                Timer::CoordCheck => out.timer_after(200 * MS, Timer::CoordCheck),
                _ => {}
            }
            return;
        }
        match timer {
            Timer::Tick => {
                if self.tick_at.is_some_and(|x| x <= out.now()) {
                    self.tick_at = None;
                }
                self.on_tick(out);
            }
            Timer::SyncReport => {
                if self.is_leader() {
                    self.advance_commit_point();
                    let msg = Msg::CommitPoint {
                        g_view: self.view.g_view,
                        commit_point: self.commit_point,
                        log_len: self.log.len() as u64,
                    };
                    for f in self.followers() {
                        out.send(f, msg.clone());
                    }
                } else {
                    out.send(
                        self.leader_node(self.shard),
                        Msg::SyncReport {
                            g_view: self.view.g_view,
                            sync_point: self.sync_point(),
                        },
                    );
                }
                out.timer_after(self.cfg.sync_report_us, Timer::SyncReport);
            }
            Timer::FetchCheck(id) => self.on_fetch_check(id, out),
            Timer::NoticeRetry(id) => self.on_notice_retry(id, out),
            Timer::CoordCheck => {
                self.check_coordinators(out);
                out.timer_after(200 * MS, Timer::CoordCheck);
            }
            _ => {}
        }
        self.schedule_tick(out);
    }

    fn on_probe(&mut self, from: NodeId, send_local: Micros, out: &mut Out) {
        if let NodeId::Coordinator(c) = from {
            self.coord_heard.insert(c, out.now());
        }
        out.send(
            from,
            Msg::ProbeAck {
                send_local,
                recv_local: out.now(),
            },
        );
    }

    // ----- receiving transactions -----------------------------------------

    fn on_submit(&mut self, from: NodeId, mut txn: Txn, out: &mut Out) {
        let id = txn.id;
        self.reply_to.insert(id, from);
        if let NodeId::Coordinator(c) = from {
            self.coord_heard.insert(c, out.now());
        }
        if self.in_log.contains_key(&id) {
            self.resend_final_reply(id, out);
            return;
        }
        if let Some(r) = self.replies.get(&id) {
            out.send(from, Msg::Reply(r.clone()));
            return;
        }
        if let Some(e) = self.pq.get(id) {
            // A retry means the coordinator is stuck. A queued copy may be
            // waiting on a peer whose order disagrees with ours, so publish
            // the value this leader holds.
            if self.is_leader() && e.phase == Phase::Queued && e.txn.is_multi_shard() {
                let txn = e.txn.clone();
                self.broadcast_notice(&txn, txn.t, out);
            }
            return;
        }
        if self.held.contains_key(&id) || self.tail.iter().any(|t| t.id == id) {
            return;
        }
        txn.shards.sort_unstable();
        self.accept(txn, out);
    }

    /// Conflict detection and insertion into the queue (or the hold buffer).
    fn accept(&mut self, mut txn: Txn, out: &mut Out) {
        if self.conflict_free(&txn) {
            self.pq.insert(txn, Phase::Queued);
        } else if self.is_leader() {
            let now = Timestamp::new(out.now(), txn.id);
            let floor = self
                .max_conflicting_stamp(&txn)
                .map(|s| s.successor_for(txn.id))
                .unwrap_or(now);
            txn.t = now.max(floor);
            self.counters.bumps += 1;
            if txn.is_multi_shard() {
                // Peers queued behind a conflicting release need the raised
                // value before this copy can ever reach the head.
                self.broadcast_notice(&txn, txn.t, out);
            }
            self.pq.insert(txn, Phase::Queued);
        } else {
            self.hold(txn);
            return;
        }
        self.dirty = true;
    }

    fn hold(&mut self, txn: Txn) {
        self.counters.held += 1;
        self.held_order.push_back(txn.id);
        self.held.insert(txn.id, txn);
        while self.held.len() > self.cfg.hold_cap {
            match self.held_order.pop_front() {
                Some(old) => {
                    self.held.remove(&old);
                }
                None => break,
            }
        }
    }

    fn take_held(&mut self, id: TxnId) -> Option<Txn> {
        let t = self.held.remove(&id)?;
        self.held_order.retain(|x| *x != id);
        Some(t)
    }

    fn resend_final_reply(&mut self, id: TxnId, out: &mut Out) {
        let to = self.reply_target(id);
        if self.is_leader() {
            let pos = self.in_log[&id];
            let txn = &self.log[pos as usize];
            let reply = self.replies.get(&id).cloned().unwrap_or_else(|| Reply {
                kind: ReplyKind::Fast,
                g_view: self.view.g_view,
                l_view: self.l_view(),
                shard: self.shard,
                replica: self.replica,
                id,
                t: txn.t,
                hash: Hash160::ZERO,
                result: self.results.get(&id).cloned(),
                sync_point: 0,
                log_pos: Some(pos),
            });
            out.send(to, Msg::Reply(reply));
        } else {
            let pos = self.in_log[&id];
            let t = self.log[pos as usize].t;
            out.send(to, Msg::Reply(self.slow_reply(id, t)));
        }
    }

    fn fast_reply(&self, txn: &Txn, hash: Hash160, result: Option<ExecResult>, pos: Option<u64>) -> Reply {
        Reply {
            kind: ReplyKind::Fast,
            g_view: self.view.g_view,
            l_view: self.l_view(),
            shard: self.shard,
            replica: self.replica,
            id: txn.id,
            t: txn.t,
            hash,
            result,
            sync_point: 0,
            log_pos: pos,
        }
    }

    fn slow_reply(&self, id: TxnId, t: Timestamp) -> Reply {
        Reply {
            kind: ReplyKind::Slow,
            g_view: self.view.g_view,
            l_view: self.l_view(),
            shard: self.shard,
            replica: self.replica,
            id,
            t,
            hash: Hash160::ZERO,
            result: None,
            sync_point: self.sync_point(),
            log_pos: None,
        }
    }

    fn send_reply(&mut self, reply: Reply, out: &mut Out) {
        let to = self.reply_target(reply.id);
        self.replies.insert(reply.id, reply.clone());
        out.send(to, Msg::Reply(reply));
    }

    // ----- release ---------------------------------------------------------

    fn on_tick(&mut self, out: &mut Out) {
        loop {
            let ready = self.pq.releasable(out.now());
            if ready.is_empty() {
                break;
            }
            for id in ready {
                if self.is_leader() {
                    self.leader_release(id, out);
                } else {
                    self.follower_release(id, out);
                }
            }
        }
    }

    fn follower_release(&mut self, id: TxnId, out: &mut Out) {
        let Some(e) = self.pq.remove(id) else { return };
        let txn = e.txn;
        self.stamp(&txn);
        let before = self.log_hash.value();
        self.hash_in(&txn);
        let hash = match self.cfg.hash_mode {
            HashMode::WholeLog => before,
            HashMode::PerKey => self.key_hash.reply_hash(&txn, &self.local_keys(&txn), false),
        };
        let reply = self.fast_reply(&txn, hash, None, None);
        self.tail.push(txn);
        self.send_reply(reply, out);
    }

    fn execute(&mut self, txn: &Txn) -> ExecResult {
        self.counters.executions += 1;
        self.store_is_checkpoint = false;
        self.store.execute(txn, self.shard, self.cfg.shard_count)
    }

    fn leader_release(&mut self, id: TxnId, out: &mut Out) {
        let Some(txn) = self.pq.get(id).map(|e| e.txn.clone()) else { return };
        self.stamp(&txn);
        let result = if self.view.mode == Mode::Detective {
            let hash = self.hash_before(&txn);
            let r = self.execute(&txn);
            let reply = self.fast_reply(&txn, hash, Some(r.clone()), None);
            self.send_reply(reply, out);
            Some(r)
        } else {
            None
        };
        if let Some(e) = self.pq.get_mut(id) {
            e.phase = Phase::Released { result };
        }
        if !txn.is_multi_shard() {
            self.complete(id, out);
            return;
        }
        let ag = self.agreements.entry(id).or_default();
        ag.q.insert(self.shard, txn.t);
        self.broadcast_notice(&txn, txn.t, out);
        out.timer_after(self.cfg.notice_retry_us, Timer::NoticeRetry(id));
        self.evaluate(id, out);
    }

    fn broadcast_notice(&self, txn: &Txn, t: Timestamp, out: &mut Out) {
        for &s in txn.shards.iter().filter(|&&s| s != self.shard) {
            out.send(
                self.leader_node(s),
                Msg::Notice {
                    g_view: self.view.g_view,
                    id: txn.id,
                    shard: self.shard,
                    t,
                    settled: false,
                },
            );
        }
    }

    /// Decides agreement once every participating shard has been heard.
    fn evaluate(&mut self, id: TxnId, out: &mut Out) {
        let Some(entry) = self.pq.get(id) else { return };
        let released = entry.phase != Phase::Queued;
        let txn = entry.txn.clone();
        let mine = txn.t;
        let Some(ag) = self.agreements.get_mut(&id) else { return };
        let Some(mut agreed) = ag.q.values().copied().chain(ag.agreed).max() else { return };
        if mine < agreed {
            // Case 3: any larger peer value rules this one out, so adopt it
            // without waiting for the remaining shards.
            ag.agreed = Some(agreed);
            ag.q.retain(|_, t| *t >= agreed);
            ag.q.remove(&self.shard);
            if released {
                self.counters.case3 += 1;
            }
            if let Some(Phase::Released { result: Some(_) }) = self.pq.get(id).map(|e| &e.phase) {
                self.store.revoke(&txn, mine);
                self.counters.revokes += 1;
            }
            self.replies.remove(&id);
            self.pq.reposition(id, agreed);
            self.dirty = true;
            return;
        }
        if !released || ag.q.len() < txn.shards.len() {
            return;
        }
        agreed = agreed.max(mine);
        ag.agreed = Some(agreed);
        if ag.q.values().all(|t| *t == agreed) {
            self.complete(id, out);
        } else if self.cfg.disable_round2 {
            self.counters.case2 += 1;
            self.complete(id, out);
        } else {
            // Case 2: wait until every leader confirms the agreed value.
            ag.q.retain(|_, t| *t >= agreed);
            if !ag.rebroadcast {
                ag.rebroadcast = true;
                self.counters.case2 += 1;
                self.broadcast_notice(&txn, agreed, out);
            }
        }
    }

    /// Appends a released transaction, erases it from the queue and
    /// instructs followers.
    fn complete(&mut self, id: TxnId, out: &mut Out) {
        let Some(e) = self.pq.remove(id) else { return };
        let txn = e.txn;
        let result = match e.phase {
            Phase::Released { result: Some(r) } => r,
            _ => {
                let hash = self.hash_before(&txn);
                let r = self.execute(&txn);
                let reply = self.fast_reply(&txn, hash, Some(r.clone()), None);
                self.send_reply(reply, out);
                r
            }
        };
        let pos = self.log.len() as u64;
        self.hash_in(&txn);
        self.in_log.insert(id, pos);
        self.results.insert(id, result);
        self.agreements.remove(&id);
        self.orphans.remove(&id);
        let sync = Msg::LogSync {
            g_view: self.view.g_view,
            l_view: self.l_view(),
            pos,
            id,
            t: txn.t,
        };
        for f in self.followers() {
            out.send(f, sync.clone());
        }
        if self.cfg.batched_inquiry {
            if let Some(mut r) = self.replies.get(&id).cloned() {
                r.log_pos = Some(pos);
                self.send_reply(r, out);
            }
        } else if let Some(r) = self.replies.get_mut(&id) {
            r.log_pos = Some(pos);
        }
        self.log.push(txn);
        self.dirty = true;
    }

    // ----- agreement messages --------------------------------------------

    #[allow(clippy::too_many_arguments)]
    fn on_notice(
        &mut self,
        from: NodeId,
        g_view: u64,
        id: TxnId,
        shard: ShardId,
        t: Timestamp,
        settled: bool,
        out: &mut Out,
    ) {
        if g_view != self.view.g_view || !self.is_leader() {
            return;
        }
        if let Some(&pos) = self.in_log.get(&id) {
            // Answers are never answered, so two completed leaders cannot loop.
            if !settled {
                out.send(
                    from,
                    Msg::Notice {
                        g_view,
                        id,
                        shard: self.shard,
                        t: self.log[pos as usize].t,
                        settled: true,
                    },
                );
            }
            return;
        }
        let ag = self.agreements.entry(id).or_default();
        if ag.agreed.is_some_and(|a| t < a) {
            return;
        }
        let slot = ag.q.entry(shard).or_insert(t);
        if *slot < t {
            *slot = t;
        }
        if self.pq.contains(id) {
            self.evaluate(id, out);
        } else {
            let first = !self.orphans.contains_key(&id);
            self.orphans.entry(id).or_default().insert(from);
            if first {
                out.timer_after(self.cfg.fetch_timeout_us, Timer::FetchCheck(id));
            }
        }
    }

    fn find_body(&self, id: TxnId) -> Option<Txn> {
        if let Some(e) = self.pq.get(id) {
            return Some(e.txn.clone());
        }
        if let Some(&p) = self.in_log.get(&id) {
            return Some(self.log[p as usize].clone());
        }
        self.held
            .get(&id)
            .or_else(|| self.tail.iter().find(|t| t.id == id))
            .or_else(|| self.bodies.get(&id))
            .cloned()
    }

    fn on_fetch(&mut self, from: NodeId, id: TxnId, out: &mut Out) {
        if let Some(txn) = self.find_body(id) {
            out.send(from, Msg::TxnBody { txn });
        }
    }

    fn on_fetch_check(&mut self, id: TxnId, out: &mut Out) {
        if !self.is_leader() || self.pq.contains(id) || self.in_log.contains_key(&id) {
            self.orphans.remove(&id);
            return;
        }
        let Some(notifiers) = self.orphans.get(&id) else { return };
        self.counters.fetches += 1;
        for &n in notifiers {
            out.send(n, Msg::FetchTxn { id });
        }
        out.timer_after(self.cfg.fetch_timeout_us, Timer::FetchCheck(id));
    }

    fn on_body(&mut self, txn: Txn, out: &mut Out) {
        let id = txn.id;
        if !self.is_leader() || self.pq.contains(id) || self.in_log.contains_key(&id) {
            return;
        }
        if self.orphans.remove(&id).is_some() {
            self.accept(txn, out);
        }
    }

    fn on_notice_retry(&mut self, id: TxnId, out: &mut Out) {
        if !self.is_leader() {
            return;
        }
        let Some(e) = self.pq.get(id) else { return };
        if e.phase == Phase::Queued {
            // Repositioned; the notice goes out again at re-release.
            out.timer_after(self.cfg.notice_retry_us, Timer::NoticeRetry(id));
            return;
        }
        let txn = e.txn.clone();
        let Some(ag) = self.agreements.get(&id) else { return };
        let agreed = ag.agreed;
        for &s in txn.shards.iter().filter(|&&s| s != self.shard) {
            let stale = match (ag.q.get(&s), agreed) {
                (None, _) => true,
                (Some(t), Some(a)) => *t < a,
                _ => false,
            };
            if stale {
                out.send(
                    self.leader_node(s),
                    Msg::Notice {
                        g_view: self.view.g_view,
                        id,
                        shard: self.shard,
                        t: txn.t,
                        settled: false,
                    },
                );
            }
        }
        out.timer_after(self.cfg.notice_retry_us, Timer::NoticeRetry(id));
    }

    // ----- log synchronization (follower side) ----------------------------

    fn take_body(&mut self, id: TxnId) -> Option<Txn> {
        if let Some(i) = self.tail.iter().position(|t| t.id == id) {
            let t = self.tail.remove(i);
            self.hash_out(&t);
            return Some(t);
        }
        if let Some(e) = self.pq.remove(id) {
            self.dirty = true;
            return Some(e.txn);
        }
        if let Some(t) = self.take_held(id) {
            return Some(t);
        }
        self.bodies.remove(&id)
    }

    /// Fills synced slots contiguously from the prefix end.
    fn apply_syncs(&mut self, out: &mut Out) {
        let mut synced = Vec::new();
        loop {
            let pos = self.log.len() as u64;
            let Some(&(id, t)) = self.pending_sync.get(&pos) else { break };
            if self.in_log.contains_key(&id) {
                // Already placed at an earlier slot; nothing consistent to do.
                self.pending_sync.remove(&pos);
                break;
            }
            let Some(mut txn) = self.take_body(id) else {
                self.request_fill(pos, pos + 64, out);
                break;
            };
            self.pending_sync.remove(&pos);
            txn.t = t;
            self.hash_in(&txn);
            self.stamp(&txn);
            self.in_log.insert(id, pos);
            self.replies.remove(&id);
            self.log.push(txn);
            synced.push((id, t));
        }
        self.pending_sync.retain(|p, _| *p >= self.log.len() as u64);
        self.prune_tail();
        if !self.cfg.batched_inquiry {
            for (id, t) in synced {
                let r = self.slow_reply(id, t);
                out.send(self.reply_target(id), Msg::Reply(r));
            }
        }
        self.execute_committed();
    }

    /// Drops tail entries the leader has long passed without appending.
    fn prune_tail(&mut self) {
        let Some(last) = self.log.last().map(|t| t.t.time_us) else { return };
        let horizon = last - self.cfg.tail_grace_us;
        let (stale, keep): (Vec<Txn>, Vec<Txn>) =
            std::mem::take(&mut self.tail).into_iter().partition(|t| t.t.time_us < horizon);
        self.tail = keep;
        for t in &stale {
            self.hash_out(t);
        }
    }

    fn request_fill(&mut self, from: u64, upto: u64, out: &mut Out) {
        let now = out.now();
        if let Some((p, at)) = self.last_fetch {
            if p == from && now - at < 50 * MS {
                return;
            }
        }
        self.last_fetch = Some((from, now));
        out.send(
            self.leader_node(self.shard),
            Msg::SyncFetch {
                g_view: self.view.g_view,
                from,
                upto,
            },
        );
    }

    fn on_commit_point(&mut self, cp: u64, leader_len: u64, out: &mut Out) {
        self.commit_point = self.commit_point.max(cp.min(self.sync_point()));
        let len = self.log.len() as u64;
        if leader_len > len {
            self.request_fill(len, leader_len, out);
        }
        self.execute_committed();
    }

    /// Applies the committed prefix to the follower's store.
    fn execute_committed(&mut self) {
        if !self.store_is_checkpoint {
            return;
        }
        let upto = (self.commit_point as usize).min(self.log.len());
        while self.executed_upto < upto {
            let txn = self.log[self.executed_upto].clone();
            let r = self.store.execute(&txn, self.shard, self.cfg.shard_count);
            self.results.insert(txn.id, r);
            self.executed_upto += 1;
        }
    }

    /// Leader: the largest prefix length held by f+1 replicas.
    fn advance_commit_point(&mut self) {
        let mut sps: Vec<u64> = self.follower_sps.values().copied().collect();
        sps.push(self.log.len() as u64);
        sps.sort_unstable_by(|a, b| b.cmp(a));
        let need = self.cfg.f as usize + 1;
        if sps.len() >= need {
            self.commit_point = self.commit_point.max(sps[need - 1]);
        }
    }

    // ----- coordinator failure -------------------------------------------

    fn check_coordinators(&mut self, out: &mut Out) {
        if !self.is_leader() {
            return;
        }
        let now = out.now();
        let dead: BTreeSet<u32> = self
            .coord_heard
            .iter()
            .filter(|(c, at)| **c != self.cfg.recovery_coordinator && now - **at > self.cfg.coord_timeout_us)
            .map(|(c, _)| *c)
            .collect();
        if dead.is_empty() {
            return;
        }
        let stuck: Vec<Txn> = self
            .pq
            .iter()
            .map(|e| e.txn.clone())
            .filter(|t| dead.contains(&t.id.coord))
            .collect();
        for txn in stuck {
            let due = self
                .takeover_sent
                .get(&txn.id)
                .is_none_or(|at| now - *at >= 2 * self.cfg.coord_timeout_us);
            if due {
                self.takeover_sent.insert(txn.id, now);
                out.send(
                    NodeId::Coordinator(self.cfg.recovery_coordinator),
                    Msg::Takeover { txn },
                );
            }
        }
    }
}

/// True iff `txn.t` exceeds every released conflicting stamp on this
/// shard's keys: reads against writes, writes against reads and writes.
pub fn conflict_detection(
    txn: &Txn,
    rmap: &HashMap<Key, Timestamp>,
    wmap: &HashMap<Key, Timestamp>,
    shard: ShardId,
    shard_count: u32,
) -> bool {
    txn.accesses_on(shard, shard_count)
        .into_iter()
        .all(|(k, written)| {
            let w_ok = wmap.get(&k).is_none_or(|s| txn.t > *s);
            let r_ok = !written || rmap.get(&k).is_none_or(|s| txn.t > *s);
            w_ok && r_ok
        })
}

#[cfg(test)]
mod tests;
