//! Client-side coordinator: future timestamps from measured one-way delays,
//! multicast, per-shard fast and slow quorum checks, the cross-leader
//! timestamp check, retries, and dependent-transaction pieces.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::checker::{CommitPath, HistoryRecord};
use crate::message::{Msg, Reply, ReplyKind, Timer};
use crate::server::Out;
use crate::sim::net::OwdEstimator;
use crate::sim::NodeId;
use crate::types::{
    replicas, super_quorum, ExecResult, Guard, Micros, Op, ReplicaId, ShardId, Timestamp, Txn, TxnId,
    ViewRecord, MS,
};
use crate::workload::{self, DependentTemplate, Generated, Workload};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinatorConfig {
    pub f: u32,
    pub shard_count: u32,
    /// Safety margin added to the largest super-quorum OWD.
    pub delta_us: Micros,
    /// Extra signed offset on top of the margin, for sensitivity sweeps.
    pub headroom_delta_us: Micros,
    pub probe_us: Micros,
    /// Size timestamps for the f+1 closest replicas instead of a super quorum.
    pub simple_quorum: bool,
    pub batched_inquiry: bool,
    pub inquiry_us: Micros,
    pub min_retry_us: Micros,
    pub max_retry_us: Micros,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            f: 1,
            shard_count: 1,
            delta_us: 10 * MS,
            headroom_delta_us: 0,
            probe_us: 100 * MS,
            simple_quorum: false,
            batched_inquiry: false,
            inquiry_us: 10 * MS,
            min_retry_us: 50 * MS,
            max_retry_us: 2_000 * MS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordStats {
    pub committed: u64,
    pub fast: u64,
    pub slow: u64,
    pub retries: u64,
    pub view_resubmits: u64,
    pub skipped_arrivals: u64,
    pub dependent_committed: u64,
    pub dependent_aborted: u64,
    pub dependent_retries: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    LockRead,
    Write,
    Unlock { retry: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Workload,
    Script(usize),
    Dependent(u64, Stage),
    Takeover,
}

struct Dependent {
    template: DependentTemplate,
    attempt: u32,
}

struct Pending {
    txn: Txn,
    start_us: Micros,
    attempt: u32,
    replies: BTreeMap<(ShardId, ReplicaId), Reply>,
    origin: Origin,
}

/// Outcome of the reply check for one transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decision {
    Pending,
    Committed { t: Timestamp, result: ExecResult, path: CommitPath },
}

/// Applies the quorum rules to the latest reply of every server.
///
/// Per shard the leader's fast reply is required. The shard is fast-ready
/// when at least a super quorum (leader included) agrees with the leader's
/// `(hash, t)`, slow replies with the leader's `t` counting as agreeing; it
/// is slow-ready when at least `f` followers sent slow replies with the
/// leader's `t`, or reported a sync point covering the leader's position.
/// The transaction commits when every shard is ready and all leaders agree
/// on `t`.
pub fn decide(
    txn: &Txn,
    view: &ViewRecord,
    f: u32,
    replies: &BTreeMap<(ShardId, ReplicaId), Reply>,
    synced: &BTreeMap<(ShardId, ReplicaId), u64>,
) -> Decision {
    let n = replicas(f);
    let sq = super_quorum(f) as usize;
    let mut leader_t: Option<Timestamp> = None;
    let mut all_fast = true;
    let mut results = Vec::new();
    for &s in &txn.shards {
        let lr = view.leader_of(s, n);
        let Some(lead) = replies.get(&(s, lr)).filter(|r| r.kind == ReplyKind::Fast) else {
            return Decision::Pending;
        };
        let Some(res) = &lead.result else { return Decision::Pending };
        match leader_t {
            Some(t) if t != lead.t => return Decision::Pending,
            _ => leader_t = Some(lead.t),
        }
        let mut agree = 1;
        let mut fast = 1;
        let mut slow = 0;
        for r in (0..n).filter(|&r| r != lr) {
            let covered = lead
                .log_pos
                .zip(synced.get(&(s, r)))
                .is_some_and(|(pos, sp)| pos < *sp);
            match replies.get(&(s, r)) {
                Some(x) if x.t == lead.t && x.kind == ReplyKind::Slow => {
                    agree += 1;
                    slow += 1;
                }
                Some(x) if x.t == lead.t && x.hash == lead.hash => {
                    agree += 1;
                    fast += 1;
                    slow += usize::from(covered);
                }
                _ => slow += usize::from(covered),
            }
        }
        // A slow reply supersedes that follower's fast reply, so it still
        // counts toward the super quorum, but the commit is then slow.
        if agree < sq && slow < f as usize {
            return Decision::Pending;
        }
        all_fast &= fast >= sq;
        results.push(res.clone());
    }
    let t = leader_t.expect("at least one shard");
    Decision::Committed {
        t,
        result: ExecResult::merge(txn, &results),
        path: if all_fast { CommitPath::Fast } else { CommitPath::Slow },
    }
}

/// Future timestamp: send time plus the largest super-quorum OWD over the
/// participating shards plus the margin. With too few estimates for a super
/// quorum, the f+1 closest are used.
pub fn init_timestamp(
    owd: &OwdEstimator,
    txn: &Txn,
    f: u32,
    send_local: Micros,
    margin: Micros,
    simple_quorum: bool,
) -> Micros {
    let n = replicas(f);
    let mut worst = 0;
    for &s in &txn.shards {
        let mut est: Vec<Micros> = (0..n)
            .filter_map(|r| owd.estimate(NodeId::server(s, r)))
            .map(|e| e.max(0))
            .collect();
        est.sort_unstable();
        let want = if simple_quorum || est.len() < super_quorum(f) as usize {
            f as usize + 1
        } else {
            super_quorum(f) as usize
        };
        if let Some(&e) = est.get(want.min(est.len()).saturating_sub(1)) {
            worst = worst.max(e);
        }
    }
    send_local + worst + margin
}

pub struct Coordinator {
    pub id: u32,
    pub cfg: CoordinatorConfig,
    pub view: Option<ViewRecord>,
    pub owd: OwdEstimator,
    workload: Option<Workload>,
    script: BTreeMap<usize, Vec<Op>>,
    /// Transaction submitted for each fired script entry.
    pub script_txns: BTreeMap<usize, TxnId>,
    next_seq: u64,
    pending: BTreeMap<TxnId, Pending>,
    completed: BTreeSet<TxnId>,
    deps: HashMap<u64, Dependent>,
    next_dep: u64,
    synced: BTreeMap<(ShardId, ReplicaId), u64>,
    synced_view: BTreeMap<(ShardId, ReplicaId), (u64, u64)>,
    inquiring: bool,
    pub history: Vec<HistoryRecord>,
    /// Script entries committed since the last call to [`Self::take_script_commits`].
    script_commits: Vec<usize>,
    pub stats: CoordStats,
}

impl Coordinator {
    pub fn new(id: u32, cfg: CoordinatorConfig, view: Option<ViewRecord>, workload: Option<Workload>) -> Self {
        Self {
            id,
            cfg,
            view,
            owd: OwdEstimator::default(),
            workload,
            script: BTreeMap::new(),
            script_txns: BTreeMap::new(),
            next_seq: 0,
            pending: BTreeMap::new(),
            completed: BTreeSet::new(),
            deps: HashMap::new(),
            next_dep: 0,
            synced: BTreeMap::new(),
            synced_view: BTreeMap::new(),
            inquiring: false,
            history: Vec::new(),
            script_commits: Vec::new(),
            stats: CoordStats::default(),
        }
    }

    pub fn add_script(&mut self, idx: usize, ops: Vec<Op>) {
        self.script.insert(idx, ops);
    }

    pub fn take_script_commits(&mut self) -> Vec<usize> {
        std::mem::take(&mut self.script_commits)
    }

    pub fn node(&self) -> NodeId {
        NodeId::Coordinator(self.id)
    }

    /// Transactions in flight, counting a dependent transaction once.
    pub fn outstanding(&self) -> usize {
        let pieces = self
            .pending
            .values()
            .filter(|p| matches!(p.origin, Origin::Dependent(..)))
            .count();
        self.pending.len() - pieces + self.deps.len()
    }

    pub fn pending_ids(&self) -> Vec<TxnId> {
        self.pending.keys().copied().collect()
    }

    fn servers(&self) -> impl Iterator<Item = NodeId> + '_ {
        let n = replicas(self.cfg.f);
        (0..self.cfg.shard_count).flat_map(move |s| (0..n).map(move |r| NodeId::server(s, r)))
    }

    pub fn start(&mut self, out: &mut Out) {
        self.probe(out);
        if self.view.is_none() {
            self.inquire(out);
        }
        if self.cfg.batched_inquiry {
            out.timer_after(self.cfg.inquiry_us, Timer::Inquiry);
        }
        if let Some(w) = &self.workload {
            out.timer_at(w.cfg.start_us, Timer::Arrival);
        }
    }

    /// Stops generating new arrivals; in-flight transactions continue.
    pub fn stop_workload(&mut self) {
        self.workload = None;
    }

    fn probe(&mut self, out: &mut Out) {
        let now = out.now();
        let targets: Vec<NodeId> = self.servers().collect();
        for s in targets {
            out.send(s, Msg::Probe { send_local: now });
        }
        out.timer_after(self.cfg.probe_us, Timer::Probe);
    }

    fn inquire(&mut self, out: &mut Out) {
        if !self.inquiring {
            self.inquiring = true;
            out.send(NodeId::ViewManager(0), Msg::InquireView);
        }
    }

    pub fn on_timer(&mut self, timer: Timer, out: &mut Out) {
        match timer {
            Timer::Probe => self.probe(out),
            Timer::Arrival => self.on_arrival(out),
            Timer::Retry(id, attempt) => {
                if self.pending.get(&id).is_some_and(|p| p.attempt == attempt) {
                    self.stats.retries += 1;
                    self.resubmit(id, out);
                }
            }
            Timer::Inquiry => {
                self.send_inquiries(out);
                out.timer_after(self.cfg.inquiry_us, Timer::Inquiry);
            }
            Timer::Script(idx) => {
                if let Some(ops) = self.script.get(&idx).cloned() {
                    let id = self.submit_new(ops, vec![], Origin::Script(idx), out);
                    self.script_txns.insert(idx, id);
                }
            }
            _ => {}
        }
    }

    fn on_arrival(&mut self, out: &mut Out) {
        let Some(w) = self.workload.as_mut() else { return };
        let end = w.cfg.start_us + w.cfg.duration_us;
        if out.now() >= end {
            return;
        }
        let cap = w.cfg.outstanding_cap;
        let gap = w.next_gap_us();
        let next = w.gen();
        out.timer_after(gap, Timer::Arrival);
        if self.outstanding() >= cap || self.view.is_none() {
            self.stats.skipped_arrivals += 1;
            return;
        }
        match next {
            Generated::OneShot(ops) => {
                self.submit_new(ops, vec![], Origin::Workload, out);
            }
            Generated::Dependent(template) => {
                let d = self.next_dep;
                self.next_dep += 1;
                self.deps.insert(d, Dependent { template, attempt: 0 });
                let ops = workload::lock_and_read(&template, self.cfg.shard_count);
                self.submit_new(ops, vec![], Origin::Dependent(d, Stage::LockRead), out);
            }
        }
    }

    fn submit_new(&mut self, ops: Vec<Op>, guard: Vec<Guard>, origin: Origin, out: &mut Out) -> TxnId {
        let id = TxnId::new(self.id, self.next_seq);
        self.next_seq += 1;
        let txn = Txn::new(id, ops, guard, self.cfg.shard_count);
        self.track(txn, origin, out.true_now());
        self.send_attempt(id, out);
        id
    }

    fn track(&mut self, txn: Txn, origin: Origin, start_us: Micros) {
        self.pending.insert(
            txn.id,
            Pending {
                txn,
                start_us,
                attempt: 0,
                replies: BTreeMap::new(),
                origin,
            },
        );
    }

    /// Takes over a transaction whose coordinator went silent.
    fn on_takeover(&mut self, txn: Txn, out: &mut Out) {
        if self.pending.contains_key(&txn.id) || self.completed.contains(&txn.id) {
            return;
        }
        let id = txn.id;
        self.track(txn, Origin::Takeover, out.true_now());
        self.send_attempt(id, out);
    }

    fn margin(&self) -> Micros {
        self.cfg.delta_us + self.cfg.headroom_delta_us
    }

    fn send_attempt(&mut self, id: TxnId, out: &mut Out) {
        let now = out.now();
        let margin = self.margin();
        let (f, simple) = (self.cfg.f, self.cfg.simple_quorum);
        let n = replicas(f);
        let Some(p) = self.pending.get_mut(&id) else { return };
        let time = init_timestamp(&self.owd, &p.txn, f, now, margin, simple);
        p.txn.t = Timestamp::new(time, id);
        p.replies.clear();
        let back = p
            .txn
            .shards
            .iter()
            .flat_map(|&s| (0..n).map(move |r| NodeId::server(s, r)))
            .filter_map(|node| self.owd.estimate(node))
            .max()
            .unwrap_or(0);
        for &s in &p.txn.shards {
            for r in 0..n {
                out.send(NodeId::server(s, r), Msg::Submit { txn: p.txn.clone() });
            }
        }
        let expected = (time - now).max(0) + back.max(0);
        let wait = (2 * expected)
            .max(self.cfg.min_retry_us)
            .saturating_mul(1 << p.attempt.min(6))
            .min(self.cfg.max_retry_us);
        out.timer_after(wait, Timer::Retry(id, p.attempt));
    }

    fn resubmit(&mut self, id: TxnId, out: &mut Out) {
        if let Some(p) = self.pending.get_mut(&id) {
            p.attempt += 1;
        }
        self.send_attempt(id, out);
    }

    pub fn on_message(&mut self, from: NodeId, msg: Msg, out: &mut Out) {
        match msg {
            Msg::ProbeAck { send_local, recv_local } => self.owd.observe(from, send_local, recv_local),
            Msg::Reply(r) => self.on_reply(r, out),
            Msg::ViewReply { record } | Msg::ViewNotice { record } => {
                self.inquiring = false;
                self.adopt_view(record, out);
            }
            Msg::SyncInquiryReply { g_view, l_view, shard, replica, sync_point } => {
                let key = (shard, replica);
                let fresh = self.view.as_ref().is_some_and(|v| v.g_view == g_view && v.l_view(shard) == l_view);
                if fresh {
                    self.synced_view.insert(key, (g_view, l_view));
                    let e = self.synced.entry(key).or_insert(0);
                    *e = (*e).max(sync_point);
                    let ids: Vec<TxnId> = self
                        .pending
                        .iter()
                        .filter(|(_, p)| p.txn.shards.contains(&shard))
                        .map(|(id, _)| *id)
                        .collect();
                    for id in ids {
                        self.evaluate(id, out);
                    }
                }
            }
            Msg::Takeover { txn } => self.on_takeover(txn, out),
            _ => {}
        }
    }

    fn adopt_view(&mut self, record: ViewRecord, out: &mut Out) {
        if self.view.as_ref().is_some_and(|v| v.g_view >= record.g_view) {
            return;
        }
        self.view = Some(record);
        self.synced.clear();
        self.synced_view.clear();
        let ids = self.pending_ids();
        self.stats.view_resubmits += ids.len() as u64;
        for id in ids {
            self.resubmit(id, out);
        }
    }

    fn on_reply(&mut self, r: Reply, out: &mut Out) {
        let Some(view) = &self.view else { return };
        if r.g_view > view.g_view {
            self.inquire(out);
            return;
        }
        if r.g_view != view.g_view || r.l_view != view.l_view(r.shard) {
            return;
        }
        let id = r.id;
        let Some(p) = self.pending.get_mut(&id) else { return };
        if !p.txn.shards.contains(&r.shard) {
            return;
        }
        p.replies.insert((r.shard, r.replica), r);
        self.evaluate(id, out);
    }

    fn evaluate(&mut self, id: TxnId, out: &mut Out) {
        let Some(view) = self.view.clone() else { return };
        let n = replicas(self.cfg.f);
        let Some(p) = self.pending.get_mut(&id) else { return };
        // Leaders disagreeing on t: drop replies below the largest.
        let leader_ts: Vec<Timestamp> = p
            .txn
            .shards
            .iter()
            .filter_map(|&s| p.replies.get(&(s, view.leader_of(s, n))))
            .filter(|r| r.kind == ReplyKind::Fast)
            .map(|r| r.t)
            .collect();
        if let Some(max) = leader_ts.iter().max().copied() {
            if leader_ts.iter().any(|t| *t != max) {
                p.replies.retain(|_, r| r.t >= max);
            }
        }
        let synced: BTreeMap<(ShardId, ReplicaId), u64> = if self.cfg.batched_inquiry {
            self.synced.clone()
        } else {
            BTreeMap::new()
        };
        match decide(&p.txn, &view, self.cfg.f, &p.replies, &synced) {
            Decision::Pending => {}
            Decision::Committed { t, result, path } => {
                let p = self.pending.remove(&id).expect("present");
                self.commit(p, t, result, path, out);
            }
        }
    }

    fn commit(&mut self, p: Pending, t: Timestamp, result: ExecResult, path: CommitPath, out: &mut Out) {
        self.completed.insert(p.txn.id);
        self.stats.committed += 1;
        match path {
            CommitPath::Fast => self.stats.fast += 1,
            CommitPath::Slow => self.stats.slow += 1,
        }
        self.history.push(HistoryRecord {
            id: p.txn.id,
            ops: p.txn.ops.clone(),
            guard: p.txn.guard.clone(),
            shards: p.txn.shards.clone(),
            start_us: p.start_us,
            commit_us: out.true_now(),
            t,
            result: result.clone(),
            path,
            retries: p.attempt,
        });
        match p.origin {
            Origin::Script(idx) => self.script_commits.push(idx),
            Origin::Dependent(d, stage) => self.advance_dependent(d, stage, &result, out),
            Origin::Workload | Origin::Takeover => {}
        }
    }

    fn advance_dependent(&mut self, d: u64, stage: Stage, result: &ExecResult, out: &mut Out) {
        let m = self.cfg.shard_count;
        let Some(dep) = self.deps.get(&d) else { return };
        let tpl = dep.template;
        match stage {
            Stage::LockRead => match workload::locked_values(&tpl, &result.values, m) {
                Some((va, vb)) => {
                    let (ops, guard) = workload::validate_and_write(&tpl, va, vb, m);
                    self.submit_new(ops, guard, Origin::Dependent(d, Stage::Write), out);
                }
                None => {
                    let ops = workload::unlock(&tpl, m);
                    self.submit_new(ops, vec![], Origin::Dependent(d, Stage::Unlock { retry: true }), out);
                }
            },
            Stage::Write => {
                let retry = !result.applied;
                self.submit_new(workload::unlock(&tpl, m), vec![], Origin::Dependent(d, Stage::Unlock { retry }), out);
            }
            Stage::Unlock { retry: false } => {
                self.deps.remove(&d);
                self.stats.dependent_committed += 1;
            }
            Stage::Unlock { retry: true } => {
                let attempts = self.workload.as_ref().map_or(3, |w| w.cfg.dependent_attempts);
                let dep = self.deps.get_mut(&d).expect("present");
                dep.attempt += 1;
                if dep.attempt >= attempts {
                    self.deps.remove(&d);
                    self.stats.dependent_aborted += 1;
                } else {
                    self.stats.dependent_retries += 1;
                    let ops = workload::lock_and_read(&tpl, m);
                    self.submit_new(ops, vec![], Origin::Dependent(d, Stage::LockRead), out);
                }
            }
        }
    }

    /// Asks followers of shards where some transaction lacks a fast quorum.
    fn send_inquiries(&mut self, out: &mut Out) {
        let Some(view) = &self.view else { return };
        let n = replicas(self.cfg.f);
        let shards: BTreeSet<ShardId> = self
            .pending
            .values()
            .filter(|p| !p.replies.is_empty())
            .flat_map(|p| p.txn.shards.iter().copied())
            .collect();
        for s in shards {
            let leader = view.leader_of(s, n);
            for r in (0..n).filter(|&r| r != leader) {
                out.send(NodeId::server(s, r), Msg::SyncInquiry);
            }
        }
    }
}
