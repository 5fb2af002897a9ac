//! Failure detector and keeper of the replicated view record.
//!
//! Replica 0 detects failed leaders from heartbeats, prepares the next record
//! at a majority of view-manager replicas, then asks servers to change view
//! and notifies coordinators. Other replicas only accept prepares and commits.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::message::{Msg, Status, Timer};
use crate::server::Out;
use crate::sim::NodeId;
use crate::types::{replicas, Micros, Mode, ReplicaId, ShardId, ViewRecord, MS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VmConfig {
    pub f: u32,
    pub shard_count: u32,
    pub vm_replicas: u32,
    pub check_us: Micros,
    /// Silence after which a server counts as failed (three heartbeats).
    pub heartbeat_timeout_us: Micros,
    pub prepare_retry_us: Micros,
    /// Leaders this close to each other run in preventive mode.
    pub colocation_threshold_us: Micros,
    /// Configured one-way delay between regions; replica r lives in region r.
    pub region_owd: Vec<Vec<Micros>>,
    pub mode_override: Option<Mode>,
    pub coordinators: Vec<u32>,
}

impl Default for VmConfig {
    fn default() -> Self {
        Self {
            f: 1,
            shard_count: 1,
            vm_replicas: 3,
            check_us: 50 * MS,
            heartbeat_timeout_us: 150 * MS,
            prepare_retry_us: 100 * MS,
            colocation_threshold_us: 10 * MS,
            region_owd: Vec::new(),
            mode_override: None,
            coordinators: Vec::new(),
        }
    }
}

/// Chooses a leader per shard, preferring one region that hosts every shard.
///
/// Fallback: the region with the most alive servers, with each dead slot
/// taken by the alive replica of that shard closest to the region.
pub fn find_new_leaders(
    alive: &BTreeSet<(ShardId, ReplicaId)>,
    f: u32,
    shard_count: u32,
    region_owd: &[Vec<Micros>],
) -> Result<Vec<ReplicaId>, String> {
    let n = replicas(f);
    for s in 0..shard_count {
        let up = (0..n).filter(|r| alive.contains(&(s, *r))).count() as u32;
        if up <= f {
            return Err(format!("shard {s} has only {up} live replicas"));
        }
    }
    if let Some(r) = (0..n).find(|r| (0..shard_count).all(|s| alive.contains(&(s, *r)))) {
        return Ok(vec![r; shard_count as usize]);
    }
    let count = |r: ReplicaId| (0..shard_count).filter(|s| alive.contains(&(*s, r))).count();
    let best = (0..n).max_by_key(|&r| (count(r), std::cmp::Reverse(r))).expect("replicas");
    let dist = |a: ReplicaId, b: ReplicaId| {
        region_owd
            .get(a as usize)
            .and_then(|row| row.get(b as usize))
            .copied()
            .unwrap_or(0)
    };
    Ok((0..shard_count)
        .map(|s| {
            if alive.contains(&(s, best)) {
                best
            } else {
                (0..n)
                    .filter(|r| alive.contains(&(s, *r)))
                    .min_by_key(|&r| (dist(best, r), r))
                    .expect("more than f alive")
            }
        })
        .collect())
}

/// Next record moving each shard's leader to `leaders`.
pub fn next_record(current: &ViewRecord, leaders: &[ReplicaId], f: u32, mode: Mode) -> ViewRecord {
    let n = replicas(f) as u64;
    let g_vec = current
        .g_vec
        .iter()
        .zip(leaders)
        .map(|(&lv, &r_new)| {
            let r_old = lv % n;
            lv + (r_new as u64 + n - r_old) % n
        })
        .collect();
    ViewRecord { g_view: current.g_view + 1, g_vec, mode }
}

/// Preventive iff every pair of leaders is within the threshold.
pub fn choose_mode(leaders: &[ReplicaId], region_owd: &[Vec<Micros>], threshold_us: Micros) -> Mode {
    let far = leaders.iter().any(|&a| {
        leaders.iter().any(|&b| {
            region_owd
                .get(a as usize)
                .and_then(|row| row.get(b as usize))
                .is_some_and(|d| *d > threshold_us)
        })
    });
    if far {
        Mode::Detective
    } else {
        Mode::Preventive
    }
}

#[derive(Clone, Copy, Debug)]
struct Heard {
    at: Micros,
    status: Status,
    g_view: u64,
}

pub struct ViewManager {
    pub id: u32,
    pub cfg: VmConfig,
    pub record: ViewRecord,
    prepare: Option<ViewRecord>,
    prepare_quorum: BTreeSet<u32>,
    heard: BTreeMap<(ShardId, ReplicaId), Heard>,
    /// Committed records with the true time of commit.
    pub committed: Vec<(Micros, ViewRecord)>,
    pub halted: Option<String>,
}

impl ViewManager {
    pub fn new(id: u32, cfg: VmConfig, record: ViewRecord) -> Self {
        let n = replicas(cfg.f);
        let heard = (0..cfg.shard_count)
            .flat_map(|s| (0..n).map(move |r| (s, r)))
            .map(|k| (k, Heard { at: 0, status: Status::Normal, g_view: record.g_view }))
            .collect();
        Self {
            id,
            cfg,
            committed: vec![(0, record.clone())],
            record,
            prepare: None,
            prepare_quorum: BTreeSet::new(),
            heard,
            halted: None,
        }
    }

    fn is_primary(&self) -> bool {
        self.id == 0
    }

    pub fn start(&mut self, out: &mut Out) {
        if self.is_primary() {
            let now = out.now();
            for h in self.heard.values_mut() {
                h.at = now;
            }
            out.timer_after(self.cfg.check_us, Timer::VmCheck);
        }
    }

    pub fn alive(&self, now: Micros) -> BTreeSet<(ShardId, ReplicaId)> {
        self.heard
            .iter()
            .filter(|(_, h)| now - h.at <= self.cfg.heartbeat_timeout_us && h.status != Status::Recovering)
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn on_timer(&mut self, timer: Timer, out: &mut Out) {
        match timer {
            Timer::VmCheck => {
                self.check(out);
                out.timer_after(self.cfg.check_us, Timer::VmCheck);
            }
            Timer::PrepareRetry(g) => {
                if let Some(p) = self.prepare.as_ref().filter(|p| p.g_view == g) {
                    let p = p.clone();
                    self.broadcast_prepare(&p, out);
                }
            }
            _ => {}
        }
    }

    fn check(&mut self, out: &mut Out) {
        if self.halted.is_some() || self.prepare.is_some() {
            return;
        }
        let alive = self.alive(out.now());
        let n = replicas(self.cfg.f);
        let leader_down =
            (0..self.cfg.shard_count).any(|s| !alive.contains(&(s, self.record.leader_of(s, n))));
        if leader_down {
            self.initiate(&alive, out);
            return;
        }
        // Servers still reporting an older view missed the request.
        let stale: Vec<(ShardId, ReplicaId)> = self
            .heard
            .iter()
            .filter(|(k, h)| alive.contains(k) && h.g_view < self.record.g_view)
            .map(|(k, _)| *k)
            .collect();
        for (s, r) in stale {
            out.send(NodeId::server(s, r), Msg::ViewChangeReq { record: self.record.clone() });
        }
    }

    fn initiate(&mut self, alive: &BTreeSet<(ShardId, ReplicaId)>, out: &mut Out) {
        let leaders = match find_new_leaders(alive, self.cfg.f, self.cfg.shard_count, &self.cfg.region_owd) {
            Ok(l) => l,
            Err(e) => {
                self.halted = Some(e);
                return;
            }
        };
        let mode = self.cfg.mode_override.unwrap_or_else(|| {
            choose_mode(&leaders, &self.cfg.region_owd, self.cfg.colocation_threshold_us)
        });
        let base = self.prepare.as_ref().unwrap_or(&self.record);
        let mut next = next_record(&self.record, &leaders, self.cfg.f, mode);
        next.g_view = base.g_view.max(self.record.g_view) + 1;
        self.prepare_quorum = BTreeSet::from([self.id]);
        self.prepare = Some(next.clone());
        self.broadcast_prepare(&next, out);
        self.try_commit(out);
    }

    fn broadcast_prepare(&mut self, record: &ViewRecord, out: &mut Out) {
        for v in (0..self.cfg.vm_replicas).filter(|v| *v != self.id) {
            out.send(NodeId::ViewManager(v), Msg::CmPrepare { record: record.clone() });
        }
        out.timer_after(self.cfg.prepare_retry_us, Timer::PrepareRetry(record.g_view));
    }

    fn try_commit(&mut self, out: &mut Out) {
        let quorum = (self.cfg.vm_replicas / 2 + 1) as usize;
        if self.prepare_quorum.len() < quorum {
            return;
        }
        let Some(record) = self.prepare.take() else { return };
        self.record = record.clone();
        self.committed.push((out.true_now(), record.clone()));
        let n = replicas(self.cfg.f);
        for s in 0..self.cfg.shard_count {
            for r in 0..n {
                out.send(NodeId::server(s, r), Msg::ViewChangeReq { record: record.clone() });
            }
        }
        for v in (0..self.cfg.vm_replicas).filter(|v| *v != self.id) {
            out.send(NodeId::ViewManager(v), Msg::CmCommit { record: record.clone() });
        }
        for &c in &self.cfg.coordinators {
            out.send(NodeId::Coordinator(c), Msg::ViewNotice { record: record.clone() });
        }
    }

    pub fn on_message(&mut self, from: NodeId, msg: Msg, out: &mut Out) {
        match msg {
            Msg::Heartbeat { g_view, status } => {
                if let NodeId::Server { shard, replica } = from {
                    self.heard.insert((shard, replica), Heard { at: out.now(), status, g_view });
                }
            }
            Msg::InquireView => out.send(from, Msg::ViewReply { record: self.record.clone() }),
            Msg::CmPrepare { record } => {
                if record.g_view > self.record.g_view {
                    let g_view = record.g_view;
                    self.prepare = Some(record);
                    out.send(from, Msg::CmPrepareReply { g_view });
                }
            }
            Msg::CmPrepareReply { g_view } => {
                let NodeId::ViewManager(v) = from else { return };
                if self.prepare.as_ref().is_some_and(|p| p.g_view == g_view) {
                    self.prepare_quorum.insert(v);
                    self.try_commit(out);
                }
            }
            Msg::CmCommit { record } if record.g_view > self.record.g_view => {
                self.committed.push((out.true_now(), record.clone()));
                self.record = record;
                self.prepare = None;
            }
            _ => {}
        }
    }
}
