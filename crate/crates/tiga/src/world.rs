//! Wires servers, coordinators and view-manager replicas into one simulation,
//! runs it to quiescence and collects history, final state and statistics.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checker::{
    check_strict_serializability, linearizability_per_shard, merge_history, HistoryRecord, ShardFinal, Verdict,
};
use crate::config::{ms, ConfigError, ExperimentConfig, FaultAction};
use crate::coordinator::{Coordinator, CoordinatorConfig};
use crate::message::{Msg, Status, Timer};
use crate::server::{Replica, ServerConfig, ServerCounters};
use crate::sim::{
    ClockModel, Event, Fault, Jitter, LinkDelay, NetModel, NodeClock, NodeId, Partition, Payload, Sim,
};
use crate::stats::RunStats;
use crate::types::{shard_of, Micros, ReplicaId, ShardId, TxnId, ViewRecord, MS};
use crate::view_manager::{ViewManager, VmConfig};
use crate::workload::Workload;

const VM_REPLICAS: u32 = 3;
/// Extra time after quiescence so leaders finish agreement and log sync.
const SETTLE_US: Micros = 1_000 * MS;
const STEP_US: Micros = 10 * MS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub strict: Result<Verdict, String>,
    pub per_shard: Result<Vec<(ShardId, Verdict)>, String>,
}

impl Verdicts {
    pub fn compute(history: &[HistoryRecord], finals: &[ShardFinal], shard_count: u32) -> Self {
        Self {
            strict: check_strict_serializability(history, finals, shard_count).map_err(|e| e.to_string()),
            per_shard: linearizability_per_shard(history, finals, shard_count).map_err(|e| e.to_string()),
        }
    }

    pub fn passed(&self) -> bool {
        self.strict.as_ref().is_ok_and(Verdict::passed)
            && self.per_shard.as_ref().is_ok_and(|v| v.iter().all(|(_, v)| v.passed()))
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub stats: RunStats,
    pub history: Vec<HistoryRecord>,
    pub finals: Vec<ShardFinal>,
    pub verdicts: Option<Verdicts>,
}

/// Every node's state machine plus run bookkeeping.
pub struct Nodes {
    pub servers: BTreeMap<(ShardId, ReplicaId), Replica>,
    pub coordinators: BTreeMap<u32, Coordinator>,
    pub vms: Vec<ViewManager>,
    server_cfg: ServerConfig,
    initial_view: ViewRecord,
    /// Script entries waiting on the commit of another entry.
    followers: BTreeMap<usize, Vec<(u32, usize, Micros)>>,
    pub crashes: Vec<(Micros, NodeId)>,
    /// First time each shard's leader was normal in each global view.
    pub normal_at: BTreeMap<(u64, ShardId), Micros>,
    retired: ServerCounters,
}

impl Nodes {
    fn handle(&mut self, sim: &mut Sim<Msg, Timer>, ev: Event<Msg, Timer>) {
        let node = ev.target;
        let mut out = sim.outbox(node);
        match ev.payload {
            Payload::Fault(Fault::Crash) => {
                sim.crash(node);
                self.crashes.push((sim.now(), node));
                return;
            }
            Payload::Fault(Fault::Restart) => {
                sim.restart(node);
                if let NodeId::Server { shard, replica } = node {
                    let mut fresh = Replica::new(self.server_cfg.clone(), shard, replica, self.initial_view.clone());
                    fresh.begin_rejoin(&mut out);
                    fresh.start(&mut out);
                    if let Some(old) = self.servers.insert((shard, replica), fresh) {
                        add_counters(&mut self.retired, &old.counters);
                    }
                }
            }
            Payload::Message { from, msg } => match node {
                NodeId::Server { shard, replica } => {
                    if let Some(s) = self.servers.get_mut(&(shard, replica)) {
                        s.on_message(from, msg, &mut out);
                    }
                }
                NodeId::Coordinator(c) => {
                    if let Some(co) = self.coordinators.get_mut(&c) {
                        co.on_message(from, msg, &mut out);
                    }
                }
                NodeId::ViewManager(v) => {
                    if let Some(vm) = self.vms.get_mut(v as usize) {
                        vm.on_message(from, msg, &mut out);
                    }
                }
            },
            Payload::Timer(t) => match node {
                NodeId::Server { shard, replica } => {
                    if let Some(s) = self.servers.get_mut(&(shard, replica)) {
                        s.on_timer(t, &mut out);
                    }
                }
                NodeId::Coordinator(c) => {
                    if let Some(co) = self.coordinators.get_mut(&c) {
                        co.on_timer(t, &mut out);
                    }
                }
                NodeId::ViewManager(v) => {
                    if let Some(vm) = self.vms.get_mut(v as usize) {
                        vm.on_timer(t, &mut out);
                    }
                }
            },
        }
        sim.apply(node, out).expect("all nodes are placed");
        self.after_event(sim, node);
    }

    fn after_event(&mut self, sim: &mut Sim<Msg, Timer>, node: NodeId) {
        match node {
            NodeId::Server { shard, replica } => {
                let s = &self.servers[&(shard, replica)];
                if s.is_leader() && s.status == Status::Normal {
                    self.normal_at.entry((s.view.g_view, shard)).or_insert(sim.now());
                }
            }
            NodeId::Coordinator(c) => {
                let done = self.coordinators.get_mut(&c).map(Coordinator::take_script_commits).unwrap_or_default();
                for idx in done {
                    for &(coord, j, delay) in self.followers.get(&idx).into_iter().flatten() {
                        let target = NodeId::Coordinator(coord);
                        let at = sim.clocks.local_clock(target, sim.now() + delay);
                        sim.set_timer(target, at, Timer::Script(j));
                    }
                }
            }
            NodeId::ViewManager(_) => {}
        }
    }

    fn quiescent(&self, sim: &Sim<Msg, Timer>, script_len: usize) -> bool {
        let fired: usize = self.coordinators.values().map(|c| c.script_txns.len()).sum();
        fired >= script_len
            && self
                .coordinators
                .values()
                .all(|c| sim.is_crashed(c.node()) || c.outstanding() == 0)
    }

    pub fn counters(&self) -> ServerCounters {
        let mut total = self.retired;
        for s in self.servers.values() {
            add_counters(&mut total, &s.counters);
        }
        total
    }

    pub fn leader(&self, shard: ShardId) -> &Replica {
        let n = self.server_cfg.f * 2 + 1;
        let r = self.vms[0].record.leader_of(shard, n);
        &self.servers[&(shard, r)]
    }
}

fn add_counters(total: &mut ServerCounters, c: &ServerCounters) {
    total.executions += c.executions;
    total.revokes += c.revokes;
    total.case2 += c.case2;
    total.case3 += c.case3;
    total.bumps += c.bumps;
    total.held += c.held;
    total.fetches += c.fetches;
    total.reexecuted += c.reexecuted;
    total.full_rebuilds += c.full_rebuilds;
}

pub struct World {
    pub cfg: ExperimentConfig,
    pub sim: Sim<Msg, Timer>,
    pub nodes: Nodes,
}

impl World {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let n = cfg.replicas();
        let m = cfg.shards;
        let rc = cfg.recovery_coordinator();

        let mut net = NetModel::new(cfg.site_owd_us());
        for s in 0..m {
            for r in 0..n {
                net.place(NodeId::server(s, r), r as usize);
            }
        }
        for (i, &site) in cfg.coordinator_sites.iter().enumerate() {
            net.place(NodeId::Coordinator(i as u32), site);
        }
        net.place(NodeId::Coordinator(rc), cfg.vm_site);
        for v in 0..VM_REPLICAS {
            net.place(NodeId::ViewManager(v), cfg.vm_site);
        }
        net.jitter = Jitter { mean_us: cfg.jitter_mean_ms * MS as f64, cap_us: ms(cfg.jitter_cap_ms) };
        net.drop_prob = cfg.drop;
        net.partitions = cfg
            .partitions
            .iter()
            .map(|p| Partition {
                groups: p.groups.iter().map(|g| g.iter().map(|n| n.0).collect::<BTreeSet<_>>()).collect(),
                start_us: ms(p.start_ms),
                end_us: ms(p.end_ms),
            })
            .collect();
        net.link_delays = cfg
            .link_delays
            .iter()
            .map(|l| LinkDelay {
                from: l.from.0,
                to: l.to.0,
                extra_us: ms(l.extra_ms),
                start_us: ms(l.start_ms),
                end_us: ms(l.end_ms),
            })
            .collect();

        let all: Vec<NodeId> = net.nodes().collect();
        let mut clock_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc10c_c10c);
        let mut clocks = ClockModel::random(&all, ms(cfg.clock_error_ms), cfg.max_drift_ppm, &mut clock_rng);
        for c in &cfg.clocks {
            clocks.set(c.node.0, NodeClock { offset_us: ms(c.offset_ms), drift_ppm: c.drift_ppm });
        }

        let leaders = cfg.initial_leaders();
        let view = ViewRecord {
            g_view: 0,
            g_vec: leaders.iter().map(|&r| r as u64).collect(),
            mode: cfg.initial_mode(),
        };
        let server_cfg = ServerConfig {
            f: cfg.f,
            shard_count: m,
            tick_us: ms(cfg.tick_ms),
            hash_mode: cfg.hash_mode,
            batched_inquiry: cfg.batched_inquiry,
            disable_round2: cfg.disable_round2,
            recovery_coordinator: rc,
            ..ServerConfig::default()
        };
        let servers = (0..m)
            .flat_map(|s| (0..n).map(move |r| (s, r)))
            .map(|(s, r)| ((s, r), Replica::new(server_cfg.clone(), s, r, view.clone())))
            .collect();

        let coord_cfg = CoordinatorConfig {
            f: cfg.f,
            shard_count: m,
            delta_us: ms(cfg.delta_ms),
            headroom_delta_us: ms(cfg.headroom_delta_ms),
            simple_quorum: cfg.simple_quorum,
            batched_inquiry: cfg.batched_inquiry,
            ..CoordinatorConfig::default()
        };
        let mut coordinators = BTreeMap::new();
        for i in 0..=rc {
            let workload = (cfg.workload_enabled && i < rc)
                .then(|| Workload::new(cfg.workload.clone(), m, i, cfg.seed));
            coordinators.insert(i, Coordinator::new(i, coord_cfg.clone(), Some(view.clone()), workload));
        }
        let mut followers: BTreeMap<usize, Vec<(u32, usize, Micros)>> = BTreeMap::new();
        for (j, s) in cfg.script.iter().enumerate() {
            coordinators.get_mut(&s.coord).expect("validated").add_script(j, s.ops.clone());
            if let Some(a) = s.after {
                followers.entry(a).or_default().push((s.coord, j, ms(s.delay_ms)));
            }
        }

        let vm_cfg = VmConfig {
            f: cfg.f,
            shard_count: m,
            vm_replicas: VM_REPLICAS,
            colocation_threshold_us: ms(cfg.colocation_threshold_ms),
            region_owd: cfg.region_owd_us(),
            mode_override: match cfg.mode {
                crate::config::ModeChoice::Auto => None,
                _ => Some(view.mode),
            },
            coordinators: (0..=rc).collect(),
            ..VmConfig::default()
        };
        let vms = (0..VM_REPLICAS).map(|v| ViewManager::new(v, vm_cfg.clone(), view.clone())).collect();

        let mut sim = Sim::new(cfg.seed, net, clocks);
        for f in &cfg.faults {
            let fault = match f.action {
                FaultAction::Crash => Fault::Crash,
                FaultAction::Restart => Fault::Restart,
            };
            sim.schedule_fault(f.node.0, ms(f.at_ms), fault);
        }
        for (j, s) in cfg.script.iter().enumerate() {
            if let Some(at) = s.at_ms {
                let node = NodeId::Coordinator(s.coord);
                let local = sim.clocks.local_clock(node, ms(at));
                sim.set_timer(node, local, Timer::Script(j));
            }
        }

        let mut world = Self {
            cfg,
            sim,
            nodes: Nodes {
                servers,
                coordinators,
                vms,
                server_cfg,
                initial_view: view,
                followers,
                crashes: Vec::new(),
                normal_at: BTreeMap::new(),
                retired: ServerCounters::default(),
            },
        };
        world.start();
        Ok(world)
    }

    fn start(&mut self) {
        let Self { sim, nodes, .. } = self;
        for (&k, s) in nodes.servers.iter_mut() {
            let node = NodeId::server(k.0, k.1);
            let mut out = sim.outbox(node);
            s.start(&mut out);
            sim.apply(node, out).expect("placed");
        }
        for c in nodes.coordinators.values_mut() {
            let node = c.node();
            let mut out = sim.outbox(node);
            c.start(&mut out);
            sim.apply(node, out).expect("placed");
        }
        for vm in nodes.vms.iter_mut() {
            let node = NodeId::ViewManager(vm.id);
            let mut out = sim.outbox(node);
            vm.start(&mut out);
            sim.apply(node, out).expect("placed");
        }
    }

    /// True time at which random arrivals stop.
    pub fn arrivals_end_us(&self) -> Micros {
        let w = &self.cfg.workload;
        let workload = if self.cfg.workload_enabled { w.start_us + w.duration_us } else { 0 };
        let script = self.cfg.script.iter().filter_map(|s| s.at_ms).map(ms).max().unwrap_or(0);
        workload.max(script)
    }

    pub fn advance_to(&mut self, until: Micros) {
        let Self { sim, nodes, .. } = self;
        sim.advance_to(until, |sim, ev| nodes.handle(sim, ev));
    }

    /// Runs arrivals, then drains in-flight work and lets leaders settle.
    pub fn run(&mut self) -> RunOutput {
        let end = self.arrivals_end_us();
        self.advance_to(end);
        for c in self.nodes.coordinators.values_mut() {
            c.stop_workload();
        }
        let deadline = end + ms(self.cfg.drain_ms);
        let script_len = self.cfg.script.len();
        while self.sim.now() < deadline && !self.nodes.quiescent(&self.sim, script_len) {
            let next = (self.sim.now() + STEP_US).min(deadline);
            self.advance_to(next);
        }
        let settle = self.sim.now() + SETTLE_US;
        self.advance_to(settle);
        self.output()
    }

    pub fn history(&self) -> Vec<HistoryRecord> {
        let mut h = merge_history(self.nodes.coordinators.values().flat_map(|c| c.history.iter().cloned()));
        h.sort_by_key(|r| (r.commit_us, r.id));
        h
    }

    pub fn finals(&self) -> Vec<ShardFinal> {
        let m = self.cfg.shards;
        (0..m)
            .map(|s| {
                let leader = self.nodes.leader(s);
                ShardFinal {
                    shard: s,
                    store: leader
                        .store
                        .snapshot()
                        .into_iter()
                        .filter(|(k, _)| shard_of(*k, m) == s)
                        .collect(),
                    log: leader.log().iter().map(|t| t.id).collect(),
                }
            })
            .collect()
    }

    /// Transaction id submitted for a script entry, once fired.
    pub fn script_txn(&self, idx: usize) -> Option<TxnId> {
        self.nodes.coordinators.values().find_map(|c| c.script_txns.get(&idx).copied())
    }

    pub fn output(&self) -> RunOutput {
        let history = self.history();
        let finals = self.finals();
        let w = &self.cfg.workload;
        let window = if self.cfg.workload_enabled { w.duration_us } else { self.sim.now() };
        let mut stats = RunStats::from_history(&history, window);
        let counters = self.nodes.counters();
        stats.rollbacks = counters.revokes;
        stats.rollback_rate = if stats.committed == 0 { 0.0 } else { counters.revokes as f64 / stats.committed as f64 };
        for c in self.nodes.coordinators.values() {
            let cs = c.stats;
            stats.retries += cs.retries;
            stats.dependent_committed += cs.dependent_committed;
            stats.dependent_aborted += cs.dependent_aborted;
            stats.dependent_retries += cs.dependent_retries;
            stats.skipped_arrivals += cs.skipped_arrivals;
            stats.incomplete += c.pending_ids().len() as u64;
        }
        let committed_views = &self.nodes.vms[0].committed;
        stats.view_changes = committed_views.len() as u64 - 1;
        if let (Some(&(crash, _)), Some(&(last_view, _))) = (self.nodes.crashes.first(), committed_views.last()) {
            if committed_views.len() > 1 {
                stats.recovery_downtime_ms = history
                    .iter()
                    .map(|r| r.commit_us)
                    .filter(|&c| c > last_view)
                    .min()
                    .map(|c| (c - crash) as f64 / MS as f64);
            }
        }
        stats.messages_sent = self.sim.counters.sent;
        stats.messages_lost = self.sim.counters.lost;
        stats.trace_digest = self.sim.trace_digest();
        let verdicts = self.cfg.check.then(|| Verdicts::compute(&history, &finals, self.cfg.shards));
        RunOutput { stats, history, finals, verdicts }
    }
}

/// Builds and runs one experiment.
pub fn run(cfg: ExperimentConfig) -> Result<RunOutput, ConfigError> {
    Ok(World::new(cfg)?.run())
}
