//! Experiment configuration with validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::server::HashMode;
use crate::sim::NodeId;
use crate::types::{replicas, Micros, Mode, Op, MS};
use crate::view_manager::choose_mode;
use crate::workload::WorkloadConfig;

/// Node reference in configs: `c<i>`, `s<shard>.<replica>` or `vm<i>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeName(pub NodeId);

impl FromStr for NodeName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("bad node name {s:?}; expected c<i>, s<shard>.<replica> or vm<i>");
        let num = |x: &str| x.parse::<u32>().map_err(|_| bad());
        if let Some(rest) = s.strip_prefix("vm") {
            return Ok(NodeName(NodeId::ViewManager(num(rest)?)));
        }
        if let Some(rest) = s.strip_prefix('c') {
            return Ok(NodeName(NodeId::Coordinator(num(rest)?)));
        }
        if let Some(rest) = s.strip_prefix('s') {
            let (a, b) = rest.split_once('.').ok_or_else(bad)?;
            return Ok(NodeName(NodeId::server(num(a)?, num(b)?)));
        }
        Err(bad())
    }
}

impl TryFrom<String> for NodeName {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<NodeName> for String {
    fn from(n: NodeName) -> String {
        n.to_string()
    }
}

impl fmt::Display for NodeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            NodeId::Coordinator(i) => write!(f, "c{i}"),
            NodeId::Server { shard, replica } => write!(f, "s{shard}.{replica}"),
            NodeId::ViewManager(i) => write!(f, "vm{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    /// Preventive iff the initial leaders are co-located.
    #[default]
    Auto,
    Preventive,
    Detective,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultAction {
    Crash,
    Restart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at_ms: f64,
    pub node: NodeName,
    pub action: FaultAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub groups: Vec<Vec<NodeName>>,
    pub start_ms: f64,
    pub end_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkDelaySpec {
    pub from: NodeName,
    pub to: NodeName,
    pub extra_ms: f64,
    #[serde(default)]
    pub start_ms: f64,
    #[serde(default = "forever")]
    pub end_ms: f64,
}

fn forever() -> f64 {
    1e12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockSpec {
    pub node: NodeName,
    pub offset_ms: f64,
    #[serde(default)]
    pub drift_ppm: f64,
}

/// A transaction submitted at a fixed true time, or a delay after another
/// script entry commits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptSpec {
    pub coord: u32,
    #[serde(default)]
    pub at_ms: Option<f64>,
    #[serde(default)]
    pub after: Option<usize>,
    #[serde(default)]
    pub delay_ms: f64,
    pub ops: Vec<Op>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub f: u32,
    pub shards: u32,
    /// One-way delay between sites; replica r of every shard sits at site r.
    pub owd_ms: Vec<Vec<f64>>,
    /// Site of each workload coordinator.
    pub coordinator_sites: Vec<usize>,
    pub vm_site: usize,
    pub jitter_mean_ms: f64,
    pub jitter_cap_ms: f64,
    pub drop: f64,
    /// Clock offsets are drawn uniformly from [-error, error].
    pub clock_error_ms: f64,
    pub max_drift_ppm: f64,
    pub clocks: Vec<ClockSpec>,
    /// Initial leader replica per shard; defaults to replica 0 everywhere.
    pub leaders: Option<Vec<u32>>,
    pub mode: ModeChoice,
    pub colocation_threshold_ms: f64,
    pub delta_ms: f64,
    pub headroom_delta_ms: f64,
    pub tick_ms: f64,
    pub hash_mode: HashMode,
    pub batched_inquiry: bool,
    pub simple_quorum: bool,
    pub disable_round2: bool,
    pub workload: WorkloadConfig,
    /// Coordinators without random arrivals (script only).
    pub workload_enabled: bool,
    pub script: Vec<ScriptSpec>,
    pub faults: Vec<FaultSpec>,
    pub partitions: Vec<PartitionSpec>,
    pub link_delays: Vec<LinkDelaySpec>,
    /// Time allowed after the last arrival for in-flight transactions.
    pub drain_ms: f64,
    pub check: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            f: 1,
            shards: 3,
            owd_ms: symmetric(3, 60.0),
            coordinator_sites: vec![0, 1, 2],
            vm_site: 0,
            jitter_mean_ms: 0.0,
            jitter_cap_ms: 0.0,
            drop: 0.0,
            clock_error_ms: 0.0,
            max_drift_ppm: 0.0,
            clocks: Vec::new(),
            leaders: None,
            mode: ModeChoice::Auto,
            colocation_threshold_ms: 10.0,
            delta_ms: 10.0,
            headroom_delta_ms: 0.0,
            tick_ms: 1.0,
            hash_mode: HashMode::PerKey,
            batched_inquiry: false,
            simple_quorum: false,
            disable_round2: false,
            workload: WorkloadConfig::default(),
            workload_enabled: true,
            script: Vec::new(),
            faults: Vec::new(),
            partitions: Vec::new(),
            link_delays: Vec::new(),
            drain_ms: 5_000.0,
            check: true,
        }
    }
}

/// Sites with the same delay between every distinct pair.
pub fn symmetric(sites: usize, owd_ms: f64) -> Vec<Vec<f64>> {
    (0..sites)
        .map(|a| (0..sites).map(|b| if a == b { 0.0 } else { owd_ms }).collect())
        .collect()
}

pub fn ms(v: f64) -> Micros {
    (v * MS as f64).round() as Micros
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

fn err(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn replicas(&self) -> u32 {
        replicas(self.f)
    }

    pub fn initial_leaders(&self) -> Vec<u32> {
        self.leaders.clone().unwrap_or_else(|| vec![0; self.shards as usize])
    }

    pub fn site_owd_us(&self) -> Vec<Vec<Micros>> {
        self.owd_ms.iter().map(|row| row.iter().map(|&v| ms(v)).collect()).collect()
    }

    /// Delay between regions as seen by the view manager.
    pub fn region_owd_us(&self) -> Vec<Vec<Micros>> {
        let n = self.replicas() as usize;
        self.site_owd_us().into_iter().take(n).map(|row| row.into_iter().take(n).collect()).collect()
    }

    pub fn initial_mode(&self) -> Mode {
        match self.mode {
            ModeChoice::Preventive => Mode::Preventive,
            ModeChoice::Detective => Mode::Detective,
            ModeChoice::Auto => choose_mode(
                &self.initial_leaders(),
                &self.region_owd_us(),
                ms(self.colocation_threshold_ms),
            ),
        }
    }

    /// Workload coordinators plus the recovery coordinator.
    pub fn recovery_coordinator(&self) -> u32 {
        self.coordinator_sites.len() as u32
    }

    fn node_known(&self, n: NodeId) -> bool {
        match n {
            NodeId::Coordinator(i) => i <= self.recovery_coordinator(),
            NodeId::Server { shard, replica } => shard < self.shards && replica < self.replicas(),
            NodeId::ViewManager(i) => i < 3,
        }
    }

    fn validate_workload(&self) -> Result<(), ConfigError> {
        let w = &self.workload;
        if w.ops_per_txn == 0 || w.ops_per_txn > self.shards {
            return Err(err("workload.ops_per_txn", format!("must be in 1..={}", self.shards)));
        }
        if w.keys_per_shard < 2 {
            return Err(err("workload.keys_per_shard", "must be at least 2"));
        }
        if !w.skew.is_finite() || w.skew < 0.0 {
            return Err(err("workload.skew", "must be non-negative"));
        }
        if w.rate_per_coord <= 0.0 {
            return Err(err("workload.rate_per_coord", "must be positive"));
        }
        if !(0.0..=1.0).contains(&w.read_fraction) {
            return Err(err("workload.read_fraction", "must be a probability"));
        }
        if !(0.0..=1.0).contains(&w.interactive_fraction) {
            return Err(err("workload.interactive_fraction", "must be a probability"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.f == 0 {
            return Err(err("f", "must be at least 1"));
        }
        if self.shards == 0 {
            return Err(err("shards", "must be at least 1"));
        }
        let n = self.replicas() as usize;
        let sites = self.owd_ms.len();
        if sites < n {
            return Err(err("owd_ms", format!("needs at least {n} sites, one per replica")));
        }
        for (i, row) in self.owd_ms.iter().enumerate() {
            if row.len() != sites {
                return Err(err(format!("owd_ms[{i}]"), format!("row has {} entries, expected {sites}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(err(format!("owd_ms[{i}]"), "delays must be finite and non-negative"));
            }
        }
        if let Some(i) = self.coordinator_sites.iter().position(|s| *s >= sites) {
            return Err(err(format!("coordinator_sites[{i}]"), "site outside owd_ms"));
        }
        if self.vm_site >= sites {
            return Err(err("vm_site", "site outside owd_ms"));
        }
        if !(0.0..=1.0).contains(&self.drop) {
            return Err(err("drop", "must be a probability"));
        }
        for (name, v) in [
            ("jitter_mean_ms", self.jitter_mean_ms),
            ("jitter_cap_ms", self.jitter_cap_ms),
            ("clock_error_ms", self.clock_error_ms),
            ("max_drift_ppm", self.max_drift_ppm),
            ("drain_ms", self.drain_ms),
            ("delta_ms", self.delta_ms),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(err(name, "must be finite and non-negative"));
            }
        }
        if !self.tick_ms.is_finite() || self.tick_ms <= 0.0 {
            return Err(err("tick_ms", "must be positive"));
        }
        if let Some(l) = &self.leaders {
            if l.len() != self.shards as usize {
                return Err(err("leaders", format!("expected {} entries", self.shards)));
            }
            if l.iter().any(|r| *r >= self.replicas()) {
                return Err(err("leaders", "replica id out of range"));
            }
        }
        if self.workload_enabled {
            self.validate_workload()?;
        }
        for (i, s) in self.script.iter().enumerate() {
            if s.coord > self.recovery_coordinator() {
                return Err(err(format!("script[{i}].coord"), "unknown coordinator"));
            }
            if s.at_ms.is_some() == s.after.is_some() {
                return Err(err(format!("script[{i}]"), "set exactly one of at_ms and after"));
            }
            if s.after.is_some_and(|a| a >= self.script.len() || a == i) {
                return Err(err(format!("script[{i}].after"), "must name another script entry"));
            }
            if s.ops.is_empty() {
                return Err(err(format!("script[{i}].ops"), "must not be empty"));
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            if !self.node_known(f.node.0) {
                return Err(err(format!("faults[{i}].node"), format!("unknown node {}", f.node)));
            }
            if matches!(f.node.0, NodeId::ViewManager(_)) {
                return Err(err(format!("faults[{i}].node"), "view-manager replicas do not fail"));
            }
            if matches!((f.node.0, f.action), (NodeId::Coordinator(_), FaultAction::Restart)) {
                return Err(err(format!("faults[{i}].action"), "coordinators are crash-stop"));
            }
        }
        for (i, l) in self.link_delays.iter().enumerate() {
            for (side, n) in [("from", l.from), ("to", l.to)] {
                if !self.node_known(n.0) {
                    return Err(err(format!("link_delays[{i}].{side}"), format!("unknown node {n}")));
                }
            }
        }
        for (i, p) in self.partitions.iter().enumerate() {
            if let Some(n) = p.groups.iter().flatten().find(|n| !self.node_known(n.0)) {
                return Err(err(format!("partitions[{i}].groups"), format!("unknown node {n}")));
            }
        }
        for (i, c) in self.clocks.iter().enumerate() {
            if !self.node_known(c.node.0) {
                return Err(err(format!("clocks[{i}].node"), format!("unknown node {}", c.node)));
            }
        }
        Ok(())
    }
}
