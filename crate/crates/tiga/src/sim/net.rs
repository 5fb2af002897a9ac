use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{NodeId, SimError};
use crate::types::Micros;

/// Truncated exponential jitter added to every delivery.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub mean_us: f64,
    pub cap_us: Micros,
}

impl Jitter {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Micros {
        if self.mean_us <= 0.0 || self.cap_us <= 0 {
            return 0;
        }
        let exp = Exp::new(1.0 / self.mean_us).expect("positive rate");
        for _ in 0..16 {
            let v: f64 = exp.sample(rng);
            if v <= self.cap_us as f64 {
                return v.round() as Micros;
            }
        }
        self.cap_us
    }
}

/// Nodes split into groups; traffic between different groups is dropped
/// while `start <= now < end`. Unlisted nodes form one implicit group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<BTreeSet<NodeId>>,
    pub start_us: Micros,
    pub end_us: Micros,
}

impl Partition {
    fn group_of(&self, n: NodeId) -> usize {
        self.groups
            .iter()
            .position(|g| g.contains(&n))
            .unwrap_or(self.groups.len())
    }

    pub fn separates(&self, a: NodeId, b: NodeId, now: Micros) -> bool {
        now >= self.start_us && now < self.end_us && self.group_of(a) != self.group_of(b)
    }
}

/// Extra one-way delay on a directed link while `start <= now < end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkDelay {
    pub from: NodeId,
    pub to: NodeId,
    pub extra_us: Micros,
    pub start_us: Micros,
    pub end_us: Micros,
}

#[derive(Clone, Debug, Default)]
pub struct NetModel {
    /// Site of each node; one-way delays are defined between sites.
    locations: BTreeMap<NodeId, usize>,
    site_owd: Vec<Vec<Micros>>,
    pub jitter: Jitter,
    pub drop_prob: f64,
    pub partitions: Vec<Partition>,
    pub link_delays: Vec<LinkDelay>,
}

impl NetModel {
    pub fn new(site_owd: Vec<Vec<Micros>>) -> Self {
        Self {
            site_owd,
            ..Self::default()
        }
    }

    pub fn place(&mut self, node: NodeId, site: usize) {
        assert!(site < self.site_owd.len(), "site {site} outside delay matrix");
        self.locations.insert(node, site);
    }

    pub fn knows(&self, node: NodeId) -> bool {
        self.locations.contains_key(&node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.locations.keys().copied()
    }

    pub fn site_of(&self, node: NodeId) -> Result<usize, SimError> {
        self.locations
            .get(&node)
            .copied()
            .ok_or(SimError::UnknownNode(node))
    }

    /// Configured one-way delay, excluding jitter and link overrides.
    pub fn base_owd(&self, from: NodeId, to: NodeId) -> Result<Micros, SimError> {
        let (a, b) = (self.site_of(from)?, self.site_of(to)?);
        Ok(self.site_owd[a][b])
    }

    fn extra(&self, from: NodeId, to: NodeId, now: Micros) -> Micros {
        self.link_delays
            .iter()
            .filter(|l| l.from == from && l.to == to && now >= l.start_us && now < l.end_us)
            .map(|l| l.extra_us)
            .sum()
    }

    pub fn partitioned(&self, from: NodeId, to: NodeId, now: Micros) -> bool {
        self.partitions.iter().any(|p| p.separates(from, to, now))
    }

    /// True-time delay of one transmission, or `None` if it is lost.
    pub fn transit<R: Rng>(
        &self,
        from: NodeId,
        to: NodeId,
        now: Micros,
        rng: &mut R,
    ) -> Result<Option<Micros>, SimError> {
        let base = self.base_owd(from, to)?;
        if self.partitioned(from, to, now) {
            return Ok(None);
        }
        if self.drop_prob > 0.0 && rng.random::<f64>() < self.drop_prob {
            return Ok(None);
        }
        let delay = base + self.extra(from, to, now) + self.jitter.sample(rng);
        Ok(Some(delay.max(0)))
    }
}

/// Exponentially weighted one-way delay estimates from timestamped probes.
#[derive(Clone, Debug)]
pub struct OwdEstimator {
    alpha: f64,
    estimates: BTreeMap<NodeId, f64>,
}

impl Default for OwdEstimator {
    fn default() -> Self {
        Self::new(0.1)
    }
}

impl OwdEstimator {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            estimates: BTreeMap::new(),
        }
    }

    /// Records a probe from `peer`'s perspective: sent at `send_local` on the
    /// sender's clock, received at `recv_local` on the receiver's clock.
    pub fn observe(&mut self, peer: NodeId, send_local: Micros, recv_local: Micros) {
        let sample = (recv_local - send_local).max(0) as f64;
        self.estimates
            .entry(peer)
            .and_modify(|e| *e += self.alpha * (sample - *e))
            .or_insert(sample);
    }

    pub fn estimate(&self, peer: NodeId) -> Option<Micros> {
        self.estimates.get(&peer).map(|e| e.round() as Micros)
    }

    pub fn seed(&mut self, peer: NodeId, owd: Micros) {
        self.estimates.insert(peer, owd as f64);
    }
}
