use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NodeId;
use crate::types::Micros;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeClock {
    pub offset_us: Micros,
    pub drift_ppm: f64,
}

impl NodeClock {
    pub fn local(&self, true_t: Micros) -> Micros {
        true_t + self.offset_us + (self.drift_ppm * true_t as f64 / 1e6).round() as Micros
    }

    /// Smallest true time whose local reading is at least `local`.
    pub fn true_for(&self, local: Micros) -> Micros {
        let scale = 1.0 + self.drift_ppm / 1e6;
        let mut t = ((local - self.offset_us) as f64 / scale).floor() as Micros;
        while self.local(t) < local {
            t += 1;
        }
        while self.local(t - 1) >= local {
            t -= 1;
        }
        t
    }
}

/// Per-node clocks: `local = true + offset + drift_ppm * true / 1e6`.
#[derive(Clone, Debug, Default)]
pub struct ClockModel {
    clocks: BTreeMap<NodeId, NodeClock>,
    /// Bound the offsets were drawn within, if any.
    pub error_bound_us: Option<Micros>,
}

impl ClockModel {
    pub fn perfect() -> Self {
        Self::default()
    }

    /// Offsets drawn uniformly from `[-bound, bound]` and drifts from
    /// `[-max_drift, max_drift]` ppm, in node order.
    pub fn random<R: Rng>(
        nodes: &[NodeId],
        bound_us: Micros,
        max_drift_ppm: f64,
        rng: &mut R,
    ) -> Self {
        let mut clocks = BTreeMap::new();
        for &n in nodes {
            let offset_us = if bound_us > 0 {
                rng.random_range(-bound_us..=bound_us)
            } else {
                0
            };
            let drift_ppm = if max_drift_ppm > 0.0 {
                rng.random_range(-max_drift_ppm..=max_drift_ppm)
            } else {
                0.0
            };
            clocks.insert(n, NodeClock { offset_us, drift_ppm });
        }
        Self {
            clocks,
            error_bound_us: Some(bound_us),
        }
    }

    pub fn set(&mut self, node: NodeId, clock: NodeClock) {
        self.clocks.insert(node, clock);
    }

    pub fn get(&self, node: NodeId) -> NodeClock {
        self.clocks.get(&node).copied().unwrap_or_default()
    }

    pub fn local_clock(&self, node: NodeId, true_now: Micros) -> Micros {
        self.get(node).local(true_now)
    }

    pub fn true_for_local(&self, node: NodeId, local: Micros) -> Micros {
        self.get(node).true_for(local)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_clock_examples() {
        let n = NodeId::Coordinator(0);
        let mut m = ClockModel::perfect();
        assert_eq!(m.local_clock(n, 100), 100);
        m.set(n, NodeClock { offset_us: 4540, drift_ppm: 0.0 });
        assert_eq!(m.local_clock(n, 100), 4640);
        m.set(n, NodeClock { offset_us: 0, drift_ppm: 100.0 });
        assert_eq!(m.local_clock(n, 1_000_000), 1_000_100);
    }

    #[test]
    fn inverse_is_tight() {
        let c = NodeClock { offset_us: -3_000, drift_ppm: 37.5 };
        for local in [0, 1, 999, 123_456, 9_999_999] {
            let t = c.true_for(local);
            assert!(c.local(t) >= local);
            assert!(c.local(t - 1) < local);
        }
    }

    #[test]
    fn local_is_monotone() {
        let c = NodeClock { offset_us: 17, drift_ppm: -250.0 };
        let mut prev = c.local(0);
        for t in 1..5_000 {
            let l = c.local(t * 97);
            assert!(l >= prev);
            prev = l;
        }
    }
}
