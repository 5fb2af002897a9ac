//! Run summary computed from the committed history and node counters.

use serde::{Deserialize, Serialize};

use crate::checker::{CommitPath, HistoryRecord};
use crate::types::{Micros, MS};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub committed: u64,
    /// Submitted but not committed when the run ended.
    pub incomplete: u64,
    pub throughput_per_s: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    pub fast_fraction: f64,
    pub slow_fraction: f64,
    /// Optimistic executions revoked by a later timestamp agreement.
    pub rollbacks: u64,
    pub rollback_rate: f64,
    pub retries: u64,
    pub dependent_committed: u64,
    pub dependent_aborted: u64,
    pub dependent_retries: u64,
    pub skipped_arrivals: u64,
    pub view_changes: u64,
    /// From the first crash to the first commit after the last view change.
    pub recovery_downtime_ms: Option<f64>,
    pub messages_sent: u64,
    pub messages_lost: u64,
    pub trace_digest: String,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[Micros], p: f64) -> Micros {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn latencies(history: &[HistoryRecord]) -> Vec<Micros> {
    let mut l: Vec<Micros> = history.iter().map(|r| r.commit_us - r.start_us).collect();
    l.sort_unstable();
    l
}

pub fn to_ms(us: Micros) -> f64 {
    us as f64 / MS as f64
}

impl RunStats {
    /// Latency and path figures over `history`; throughput over `window_us`.
    pub fn from_history(history: &[HistoryRecord], window_us: Micros) -> Self {
        let lat = latencies(history);
        let n = history.len() as u64;
        let fast = history.iter().filter(|r| r.path == CommitPath::Fast).count() as u64;
        let frac = |x: u64| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        let mean = if lat.is_empty() { 0.0 } else { lat.iter().sum::<Micros>() as f64 / lat.len() as f64 };
        Self {
            committed: n,
            throughput_per_s: if window_us > 0 { n as f64 * 1e6 / window_us as f64 } else { 0.0 },
            p50_ms: to_ms(percentile(&lat, 50.0)),
            p90_ms: to_ms(percentile(&lat, 90.0)),
            p99_ms: to_ms(percentile(&lat, 99.0)),
            mean_ms: mean / MS as f64,
            fast_fraction: frac(fast),
            slow_fraction: frac(n - fast),
            ..Self::default()
        }
    }
}
