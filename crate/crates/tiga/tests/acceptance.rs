//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. An optional argument selects criteria by
//! number, e.g. `cargo test --test acceptance -- 4 5`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tiga::checker::{CommitPath, HistoryRecord, Verdict, Violation};
use tiga::config::{
    ClockSpec, ExperimentConfig, FaultAction, FaultSpec, LinkDelaySpec, ModeChoice, NodeName, ScriptSpec,
};
use tiga::coordinator::{decide, Decision};
use tiga::hash::{digest, Hash160, LogHash};
use tiga::message::{Reply, ReplyKind};
use tiga::stats::{latencies, percentile, to_ms};
use tiga::types::{super_quorum, ExecResult, Mode, Op, OpKind, Timestamp, Txn, TxnId, ViewRecord, MS};
use tiga::world::World;

const OWD_MS: f64 = 60.0;
const WRTT_MS: f64 = 2.0 * OWD_MS;
const TICK_MS: f64 = 1.0;

const FUZZ_RUNS_PER_CELL: u64 = 42;
const FUZZ_MIN_TXNS: u64 = 500;
const FAST_PATH_FRACTION: f64 = 0.95;
const SLOW_PATH_WRTT: (f64, f64) = (1.5, 2.0);
const INVERSION_SEEDS: u64 = 100;
const RECOVERY_SEEDS: u64 = 100;
const RESUME_WINDOW_MS: f64 = 10.0 * 50.0;
const HEADROOM_SWEEP_MS: [f64; 5] = [-50.0, -25.0, 0.0, 25.0, 50.0];
const SWEEP_SEEDS: u64 = 3;
const CLOCK_ERROR_TOLERANCE: f64 = 0.10;
const CLOCK_ERROR_SLOWDOWN: f64 = 1.3;
const HASH_SEQUENCES: u64 = 10_000;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "safety fuzz", safety_fuzz),
        (2, "one-WRTT fast path", fast_path_latency),
        (3, "slow-path bound", slow_path_bound),
        (4, "timestamp inversion", timestamp_inversion),
        (5, "recovery durability", recovery),
        (6, "quorum arithmetic", quorum_arithmetic),
        (7, "headroom monotonicity", headroom_sweep),
        (8, "clock-error degradation", clock_error_sweep),
        (9, "hash properties", hash_properties),
        (10, "replay determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let started = std::time::Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "{} criterion {n:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ----- shared helpers ------------------------------------------------------

fn node(name: &str) -> NodeName {
    name.parse().expect("valid node name")
}

fn inc(key: u64) -> Op {
    Op { key, kind: OpKind::Increment(1) }
}

fn at(coord: u32, at_ms: f64, ops: Vec<Op>) -> ScriptSpec {
    ScriptSpec { coord, at_ms: Some(at_ms), after: None, delay_ms: 0.0, ops }
}

fn after(coord: u32, idx: usize, delay_ms: f64, ops: Vec<Op>) -> ScriptSpec {
    ScriptSpec { coord, at_ms: None, after: Some(idx), delay_ms, ops }
}

fn delay(from: &str, to: &str, extra_ms: f64, start_ms: f64) -> LinkDelaySpec {
    LinkDelaySpec { from: node(from), to: node(to), extra_ms, start_ms, end_ms: 1e12 }
}

fn scripted(shards: u32) -> ExperimentConfig {
    ExperimentConfig { shards, workload_enabled: false, ..ExperimentConfig::default() }
}

/// Spreads leaders so that shard `s` is led from site `s`.
fn detective(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.leaders = Some((0..cfg.shards).map(|s| s % cfg.replicas()).collect());
    cfg.mode = ModeChoice::Detective;
    cfg
}

fn preventive(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.leaders = None;
    cfg.mode = ModeChoice::Preventive;
    cfg
}

fn by_mode(cfg: ExperimentConfig, mode: Mode) -> ExperimentConfig {
    match mode {
        Mode::Preventive => preventive(cfg),
        Mode::Detective => detective(cfg),
    }
}

fn run_world(cfg: ExperimentConfig) -> (World, tiga::world::RunOutput) {
    let mut w = World::new(cfg).expect("valid config");
    let out = w.run();
    (w, out)
}

fn passed(out: &tiga::world::RunOutput) -> bool {
    out.verdicts.as_ref().is_some_and(|v| v.passed())
}

fn record(out: &tiga::world::RunOutput, id: TxnId) -> Option<&HistoryRecord> {
    out.history.iter().find(|r| r.id == id)
}

fn latency_ms(r: &HistoryRecord) -> f64 {
    to_ms(r.commit_us - r.start_us)
}

fn p50_ms(history: &[HistoryRecord]) -> f64 {
    to_ms(percentile(&latencies(history), 50.0))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ----- 1 -------------------------------------------------------------------

fn fuzz_cfg(seed: u64, skew: f64, drop: f64, mode: Mode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed, drop, jitter_mean_ms: 2.0, jitter_cap_ms: 20.0, ..Default::default() };
    cfg.workload.skew = skew;
    cfg.workload.keys_per_shard = 1_000;
    cfg.workload.duration_us = 2_200 * MS;
    by_mode(cfg, mode)
}

fn safety_fuzz() -> Outcome {
    let mut cells = Vec::new();
    for skew in [0.5, 0.9, 0.99] {
        for drop in [0.0, 0.01] {
            for mode in [Mode::Preventive, Mode::Detective] {
                for i in 0..FUZZ_RUNS_PER_CELL {
                    cells.push((1_000 + cells.len() as u64, skew, drop, mode, i));
                }
            }
        }
    }
    let results: Vec<_> = cells
        .par_iter()
        .map(|&(seed, skew, drop, mode, _)| {
            let (_, out) = run_world(fuzz_cfg(seed, skew, drop, mode));
            (seed, skew, drop, mode, passed(&out), out.stats.committed, out.stats.incomplete, out.verdicts)
        })
        .collect();
    let runs = results.len();
    let bad: Vec<_> = results.iter().filter(|r| !r.4).collect();
    let min_commits = results.iter().map(|r| r.5).min().unwrap_or(0);
    let incomplete: u64 = results.iter().map(|r| r.6).sum();
    let mut detail = format!("{runs} runs, {} checker failures, min committed {min_commits}, incomplete {incomplete}", bad.len());
    if let Some(b) = bad.first() {
        detail += &format!("; first failure seed={} skew={} drop={} mode={:?}: {:?}", b.0, b.1, b.2, b.3, b.7);
    }
    Outcome::new(runs >= 500 && bad.is_empty() && min_commits >= FUZZ_MIN_TXNS, detail)
}

// ----- 2 -------------------------------------------------------------------

fn fast_path_latency() -> Outcome {
    let cfg = ExperimentConfig::default();
    let bound_ms = 2.0 * OWD_MS + cfg.delta_ms + 2.0 * TICK_MS;
    let mut parts = Vec::new();
    let mut pass = true;
    for mode in [Mode::Preventive, Mode::Detective] {
        let (within, total) = (1..=3)
            .map(|seed| {
                let (_, out) = run_world(by_mode(ExperimentConfig { seed, ..cfg.clone() }, mode));
                let within = out.history.iter().filter(|r| latency_ms(r) <= bound_ms).count();
                (within, out.history.len())
            })
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        let frac = within as f64 / total.max(1) as f64;
        pass &= frac >= FAST_PATH_FRACTION && total > 0;
        parts.push(format!("{mode:?} {:.1}% of {total}", frac * 100.0));
    }
    Outcome::new(pass, format!("within {bound_ms}ms: {}", parts.join(", ")))
}

// ----- 3 -------------------------------------------------------------------

/// A txn submitted next to shard `shard`'s leader reaches one follower after
/// a conflicting txn with a larger timestamp was released there, so that
/// follower cannot vouch for it on the fast path. The link delay starts just
/// before submission, so the coordinator's delay estimates do not cover it.
fn late_follower_case(mode: Mode, shard: u32, multi: bool, hi: f64) -> Result<f64, String> {
    let mut cfg = by_mode(scripted(3), mode);
    let n = cfg.replicas();
    let leader = cfg.initial_leaders()[shard as usize];
    let (late, other) = ((leader + 1) % n, (leader + 2) % n);
    let key = shard as u64;
    let late_ops = if multi { (0..3).map(|k| inc(key + k)).collect() } else { vec![inc(key)] };
    cfg.script = vec![at(leader, 1_000.0, late_ops), at(other, 1_005.0, vec![inc(key)])];
    cfg.link_delays = vec![delay(&format!("c{leader}"), &format!("s{shard}.{late}"), 40.0, 990.0)];
    let (w, out) = run_world(cfg);
    if out.stats.incomplete > 0 || out.history.len() != 2 {
        return Err(format!("{} committed, {} incomplete", out.history.len(), out.stats.incomplete));
    }
    if !passed(&out) {
        return Err(format!("checker: {:?}", out.verdicts));
    }
    let r = record(&out, w.script_txn(0).expect("fired")).expect("committed");
    if r.path != CommitPath::Slow {
        return Err(format!("late txn committed on the {:?} path", r.path));
    }
    if let Some(s) = out.history.iter().find(|x| x.path == CommitPath::Slow && latency_ms(x) > hi) {
        return Err(format!("slow commit took {}ms", latency_ms(s)));
    }
    Ok(latency_ms(r))
}

fn slow_path_bound() -> Outcome {
    // Round trips plus the configured headroom margin, as in criterion 2.
    let delta = ExperimentConfig::default().delta_ms;
    let lo = SLOW_PATH_WRTT.0 * WRTT_MS + delta - TICK_MS;
    let hi = SLOW_PATH_WRTT.1 * WRTT_MS + delta + TICK_MS;
    let mut cases = Vec::new();
    for mode in [Mode::Preventive, Mode::Detective] {
        for shard in 0..3 {
            for multi in [false, true] {
                cases.push((mode, shard, multi));
            }
        }
    }
    let mut lat = Vec::new();
    let mut errors = Vec::new();
    for (mode, shard, multi) in cases {
        match late_follower_case(mode, shard, multi, hi) {
            Ok(l) if (lo..=hi).contains(&l) => lat.push(l),
            Ok(l) => errors.push(format!("{mode:?} shard {shard} multi={multi}: {l}ms")),
            Err(e) => errors.push(format!("{mode:?} shard {shard} multi={multi}: {e}")),
        }
    }
    // The same disturbance under load must not lose anything.
    let mut load = fuzz_cfg(7, 0.99, 0.0, Mode::Preventive);
    load.link_delays = vec![LinkDelaySpec { end_ms: 1_800.0, ..delay("c0", "s0.1", 40.0, 1_500.0) }];
    let (_, out) = run_world(load);
    if out.stats.incomplete > 0 || !passed(&out) {
        errors.push(format!("under load: {} incomplete, {:?}", out.stats.incomplete, out.verdicts));
    }
    let range = lat.iter().fold((f64::MAX, f64::MIN), |a, &l| (a.0.min(l), a.1.max(l)));
    let detail = if errors.is_empty() {
        format!(
            "{} late txns on the slow path in {:.0}..{:.0}ms (bound {lo}..{hi}ms), loaded run lost none",
            lat.len(),
            range.0,
            range.1
        )
    } else {
        errors.join("; ")
    };
    Outcome::new(errors.is_empty(), detail)
}

// ----- 4 -------------------------------------------------------------------

/// Two shards with leaders in different regions. Shard 0's leader runs 500ms
/// ahead. T1 reaches it late, after the conflicting T0 was released there, so
/// it is raised well above the timestamp shard 1's leader used.
/// The link from shard 0's leader to shard 1's leader is slow, so shard 1
/// keeps its smaller value for a long time. T2 follows T1 on shard 0. T3
/// runs on shard 1 only and starts after T2 has committed.
fn inversion_cfg(seed: u64, round2: bool) -> ExperimentConfig {
    let mut cfg = detective(scripted(2));
    cfg.seed = seed;
    cfg.jitter_mean_ms = 1.0;
    cfg.jitter_cap_ms = 5.0;
    cfg.disable_round2 = !round2;
    cfg.clocks = vec![ClockSpec { node: node("s0.0"), offset_ms: 500.0, drift_ppm: 0.0 }];
    cfg.script = vec![
        at(2, 1_000.0, vec![inc(0), inc(1)]),
        at(0, 1_300.0, vec![inc(0)]),
        at(0, 1_600.0, vec![inc(0)]),
        after(1, 2, 1.0, vec![inc(1)]),
    ];
    cfg.link_delays = vec![delay("c2", "s0.0", 400.0, 990.0), delay("s0.0", "s1.1", 1_000.0, 990.0)];
    cfg
}

/// Shard 0's servers all run 300ms ahead of shard 1's.
fn skewed_shards_cfg(seed: u64) -> ExperimentConfig {
    let mut cfg = detective(scripted(2));
    cfg.seed = seed;
    cfg.jitter_mean_ms = 1.0;
    cfg.jitter_cap_ms = 5.0;
    cfg.clocks = (0..3)
        .map(|r| ClockSpec { node: node(&format!("s0.{r}")), offset_ms: 300.0, drift_ppm: 0.0 })
        .collect();
    cfg.script = vec![
        at(2, 990.0, vec![inc(0), inc(1)]),
        at(0, 1_000.0, vec![inc(0)]),
        after(1, 1, 1.0, vec![inc(1)]),
    ];
    cfg
}

fn timestamp_inversion() -> Outcome {
    let seeds: Vec<u64> = (1..=INVERSION_SEEDS).collect();
    let broken: Vec<Result<(), String>> = seeds
        .par_iter()
        .map(|&seed| {
            let (w, out) = run_world(inversion_cfg(seed, false));
            let pair: BTreeSet<TxnId> = [2, 3].iter().filter_map(|&i| w.script_txn(i)).collect();
            match out.verdicts.map(|v| v.strict) {
                Some(Ok(Verdict::Fail(wit)))
                    if wit.kind == Violation::Realtime && pair == BTreeSet::from([wit.first, wit.second]) =>
                {
                    Ok(())
                }
                other => Err(format!("seed {seed}: {other:?}")),
            }
        })
        .collect();
    let full: Vec<Result<(), String>> = seeds
        .par_iter()
        .map(|&seed| {
            let (_, out) = run_world(inversion_cfg(seed, true));
            if passed(&out) && out.stats.incomplete == 0 && out.history.len() == 4 {
                Ok(())
            } else {
                Err(format!("seed {seed}: {:?}", out.verdicts))
            }
        })
        .collect();
    let skewed: Vec<Result<(), String>> = seeds
        .par_iter()
        .map(|&seed| {
            let (_, out) = run_world(skewed_shards_cfg(seed));
            if passed(&out) && out.history.len() == 3 {
                Ok(())
            } else {
                Err(format!("seed {seed}: {:?}", out.verdicts))
            }
        })
        .collect();
    let count = |v: &[Result<(), String>]| v.iter().filter(|r| r.is_ok()).count();
    let first_err = broken.iter().chain(&full).chain(&skewed).find_map(|r| r.clone().err());
    let pass = count(&broken) == seeds.len() && count(&full) == seeds.len() && count(&skewed) == seeds.len();
    let mut detail = format!(
        "single round caught with witness (T2, T3) {}/{n}; full protocol passed {}/{n}; skewed shards passed {}/{n}",
        count(&broken),
        count(&full),
        count(&skewed),
        n = seeds.len()
    );
    if let Some(e) = first_err {
        detail += &format!("; {e}");
    }
    Outcome::new(pass, detail)
}

// ----- 5 -------------------------------------------------------------------

fn recovery_run(seed: u64) -> Result<f64, String> {
    let mut cfg = ExperimentConfig { seed, ..Default::default() };
    cfg.workload.keys_per_shard = 1_000;
    cfg.workload.duration_us = 3_000 * MS;
    cfg.faults = vec![FaultSpec { at_ms: 2_000.0, node: node("s1.0"), action: FaultAction::Crash }];
    let (w, out) = run_world(cfg);
    if !passed(&out) {
        return Err(format!("checker: {:?}", out.verdicts));
    }
    if out.stats.incomplete > 0 {
        return Err(format!("{} incomplete", out.stats.incomplete));
    }
    let m = w.cfg.shards;
    for s in 0..m {
        let leader = w.nodes.leader(s);
        let pos: BTreeMap<TxnId, &Txn> = leader.log().iter().map(|t| (t.id, t)).collect();
        for r in out.history.iter().filter(|r| r.shards.contains(&s)) {
            let Some(t) = pos.get(&r.id) else {
                return Err(format!("{:?} missing from shard {s}", r.id));
            };
            if t.t != r.t {
                return Err(format!("{:?} has t {:?} on shard {s}, committed {:?}", r.id, t.t, r.t));
            }
            let ours = leader.result_of(r.id).cloned().unwrap_or(ExecResult { values: vec![], applied: false });
            if ours.values.iter().any(|v| !r.result.values.contains(v)) || ours.applied != r.result.applied {
                return Err(format!("{:?} result differs on shard {s}", r.id));
            }
        }
    }
    let Some(&normal) = w.nodes.normal_at.get(&(1, 1)) else {
        return Err("shard 1 never started view 1".into());
    };
    let first = out
        .history
        .iter()
        .filter(|r| r.shards.contains(&1) && r.commit_us >= normal)
        .map(|r| r.commit_us)
        .min()
        .ok_or("no commit on shard 1 after the view change")?;
    let gap = to_ms(first - normal);
    if gap > RESUME_WINDOW_MS {
        return Err(format!("first commit {gap}ms after start-view"));
    }
    Ok(gap)
}

fn recovery() -> Outcome {
    let results: Vec<Result<f64, String>> = (1..=RECOVERY_SEEDS).into_par_iter().map(recovery_run).collect();
    let ok: Vec<f64> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let mut detail = format!("{}/{} runs consistent", ok.len(), results.len());
    if !ok.is_empty() {
        detail += &format!(", worst resume {:.0}ms after start-view", ok.iter().cloned().fold(0.0, f64::max));
    }
    if let Some(Err(e)) = results.iter().find(|r| r.is_err()) {
        detail += &format!("; {e}");
    }
    Outcome::new(ok.len() == results.len(), detail)
}

// ----- 6 -------------------------------------------------------------------

fn reply(kind: ReplyKind, replica: u32, leader: bool) -> Reply {
    let id = TxnId::new(0, 1);
    Reply {
        kind,
        g_view: 0,
        l_view: 0,
        shard: 0,
        replica,
        id,
        t: Timestamp::new(100, id),
        hash: Hash160([1; 20]),
        result: leader.then(|| ExecResult { values: vec![(0, 0)], applied: true }),
        sync_point: 0,
        log_pos: None,
    }
}

/// Slow commit needs the leader's fast reply plus `f` follower slow replies.
fn slow_commit_rule(f: u32) -> bool {
    let txn = Txn::new(TxnId::new(0, 1), vec![inc(0)], vec![], 1);
    let view = ViewRecord { g_view: 0, g_vec: vec![0], mode: Mode::Detective };
    let decision = |slow: u32, with_leader: bool| {
        let mut rs = BTreeMap::new();
        if with_leader {
            rs.insert((0, 0), reply(ReplyKind::Fast, 0, true));
        }
        for r in 1..=slow {
            rs.insert((0, r), reply(ReplyKind::Slow, r, false));
        }
        decide(&txn, &view, f, &rs, &BTreeMap::new())
    };
    let committed = |d: Decision| matches!(d, Decision::Committed { path: CommitPath::Slow, .. });
    committed(decision(f, true)) && decision(f - 1, true) == Decision::Pending && decision(f, false) == Decision::Pending
}

fn quorum_arithmetic() -> Outcome {
    let sizes: Vec<u32> = (1..=3).map(super_quorum).collect();
    let slow_ok = (1..=3).all(slow_commit_rule);
    Outcome::new(
        sizes == [3, 4, 6] && slow_ok,
        format!("super quorum for f=1..3 is {sizes:?}; slow commit rule holds: {slow_ok}"),
    )
}

// ----- 7 -------------------------------------------------------------------

fn headroom_sweep() -> Outcome {
    let points: Vec<(f64, f64, f64)> = HEADROOM_SWEEP_MS
        .par_iter()
        .map(|&h| {
            let runs: Vec<(f64, f64)> = (1..=SWEEP_SEEDS)
                .map(|seed| {
                    let mut cfg = detective(ExperimentConfig {
                        seed,
                        headroom_delta_ms: h,
                        jitter_mean_ms: 2.0,
                        jitter_cap_ms: 20.0,
                        ..Default::default()
                    });
                    cfg.workload.skew = 0.99;
                    let (_, out) = run_world(cfg);
                    (out.stats.rollback_rate, out.stats.p50_ms)
                })
                .collect();
            let rates: Vec<f64> = runs.iter().map(|r| r.0).collect();
            let p50s: Vec<f64> = runs.iter().map(|r| r.1).collect();
            (h, mean(&rates), mean(&p50s))
        })
        .collect();
    let monotone = points.windows(2).all(|w| w[1].1 <= w[0].1);
    let p50 = |h: f64| points.iter().find(|p| p.0 == h).map(|p| p.2).unwrap_or(0.0);
    let slower = p50(50.0) > p50(0.0);
    let table: Vec<String> = points
        .iter()
        .map(|(h, r, p)| format!("{h:+}ms rollback {:.2}% p50 {p:.1}ms", r * 100.0))
        .collect();
    Outcome::new(monotone && slower, table.join(", "))
}

// ----- 8 -------------------------------------------------------------------

fn clock_error_sweep() -> Outcome {
    let p50_at = |err: f64| {
        let p: Vec<f64> = (1..=SWEEP_SEEDS)
            .into_par_iter()
            .map(|seed| {
                let (_, out) = run_world(ExperimentConfig { seed, clock_error_ms: err, ..Default::default() });
                p50_ms(&out.history)
            })
            .collect();
        mean(&p)
    };
    let base = p50_at(0.01);
    let small = p50_at(5.0);
    let large = p50_at(60.0);
    let close = (small - base).abs() <= CLOCK_ERROR_TOLERANCE * base;
    let degraded = large >= CLOCK_ERROR_SLOWDOWN * base;
    Outcome::new(
        close && degraded,
        format!(
            "p50 {base:.1}ms at 0.01ms error, {small:.1}ms ({:+.1}%) at 5ms, {large:.1}ms ({:.2}x) at 60ms",
            (small / base - 1.0) * 100.0,
            large / base
        ),
    )
}

// ----- 9 -------------------------------------------------------------------

fn hash_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0;
    for _ in 0..HASH_SEQUENCES {
        let mut h = LogHash::default();
        let mut live: Vec<Hash160> = Vec::new();
        for _ in 0..rng.random_range(1..40) {
            if !live.is_empty() && rng.random_bool(0.3) {
                let d = live.swap_remove(rng.random_range(0..live.len()));
                h.toggle(d);
            } else {
                let id = TxnId::new(rng.random_range(0..4), rng.random_range(0..16));
                let d = digest(id, Timestamp::new(rng.random_range(0..1_000), id));
                h.toggle(d);
                live.push(d);
            }
        }
        let folded = live.iter().fold(Hash160::default(), |a, &d| a ^ d);
        let mut shuffled = live.clone();
        shuffled.shuffle(&mut rng);
        let mut again = LogHash::default();
        shuffled.iter().for_each(|&d| again.toggle(d));
        let mut twice = h;
        let extra = digest(TxnId::new(9, rng.random()), Timestamp::new(rng.random_range(0..1_000), TxnId::new(9, 0)));
        twice.toggle(extra);
        twice.toggle(extra);
        if h.value() != folded || again.value() != h.value() || twice.value() != h.value() {
            failures += 1;
        }
    }
    Outcome::new(
        failures == 0,
        format!("{HASH_SEQUENCES} sequences, {failures} violations of multiset XOR, permutation or toggle identities"),
    )
}

// ----- 10 ------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut faulty = fuzz_cfg(77, 0.9, 0.01, Mode::Detective);
    faulty.clock_error_ms = 2.0;
    faulty.faults = vec![FaultSpec { at_ms: 1_500.0, node: node("s2.2"), action: FaultAction::Crash }];
    let configs = [fuzz_cfg(5, 0.5, 0.0, Mode::Preventive), faulty, inversion_cfg(3, true)];
    let mut mismatches = Vec::new();
    for (i, cfg) in configs.into_iter().enumerate() {
        let saved = serde_json::to_string(&cfg).expect("config serializes");
        let (_, a) = run_world(cfg);
        let (_, b) = run_world(serde_json::from_str(&saved).expect("config parses"));
        let same_stats = serde_json::to_string(&a.stats).ok() == serde_json::to_string(&b.stats).ok();
        let same_history = serde_json::to_string(&a.history).ok() == serde_json::to_string(&b.history).ok();
        if !same_stats || !same_history || a.history.is_empty() {
            mismatches.push(i);
        }
    }
    Outcome::new(
        mismatches.is_empty(),
        format!("3 saved configs replayed, mismatching: {mismatches:?}"),
    )
}
