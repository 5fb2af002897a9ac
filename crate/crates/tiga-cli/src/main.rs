mod args;
mod output;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use serde_json::json;

use args::{Cli, Command, ConfigArgs, SweepArgs};
use output::{RunFiles, COUNTEREXAMPLE, CONFIG, FINALS, HISTORY, STATS};
use tiga::checker::ShardFinal;
use tiga::config::ExperimentConfig;
use tiga::world::{RunOutput, Verdicts, World};

const EXIT_ERROR: u8 = 1;
const EXIT_CHECK_FAILED: u8 = 2;
const EXIT_REPLAY_MISMATCH: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a, &cli.out),
        Command::Sweep(a) => sweep(a, &cli.out),
        Command::Check(a) => check(a.dir.as_deref().unwrap_or(&cli.out)),
        Command::Replay(a) => replay(a.dir.as_deref().unwrap_or(&cli.out)),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn simulate(cfg: ExperimentConfig) -> Result<RunOutput> {
    Ok(World::new(cfg)?.run())
}

/// Dumps the counterexample and returns the failure exit code.
fn report_failure(dir: &Path, verdicts: &Verdicts, out: &RunOutput) -> Result<u8> {
    let cex = output::counterexample(verdicts, &out.history);
    output::write_json(&dir.join(COUNTEREXAMPLE), &cex)?;
    eprintln!("checker failed; counterexample:\n{}", serde_json::to_string_pretty(&cex)?);
    Ok(EXIT_CHECK_FAILED)
}

fn run(args: &ConfigArgs, dir: &Path) -> Result<u8> {
    let cfg = args.build()?;
    let out = simulate(cfg.clone())?;
    let summary = output::summary(&out.stats, out.verdicts.as_ref());
    output::write_run(
        dir,
        &RunFiles { cfg: &cfg, history: &out.history, finals: &out.finals, summary: &summary },
    )?;
    println!("{}", serde_json::to_string(&summary)?);
    match &out.verdicts {
        Some(v) if !v.passed() => report_failure(dir, v, &out),
        _ => Ok(0),
    }
}

fn sweep(args: &SweepArgs, dir: &Path) -> Result<u8> {
    let base = args.config.build()?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut rows = std::io::BufWriter::new(std::fs::File::create(dir.join("sweep.jsonl"))?);
    let label = args.param.label();
    println!(
        "{label:>18} {:>6} {:>9} {:>9} {:>9} {:>7} {:>9} {:>8} {:>7}",
        "seed", "committed", "p50_ms", "p90_ms", "fast", "rollback", "retries", "check"
    );
    let mut failed = false;
    for &value in &args.values {
        for i in 0..args.seeds {
            let mut cfg = base.clone();
            cfg.seed = base.seed + i;
            args.param.apply(&mut cfg, value);
            cfg.validate()?;
            let out = simulate(cfg.clone())?;
            let s = &out.stats;
            let check = match &out.verdicts {
                None => "off",
                Some(v) if v.passed() => "pass",
                Some(_) => "FAIL",
            };
            println!(
                "{value:>18} {:>6} {:>9} {:>9.1} {:>9.1} {:>6.1}% {:>8.2}% {:>8} {:>7}",
                cfg.seed,
                s.committed,
                s.p50_ms,
                s.p90_ms,
                100.0 * s.fast_fraction,
                100.0 * s.rollback_rate,
                s.retries,
                check
            );
            let row = json!({ "param": label, "value": value, "seed": cfg.seed, "summary": output::summary(s, out.verdicts.as_ref()) });
            serde_json::to_writer(&mut rows, &row)?;
            rows.write_all(b"\n")?;
            if let Some(v) = out.verdicts.as_ref().filter(|v| !v.passed()) {
                failed = true;
                let run_dir = dir.join(format!("fail-{value}-{}", cfg.seed));
                let summary = output::summary(s, Some(v));
                output::write_run(
                    &run_dir,
                    &RunFiles { cfg: &cfg, history: &out.history, finals: &out.finals, summary: &summary },
                )?;
                report_failure(&run_dir, v, &out)?;
            }
        }
    }
    rows.flush()?;
    Ok(if failed { EXIT_CHECK_FAILED } else { 0 })
}

fn shard_count(dir: &Path, finals: &[ShardFinal]) -> u32 {
    output::read_json::<ExperimentConfig>(&dir.join(CONFIG))
        .map(|c| c.shards)
        .unwrap_or_else(|_| finals.iter().map(|f| f.shard + 1).max().unwrap_or(1))
}

fn check(dir: &Path) -> Result<u8> {
    let history = output::read_history(&dir.join(HISTORY))?;
    let finals: Vec<ShardFinal> = output::read_json(&dir.join(FINALS))?;
    let verdicts = Verdicts::compute(&history, &finals, shard_count(dir, &finals));
    println!("{}", serde_json::to_string(&json!({ "passed": verdicts.passed(), "verdicts": verdicts }))?);
    if verdicts.passed() {
        return Ok(0);
    }
    let cex = output::counterexample(&verdicts, &history);
    eprintln!("checker failed; counterexample:\n{}", serde_json::to_string_pretty(&cex)?);
    Ok(EXIT_CHECK_FAILED)
}

fn replay(dir: &Path) -> Result<u8> {
    let cfg: ExperimentConfig = output::read_json(&dir.join(CONFIG))?;
    let saved: serde_json::Value = output::read_json(&dir.join(STATS))?;
    let saved_history = output::read_history(&dir.join(HISTORY))?;
    let out = simulate(cfg)?;
    // Round-trip through text so float formatting matches the saved file.
    let summary: serde_json::Value = serde_json::from_str(&output::summary(&out.stats, out.verdicts.as_ref()).to_string())?;
    let mut mismatches: Vec<PathBuf> = Vec::new();
    if summary != saved {
        mismatches.push(STATS.into());
    }
    if out.history != saved_history {
        mismatches.push(HISTORY.into());
    }
    if mismatches.is_empty() {
        println!("replay matches: {} commits, trace {}", out.stats.committed, out.stats.trace_digest);
        return Ok(0);
    }
    for m in &mismatches {
        eprintln!("replay differs from saved {}", m.display());
    }
    Ok(EXIT_REPLAY_MISMATCH)
}
