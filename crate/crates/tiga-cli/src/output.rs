use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use tiga::checker::{HistoryRecord, ShardFinal, Verdict, Witness};
use tiga::config::ExperimentConfig;
use tiga::stats::RunStats;
use tiga::world::Verdicts;

pub const CONFIG: &str = "config.json";
pub const HISTORY: &str = "history.jsonl";
pub const FINALS: &str = "finals.json";
pub const STATS: &str = "stats.json";
pub const COUNTEREXAMPLE: &str = "counterexample.json";

pub fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?);
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Single summary record: stats plus verdicts when the checker ran.
pub fn summary(stats: &RunStats, verdicts: Option<&Verdicts>) -> Value {
    json!({
        "stats": stats,
        "passed": verdicts.map(Verdicts::passed),
        "verdicts": verdicts,
    })
}

pub struct RunFiles<'a> {
    pub cfg: &'a ExperimentConfig,
    pub history: &'a [HistoryRecord],
    pub finals: &'a [ShardFinal],
    pub summary: &'a Value,
}

pub fn write_run(dir: &Path, run: &RunFiles) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join(CONFIG), run.cfg)?;
    write_history(&dir.join(HISTORY), run.history)?;
    write_json(&dir.join(FINALS), &run.finals)?;
    write_json(&dir.join(STATS), run.summary)
}

/// First failing witness, preferring the whole-history check.
fn first_witness(v: &Verdicts) -> Option<Witness> {
    let strict = match &v.strict {
        Ok(Verdict::Fail(w)) => Some(*w),
        _ => None,
    };
    let shard = v.per_shard.iter().flatten().find_map(|(_, v)| match v {
        Verdict::Fail(w) => Some(*w),
        Verdict::Pass => None,
    });
    strict.or(shard)
}

/// The failing pair with both full records, or the checker's input error.
pub fn counterexample(v: &Verdicts, history: &[HistoryRecord]) -> Value {
    let record = |id| history.iter().find(|r| r.id == id);
    match first_witness(v) {
        Some(w) => json!({
            "witness": w,
            "first": record(w.first),
            "second": record(w.second),
        }),
        None => json!({
            "strict": v.strict.as_ref().err(),
            "per_shard": v.per_shard.as_ref().err(),
        }),
    }
}
