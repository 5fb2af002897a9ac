use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use tiga::config::{ExperimentConfig, ModeChoice};
use tiga::types::MS;

#[derive(Parser, Debug)]
#[command(name = "tiga", version, about = "Deterministic simulator for geo-distributed transactions")]
pub struct Cli {
    /// Directory for run artifacts.
    #[arg(long, global = true, env = "TIGA_OUT_DIR", default_value = "tiga-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one experiment and write its history, finals and stats.
    Run(ConfigArgs),
    /// Run one experiment per value of a parameter and print a table.
    Sweep(SweepArgs),
    /// Re-run the checker on a saved history.
    Check(SavedArgs),
    /// Re-run a saved config and compare against its saved output.
    Replay(SavedArgs),
}

#[derive(Args, Debug)]
pub struct SavedArgs {
    /// Run directory; defaults to the output directory.
    pub dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub values: Vec<f64>,
    /// Runs per value; run i uses seed + i for every value.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    HeadroomDelta,
    ClockError,
    Skew,
    Rate,
    Drop,
}

impl SweepParam {
    pub fn apply(self, cfg: &mut ExperimentConfig, v: f64) {
        match self {
            SweepParam::HeadroomDelta => cfg.headroom_delta_ms = v,
            SweepParam::ClockError => cfg.clock_error_ms = v,
            SweepParam::Skew => cfg.workload.skew = v,
            SweepParam::Rate => cfg.workload.rate_per_coord = v,
            SweepParam::Drop => cfg.drop = v,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SweepParam::HeadroomDelta => "headroom_delta_ms",
            SweepParam::ClockError => "clock_error_ms",
            SweepParam::Skew => "skew",
            SweepParam::Rate => "rate_per_coord",
            SweepParam::Drop => "drop",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Auto,
    Preventive,
    Detective,
}

impl From<ModeArg> for ModeChoice {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Auto => ModeChoice::Auto,
            ModeArg::Preventive => ModeChoice::Preventive,
            ModeArg::Detective => ModeChoice::Detective,
        }
    }
}

/// Config file plus per-field overrides; flags win over the file.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// TOML or JSON experiment config, chosen by extension.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub f: Option<u32>,
    #[arg(long)]
    pub shards: Option<u32>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, allow_hyphen_values = true)]
    pub headroom_delta_ms: Option<f64>,
    #[arg(long)]
    pub delta_ms: Option<f64>,
    #[arg(long)]
    pub tick_ms: Option<f64>,
    #[arg(long)]
    pub clock_error_ms: Option<f64>,
    #[arg(long)]
    pub max_drift_ppm: Option<f64>,
    #[arg(long)]
    pub jitter_mean_ms: Option<f64>,
    #[arg(long)]
    pub jitter_cap_ms: Option<f64>,
    #[arg(long)]
    pub drop: Option<f64>,
    #[arg(long)]
    pub skew: Option<f64>,
    /// Mean arrivals per second at each coordinator.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub keys_per_shard: Option<u64>,
    #[arg(long)]
    pub ops_per_txn: Option<u32>,
    #[arg(long)]
    pub duration_ms: Option<u64>,
    #[arg(long)]
    pub read_fraction: Option<f64>,
    #[arg(long)]
    pub interactive_fraction: Option<f64>,
    /// Skip the strict-serializability checker.
    #[arg(long)]
    pub no_check: bool,
    /// Any other field as a dotted path, e.g. `workload.disjoint=true`.
    /// The value is parsed as JSON, falling back to a string.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
}

impl ConfigArgs {
    pub fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag {
                    cfg.$($field).+ = v.into();
                }
            };
        }
        set!(seed => seed);
        set!(f => f);
        set!(shards => shards);
        set!(mode => mode);
        set!(headroom_delta_ms => headroom_delta_ms);
        set!(delta_ms => delta_ms);
        set!(tick_ms => tick_ms);
        set!(clock_error_ms => clock_error_ms);
        set!(max_drift_ppm => max_drift_ppm);
        set!(jitter_mean_ms => jitter_mean_ms);
        set!(jitter_cap_ms => jitter_cap_ms);
        set!(drop => drop);
        set!(skew => workload.skew);
        set!(rate => workload.rate_per_coord);
        set!(keys_per_shard => workload.keys_per_shard);
        set!(ops_per_txn => workload.ops_per_txn);
        set!(read_fraction => workload.read_fraction);
        set!(interactive_fraction => workload.interactive_fraction);
        if let Some(d) = self.duration_ms {
            cfg.workload.duration_us = d as i64 * MS;
        }
        if self.no_check {
            cfg.check = false;
        }
        if !self.sets.is_empty() {
            cfg = apply_sets(cfg, &self.sets)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    };
    Ok(cfg)
}

fn apply_sets(cfg: ExperimentConfig, sets: &[String]) -> Result<ExperimentConfig> {
    let mut root = serde_json::to_value(cfg)?;
    for s in sets {
        let Some((path, raw)) = s.split_once('=') else {
            bail!("--set expects PATH=VALUE, got {s:?}");
        };
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut root;
        for part in path.split('.') {
            let Some(obj) = slot.as_object_mut() else {
                bail!("--set {path}: `{part}` is not inside an object");
            };
            slot = obj.get_mut(part).with_context(|| format!("--set {path}: unknown field `{part}`"))?;
        }
        *slot = value;
    }
    serde_json::from_value(root).context("--set produced an invalid config")
}
