//! Flag definitions, `--config` merging and resolution of per-command defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use attnshift::layers::NormMode;
use attnshift::probe::MIN_TRIALS;
use attnshift::train::{BlockOrder, TemporalMode};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_SWEEP: &str = "sa,sca,ffam:r=2,ffam:r=4,full";

#[derive(Debug, Parser)]
#[command(
    name = "attnshift",
    version,
    about = "Shift probes, bound verification, toy one-shot training and attention benchmarks",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the randomized verification suite; exit 1 if any check fails
    Verify(Flags),
    /// Monte Carlo shift reports for each norm variant, one file per variant
    Probe(Flags),
    /// One-shot diffusion tuning of the toy denoiser
    Train(Flags),
    /// FLOP model and wall-clock timings of the attention mechanisms
    Bench(Flags),
}

impl Command {
    pub fn flags(&self) -> &Flags {
        match self {
            Command::Verify(f) | Command::Probe(f) | Command::Train(f) | Command::Bench(f) => f,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Verify(_) => "verify",
            Command::Probe(_) => "probe",
            Command::Train(_) => "train",
            Command::Bench(_) => "bench",
        }
    }
}

pub const COMMANDS: [&str; 4] = ["verify", "probe", "train", "bench"];

#[derive(Debug, Args, Clone, Default)]
#[command(args_override_self = true)]
pub struct Flags {
    /// Base seed for every random stream [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path: a file for verify/train/bench, a directory for probe
    /// [default: stdout; probe: probe-reports]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Standard output format [default: json]
    #[arg(long, value_parser = ["json", "text"])]
    pub format: Option<String>,
    /// JSON file mirroring these flags (snake_case or kebab-case keys); flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Frames, or temporal rows for verify/probe [default: verify/probe/bench 8, train 4]
    #[arg(long)]
    pub n: Option<usize>,
    /// Tokens per frame, a perfect square [default: train 16, bench 64]
    #[arg(long)]
    pub l: Option<usize>,
    /// Feature width [default: verify/probe 4, train 8, bench 64]
    #[arg(long)]
    pub d: Option<usize>,
    /// Fine-coarse downsampling ratio [default: train 2; bench sweeps 2 and 4]
    #[arg(long)]
    pub r: Option<usize>,
    /// Monte Carlo trials, at least 10000 [default: 20000]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Training steps [default: 500]
    #[arg(long)]
    pub steps: Option<usize>,
    /// AdamW learning rate [default: 3e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Temporal block for train [default: stam]
    #[arg(long, value_parser = ["ta", "stam"])]
    pub mode: Option<String>,
    /// Norm under test in verify's centering check [default: instance_center]
    #[arg(long, value_parser = NormMode::ALL.map(NormMode::name))]
    pub norm_mode: Option<String>,
    /// Spectral constraint on value/output projections in verify [default: on]
    #[arg(long, value_parser = ["on", "off"])]
    pub spectral: Option<String>,
    /// Order of temporal and cross attention in train [default: temporal_before_cross]
    #[arg(long, value_parser = ["temporal_before_cross", "cross_before_temporal"])]
    pub block_order: Option<String>,
    /// Require the norm under test to leave a temporal mean of at least 0.05 [default: off]
    #[arg(long)]
    pub expect_centering_failure: bool,
    /// Timed repetitions per bench line, at least 20 [default: 20]
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated bench mechanisms: sa, sca, full, ffam or ffam:r=<r>
    /// [default: sa,sca,ffam:r=2,ffam:r=4,full; with --r only ffam:r=<r>]
    #[arg(long)]
    pub sweep: Option<String>,
    /// Add paired instance_center/instance_norm timing lines to bench [default: off]
    #[arg(long)]
    pub include_norm: bool,
    /// Write trained weights to this container file (train only)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

const VALUE_KEYS: [&str; 17] = [
    "seed", "out", "format", "n", "l", "d", "r", "trials", "steps", "lr", "mode", "norm_mode", "spectral",
    "block_order", "reps", "sweep", "checkpoint",
];
const SWITCH_KEYS: [&str; 2] = ["expect_centering_failure", "include_norm"];

/// Turns a `--config` JSON object into flag arguments.
pub fn config_args(text: &str) -> Result<Vec<String>, ConfigError> {
    let v: Value = serde_json::from_str(text).map_err(|e| ConfigError(format!("config file is not valid JSON: {e}")))?;
    let obj = v
        .as_object()
        .ok_or_else(|| ConfigError("config file must hold a JSON object".into()))?;
    let mut out = Vec::new();
    for (key, val) in obj {
        let k = key.replace('-', "_");
        let flag = format!("--{}", k.replace('_', "-"));
        if SWITCH_KEYS.contains(&k.as_str()) {
            match val {
                Value::Bool(true) => out.push(flag),
                Value::Bool(false) => {}
                _ => return Err(ConfigError(format!("config key {key} must be a boolean"))),
            }
        } else if VALUE_KEYS.contains(&k.as_str()) {
            let s = match val {
                Value::String(s) => s.clone(),
                Value::Number(n) => n.to_string(),
                Value::Bool(b) if k == "spectral" => (if *b { "on" } else { "off" }).to_string(),
                _ => return Err(ConfigError(format!("config key {key} has an unsupported value {val}"))),
            };
            out.push(flag);
            out.push(s);
        } else if k != "config" {
            return Err(ConfigError(format!("unknown config key {key}")));
        }
    }
    Ok(out)
}

/// Effective settings after defaults; serialized into reports and hashed.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub n: usize,
    pub l: usize,
    pub d: usize,
    pub r: Option<usize>,
    pub trials: usize,
    pub steps: usize,
    pub lr: f64,
    pub mode: String,
    pub norm_mode: String,
    pub spectral: bool,
    pub block_order: String,
    pub expect_centering_failure: bool,
    pub reps: usize,
    pub sweep: String,
    pub include_norm: bool,
}

pub struct Resolved {
    pub run: RunConfig,
    pub out: Option<PathBuf>,
    pub text: bool,
    pub checkpoint: Option<PathBuf>,
}

fn positive(name: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        return Err(ConfigError(format!("--{name} must be positive")));
    }
    Ok(v)
}

pub fn resolve(command: &str, f: &Flags) -> Result<Resolved, ConfigError> {
    let (n, l, d) = match command {
        "train" => (4, 16, 8),
        "bench" => (8, 64, 64),
        _ => (8, 16, 4),
    };
    let trials = f.trials.unwrap_or(20_000);
    if trials < MIN_TRIALS {
        return Err(ConfigError(format!("trials below minimum {MIN_TRIALS}")));
    }
    let lr = f.lr.unwrap_or(3e-5);
    if !(lr.is_finite() && lr > 0.0) {
        return Err(ConfigError(format!("--lr must be a positive number, got {lr}")));
    }
    let mode = f.mode.clone().unwrap_or_else(|| "stam".into());
    TemporalMode::parse(&mode).ok_or_else(|| ConfigError(format!("unknown mode {mode}")))?;
    let norm_mode = f.norm_mode.clone().unwrap_or_else(|| "instance_center".into());
    NormMode::parse(&norm_mode).ok_or_else(|| ConfigError(format!("unknown norm mode {norm_mode}")))?;
    let spectral = match f.spectral.as_deref().unwrap_or("on") {
        "on" => true,
        "off" => false,
        other => return Err(ConfigError(format!("--spectral must be on or off, got {other}"))),
    };
    let block_order = f.block_order.clone().unwrap_or_else(|| "temporal_before_cross".into());
    BlockOrder::parse(&block_order).ok_or_else(|| ConfigError(format!("unknown block order {block_order}")))?;
    let text = match f.format.as_deref().unwrap_or("json") {
        "json" => false,
        "text" => true,
        other => return Err(ConfigError(format!("--format must be json or text, got {other}"))),
    };
    let sweep = match (&f.sweep, f.r) {
        (Some(s), _) => s.clone(),
        (None, Some(r)) => format!("ffam:r={r}"),
        (None, None) => DEFAULT_SWEEP.to_string(),
    };
    let run = RunConfig {
        command: command.to_string(),
        seed: f.seed.unwrap_or(DEFAULT_SEED),
        n: positive("n", f.n.unwrap_or(n))?,
        l: positive("l", f.l.unwrap_or(l))?,
        d: positive("d", f.d.unwrap_or(d))?,
        r: match command {
            "train" => Some(positive("r", f.r.unwrap_or(2))?),
            _ => f.r.map(|r| positive("r", r)).transpose()?,
        },
        trials,
        steps: f.steps.unwrap_or(500),
        lr,
        mode,
        norm_mode,
        spectral,
        block_order,
        expect_centering_failure: f.expect_centering_failure,
        reps: f.reps.unwrap_or(20),
        sweep,
        include_norm: f.include_norm,
    };
    Ok(Resolved {
        run,
        out: f.out.clone(),
        text,
        checkpoint: f.checkpoint.clone(),
    })
}
