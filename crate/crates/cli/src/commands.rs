//! The four subcommands. Each returns the exit code it wants.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use attnshift::bench::{flop_estimate, ic_vs_inorm_bench, wall_clock_bench, BenchReport, Mechanism};
use attnshift::layers::{BlockWeights, NormMode, NormParams};
use attnshift::probe::{biased_input_spec, monte_carlo_module_dist, shift_metrics, ProbeModule};
use attnshift::report::{config_hash, num, to_pretty};
use attnshift::train::{train_oneshot, BlockOrder, ModelConfig, TemporalMode, TrainConfig};
use attnshift::verify::{random_mix, run_suite, SuiteConfig};
use attnshift::{Error, RngStream};

use crate::args::{ConfigError, Resolved, RunConfig};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Failure of a command, carrying the exit code.
pub enum Failure {
    Config(String),
    Check(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            Error::Shape(m) => Failure::Config(m),
            e @ Error::Dimension { .. } => Failure::Config(e.to_string()),
            e => Failure::Check(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Check(format!("i/o error: {e}"))
    }
}

type Outcome = Result<i32, Failure>;

fn run_json(run: &RunConfig) -> Value {
    serde_json::to_value(run).expect("run config serializes")
}

fn hash(run: &RunConfig) -> String {
    config_hash(&run_json(run))
}

/// JSON to `--out` when given, and JSON or `text` to stdout.
fn emit(res: &Resolved, report: &str, text: impl FnOnce() -> String) -> Result<(), Failure> {
    if let Some(path) = &res.out {
        write_file(path, report)?;
    }
    if res.text {
        print!("{}", text());
    } else if res.out.is_none() {
        print!("{report}");
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn norm_mode(run: &RunConfig) -> NormMode {
    NormMode::parse(&run.norm_mode).expect("validated during resolution")
}

pub fn verify(res: &Resolved) -> Outcome {
    let run = &res.run;
    let cfg = SuiteConfig {
        d: run.d,
        rows: run.n,
        trials: run.trials,
        spectral: run.spectral,
        norm_mode: norm_mode(run),
        expect_centering_failure: run.expect_centering_failure,
        ..SuiteConfig::default()
    };
    let families = run_suite(&cfg, run.seed)?;
    let passed = families.iter().all(|f| f.passed());
    let report = json!({
        "command": "verify",
        "passed": passed,
        "families": families.iter().map(|f| f.to_json()).collect::<Vec<_>>(),
        "config": run_json(run),
        "config_hash": hash(run),
    });
    emit(res, &to_pretty(&report), || {
        let mut s = String::new();
        for f in &families {
            for c in &f.checks {
                let tag = if c.satisfied { "PASS" } else { "FAIL" };
                let _ = writeln!(s, "{tag} {}/{} lhs={:.6e} rhs={:.6e}", f.name, c.name, c.lhs, c.rhs);
            }
        }
        let _ = writeln!(s, "{} families, overall {}", families.len(), if passed { "PASS" } else { "FAIL" });
        s
    })?;
    Ok(if passed { EXIT_PASS } else { EXIT_FAIL })
}

/// Norm variants compared by `probe`, in output order.
pub const PROBE_VARIANTS: [NormMode; 5] = [
    NormMode::LayerNorm,
    NormMode::LayerNormNoAffine,
    NormMode::None,
    NormMode::InstanceNorm,
    NormMode::InstanceCenter,
];

/// Identity projections isolate the effect of the norm; the input has
/// per-column means of ±0.5 and the mixing row is fixed per seed.
pub fn probe(res: &Resolved) -> Outcome {
    let run = &res.run;
    let dir = res.out.clone().unwrap_or_else(|| "probe-reports".into());
    let spec = biased_input_spec(run.d);
    let mix = random_mix(&mut RngStream::named(run.seed, "probe.mix").rng(), run.n)?;
    let mut summary = String::new();
    let mut index = Vec::new();
    for mode in PROBE_VARIANTS {
        let norm = match mode {
            NormMode::LayerNorm => NormParams::layer_norm(vec![1.0; run.d], vec![0.0; run.d]),
            m => NormParams::new(m),
        };
        let w = BlockWeights::identity(run.d, norm, run.spectral);
        let stream = RngStream::named(run.seed, &format!("probe.{}", mode.name()));
        let report = monte_carlo_module_dist(ProbeModule::Ta, &w, &spec, run.n, Some(&mix), run.trials, stream)?;
        let deviation = shift_metrics(&spec, &report.empirical)?.mean_shift;
        let mut v = report.to_json();
        let obj = v.as_object_mut().expect("report is an object");
        obj.insert("variant".into(), json!(mode.name()));
        obj.insert("mean_deviation".into(), num(deviation));
        obj.insert("mean_within_3se".into(), json!(report.mean_within(3.0)));
        obj.insert("run_config_hash".into(), json!(hash(run)));
        let path = dir.join(format!("{}.shift.json", mode.name()));
        write_file(&path, &to_pretty(&v))?;
        let _ = writeln!(
            summary,
            "{:<22} label={:<22} mean_abs_err={:.3e} within_3se={} mean_deviation={:.4}",
            mode.name(),
            report.label(),
            report.mean_abs_err,
            report.mean_within(3.0),
            deviation
        );
        index.push(json!({"variant": mode.name(), "path": path.display().to_string()}));
    }
    if res.text {
        print!("{summary}");
    } else {
        print!(
            "{}",
            to_pretty(&json!({"command": "probe", "reports": index, "config_hash": hash(run)}))
        );
    }
    Ok(EXIT_PASS)
}

pub fn train(res: &Resolved) -> Outcome {
    let run = &res.run;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        model: ModelConfig {
            n: run.n,
            l: run.l,
            d: run.d,
            r: run.r.unwrap_or(2),
            mode: TemporalMode::parse(&run.mode).expect("validated"),
            block_order: BlockOrder::parse(&run.block_order).expect("validated"),
            ..defaults.model.clone()
        },
        steps: run.steps,
        adamw: attnshift::train::AdamWConfig { lr: run.lr, ..defaults.adamw },
        ..defaults
    };
    cfg.model.validate()?;
    let (report, model) = match train_oneshot(&cfg, run.seed) {
        Ok(r) => r,
        Err(e @ Error::NonFiniteLoss { .. }) => return Err(Failure::Check(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    if let Some(path) = &res.checkpoint {
        model.to_bundle()?.save(path)?;
    }
    let mut v = report.to_json();
    let obj = v.as_object_mut().expect("report is an object");
    obj.insert("command".into(), json!("train"));
    obj.insert("block_order".into(), json!(run.block_order));
    obj.insert("mode".into(), json!(run.mode));
    obj.insert("run_config_hash".into(), json!(hash(run)));
    emit(res, &to_pretty(&v), || {
        let mut s = String::new();
        let steps = report.loss_curve.len();
        let _ = writeln!(s, "mode={} block_order={} steps={steps} grad_check={:.3e}", run.mode, run.block_order, report.grad_check);
        if steps > 0 {
            let w = steps.min(100);
            let first = report.median_loss(0, w).unwrap_or(f64::NAN);
            let last = report.median_loss(steps - w, steps).unwrap_or(f64::NAN);
            let _ = writeln!(s, "median loss first {w}: {first:.6}  last {w}: {last:.6}");
        }
        for p in report.shift_trajectory.iter().rev().take(cfg.model.depth) {
            let _ = writeln!(
                s,
                "step {} block {}: mean_shift={:.6e} cov_shift_frob={:.6e} cov_shift_spec={:.6e}",
                p.step, p.block_index, p.metrics.mean_shift, p.metrics.cov_shift_frob, p.metrics.cov_shift_spec
            );
        }
        s
    })?;
    Ok(EXIT_PASS)
}

/// Parses `sa`, `sca`, `full`, `ffam` or `ffam:r=<r>`.
pub fn parse_sweep(sweep: &str, default_r: usize) -> Result<Vec<(Mechanism, Option<usize>)>, Failure> {
    sweep
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let (name, r) = match entry.split_once(':') {
                Some((name, rest)) => {
                    let r = rest
                        .strip_prefix("r=")
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| Failure::Config(format!("bad sweep entry {entry}, expected ffam:r=<r>")))?;
                    (name, Some(r))
                }
                None => (entry, None),
            };
            let mech = Mechanism::parse(name).ok_or_else(|| Failure::Config(format!("unknown mechanism {name}")))?;
            match (mech, r) {
                (Mechanism::Ffam, r) => Ok((mech, Some(r.unwrap_or(default_r)))),
                (_, None) => Ok((mech, None)),
                (_, Some(_)) => Err(Failure::Config(format!("ratio only applies to ffam, got {entry}"))),
            }
        })
        .collect::<Result<Vec<_>, _>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Failure::Config("sweep is empty".into()))
            } else {
                Ok(v)
            }
        })
}

pub fn bench(res: &Resolved) -> Outcome {
    let run = &res.run;
    if run.reps < attnshift::bench::MIN_REPS {
        return Err(Failure::Config(format!("reps {} below minimum {}", run.reps, attnshift::bench::MIN_REPS)));
    }
    let sweep = parse_sweep(&run.sweep, run.r.unwrap_or(2))?;
    // every line is validated before any timing starts
    for &(mech, r) in &sweep {
        flop_estimate(mech, run.n, run.l, run.d, r).map_err(|e| match e {
            Error::Config(m) => Failure::Config(m),
            e => Failure::Config(e.to_string()),
        })?;
    }
    let h = hash(run);
    let mut reports: Vec<BenchReport> = Vec::new();
    for (k, &(mech, r)) in sweep.iter().enumerate() {
        let mut rng = RngStream::named(run.seed, "bench").child(k as u64).rng();
        reports.push(wall_clock_bench(mech, run.n, run.l, run.d, r, run.reps, &mut rng)?);
    }
    let mut speedup = None;
    if run.include_norm {
        let pair = ic_vs_inorm_bench(run.n, run.l, run.d, run.reps, &mut RngStream::named(run.seed, "bench.norm").rng())?;
        speedup = Some(pair.speedup);
        reports.push(pair.instance_center);
        reports.push(pair.instance_norm);
    }
    let mut lines = String::new();
    for r in &reports {
        let mut v = r.to_json();
        v.as_object_mut().expect("object").insert("config_hash".into(), json!(h));
        lines.push_str(&serde_json::to_string(&v).expect("serializes"));
        lines.push('\n');
    }
    emit(res, &lines, || {
        let mut s = format!("{:<16} {:>3} {:>5} {:>4} {:>3} {:>14} {:>14} {:>14} {:>14}\n", "mechanism", "n", "l", "d", "r", "median_ns", "p10_ns", "p90_ns", "flops");
        for b in &reports {
            let r = b.r.map_or("-".to_string(), |r| r.to_string());
            let _ = writeln!(
                s,
                "{:<16} {:>3} {:>5} {:>4} {:>3} {:>14.0} {:>14.0} {:>14.0} {:>14}",
                b.mechanism, b.n, b.l, b.d, r, b.median_ns, b.p10_ns, b.p90_ns, b.flops
            );
        }
        if let Some(x) = speedup {
            let _ = writeln!(s, "instance_norm / instance_center median: {x:.3}");
        }
        s
    })?;
    Ok(EXIT_PASS)
}
