//! Analytic FLOP model and wall-clock microbenchmarks for the frame attention
//! mechanisms and for instance centering against instance normalization.
//!
//! Timed regions are single-threaded. The layer functions allocate their
//! outputs, so "no allocation after warmup" is best-effort only: every
//! mechanism pays the same kind of allocation per call.

use std::hint::black_box;
use std::time::Instant;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::layers::attention::BlockWeights;
use crate::layers::frames::{ffam_all, fine_coarse_len, full_st_attention, sca, self_attention, FrameSet};
use crate::layers::norm::{instance_center_batched, instance_norm_batched, NormMode, NormParams, DEFAULT_EPSILON};
use crate::report::num;
use crate::rng::Sampler;
use crate::tensor::{Grid, Tensor};

/// Per-element cost of softmax (subtract-max, exp, sum, divide, amortized).
pub const SOFTMAX_OPS: u64 = 5;
pub const MIN_REPS: usize = 20;
pub const WARMUP: usize = 3;
/// Elementwise op counts per input element used for the norm benchmarks.
pub const IC_OPS: u64 = 2;
pub const INORM_OPS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    /// Per-frame self-attention stacked over frames.
    Sa,
    Sca,
    Ffam,
    /// Every frame attends to all `n·l` tokens.
    Full,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Sa => "sa",
            Mechanism::Sca => "sca",
            Mechanism::Ffam => "ffam",
            Mechanism::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sa" => Some(Mechanism::Sa),
            "sca" => Some(Mechanism::Sca),
            "ffam" => Some(Mechanism::Ffam),
            "full" => Some(Mechanism::Full),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopEstimate {
    pub mechanism: Mechanism,
    pub n: usize,
    pub l: usize,
    pub d: usize,
    pub r: Option<usize>,
    pub context_len: usize,
    pub flops: u64,
}

/// Checks dims and the `r`/mechanism pairing shared by the model and the timers.
fn check_dims(mechanism: Mechanism, n: usize, l: usize, d: usize, r: Option<usize>) -> Result<Grid> {
    if n == 0 || l == 0 || d == 0 {
        return Err(Error::Config(format!("dimensions must be positive, got n={n} l={l} d={d}")));
    }
    let grid = Grid::square(l).map_err(|e| Error::Config(e.to_string()))?;
    match (mechanism, r) {
        (Mechanism::Ffam, Some(r)) => grid.check_ratio(r).map_err(|e| Error::Config(e.to_string()))?,
        (Mechanism::Ffam, None) => return Err(Error::Config("ffam needs a downsampling ratio r".into())),
        (m, Some(r)) => return Err(Error::Config(format!("ratio r={r} only applies to ffam, not {}", m.name()))),
        (_, None) => {}
    }
    Ok(grid)
}

pub fn context_len(mechanism: Mechanism, n: usize, l: usize, r: Option<usize>) -> usize {
    match mechanism {
        Mechanism::Sa => l,
        Mechanism::Sca => 2 * l,
        Mechanism::Ffam => fine_coarse_len(n, l, r.unwrap_or(1)),
        Mechanism::Full => n * l,
    }
}

/// Score matmul, softmax and value matmul, summed over the `n` frames.
pub fn flop_estimate(mechanism: Mechanism, n: usize, l: usize, d: usize, r: Option<usize>) -> Result<FlopEstimate> {
    check_dims(mechanism, n, l, d, r)?;
    let ctx = context_len(mechanism, n, l, r);
    let (lu, cu, du) = (l as u64, ctx as u64, d as u64);
    let per_frame = 2 * lu * cu * du + SOFTMAX_OPS * lu * cu + 2 * lu * cu * du;
    Ok(FlopEstimate {
        mechanism,
        n,
        l,
        d,
        r,
        context_len: ctx,
        flops: per_frame * n as u64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mechanism: String,
    pub n: usize,
    pub l: usize,
    pub d: usize,
    pub r: Option<usize>,
    pub reps: usize,
    pub median_ns: f64,
    pub p10_ns: f64,
    pub p90_ns: f64,
    pub flops: u64,
    /// Sum of all outputs of the last run.
    pub checksum: f64,
}

impl BenchReport {
    pub fn to_json(&self) -> Value {
        json!({
            "mechanism": self.mechanism,
            "n": self.n,
            "l": self.l,
            "d": self.d,
            "r": self.r,
            "reps": self.reps,
            "median_ns": num(self.median_ns),
            "p10_ns": num(self.p10_ns),
            "p90_ns": num(self.p90_ns),
            "flops": self.flops,
            "checksum": num(self.checksum),
        })
    }

    /// One JSON object on a single line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_json()).expect("json values serialize")
    }
}

/// Linear-interpolated quantile of sorted samples.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Runs `f` `WARMUP` times untimed, then `reps` timed times.
fn time_runs(reps: usize, mut f: impl FnMut() -> Result<f64>) -> Result<(Vec<f64>, f64)> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!("reps {reps} below minimum {MIN_REPS}")));
    }
    let mut checksum = 0.0;
    for _ in 0..WARMUP {
        checksum = black_box(f()?);
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        checksum = black_box(f()?);
        samples.push(start.elapsed().as_nanos() as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok((samples, checksum))
}

fn summarize(mechanism: &str, dims: [usize; 3], r: Option<usize>, flops: u64, samples: &[f64], checksum: f64) -> BenchReport {
    BenchReport {
        mechanism: mechanism.to_string(),
        n: dims[0],
        l: dims[1],
        d: dims[2],
        r,
        reps: samples.len(),
        median_ns: quantile(samples, 0.5),
        p10_ns: quantile(samples, 0.1),
        p90_ns: quantile(samples, 0.9),
        flops,
        checksum,
    }
}

fn frame_sum(out: &FrameSet) -> f64 {
    out.frames().iter().map(|f| f.data().iter().sum::<f64>()).sum()
}

/// Random frames and `d×d` projections drawn from `rng`.
pub fn bench_inputs(n: usize, l: usize, d: usize, rng: &mut Sampler) -> Result<(FrameSet, BlockWeights)> {
    let grid = Grid::square(l)?;
    let frames = (0..n)
        .map(|_| Tensor::matrix(l, d, rng.normals(l * d)))
        .collect::<Result<Vec<_>>>()?;
    let w = BlockWeights::init(d, d, d, NormParams::new(NormMode::None), false, rng);
    Ok((FrameSet::new(frames, grid)?, w))
}

/// One forward pass of `mechanism` over every frame; returns the output sum.
pub fn run_mechanism(mechanism: Mechanism, frames: &FrameSet, w: &BlockWeights, r: Option<usize>) -> Result<f64> {
    let out = match mechanism {
        Mechanism::Sa => self_attention(frames, w)?,
        Mechanism::Sca => sca(frames, w)?,
        Mechanism::Ffam => ffam_all(frames, w, r.unwrap_or(1))?,
        Mechanism::Full => full_st_attention(frames, w)?,
    };
    Ok(frame_sum(&out))
}

/// Median/percentile wall time of one forward pass over `n` frames of
/// `l` tokens with fixed random inputs and weights.
pub fn wall_clock_bench(mechanism: Mechanism, n: usize, l: usize, d: usize, r: Option<usize>, reps: usize, rng: &mut Sampler) -> Result<BenchReport> {
    let est = flop_estimate(mechanism, n, l, d, r)?;
    let (frames, w) = bench_inputs(n, l, d, rng)?;
    let (samples, checksum) = time_runs(reps, || run_mechanism(mechanism, &frames, &w, r))?;
    Ok(summarize(mechanism.name(), [n, l, d], r, est.flops, &samples, checksum))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormBench {
    pub instance_center: BenchReport,
    pub instance_norm: BenchReport,
    /// `median(instance_norm) / median(instance_center)`.
    pub speedup: f64,
}

/// Reference figure only; never asserted.
pub const REPORTED_IC_SPEEDUP: f64 = 1.2;

impl NormBench {
    pub fn to_json(&self) -> Value {
        json!({
            "instance_center": self.instance_center.to_json(),
            "instance_norm": self.instance_norm.to_json(),
            "speedup": num(self.speedup),
            "reference_speedup": num(REPORTED_IC_SPEEDUP),
        })
    }
}

/// Paired timings of instance centering and instance normalization on the
/// same `[l, n, d]` batch (`l` spatial units of `n` frames). Runs alternate
/// between the two so drift in machine load hits both.
pub fn ic_vs_inorm_bench(n: usize, l: usize, d: usize, reps: usize, rng: &mut Sampler) -> Result<NormBench> {
    if n == 0 || l == 0 || d == 0 {
        return Err(Error::Config(format!("dimensions must be positive, got n={n} l={l} d={d}")));
    }
    if reps < MIN_REPS {
        return Err(Error::Config(format!("reps {reps} below minimum {MIN_REPS}")));
    }
    let z = Tensor::new(vec![l, n, d], rng.normals(l * n * d))?;
    let sum = |t: Tensor| t.data().iter().sum::<f64>();
    let ic = || instance_center_batched(&z).map(sum);
    let inorm = || instance_norm_batched(&z, DEFAULT_EPSILON).map(sum);
    let (mut ic_samples, mut in_samples) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    let (mut ic_sum, mut in_sum) = (0.0, 0.0);
    for _ in 0..WARMUP {
        black_box(ic()?);
        black_box(inorm()?);
    }
    for _ in 0..reps {
        let start = Instant::now();
        ic_sum = black_box(ic()?);
        ic_samples.push(start.elapsed().as_nanos() as f64);
        let start = Instant::now();
        in_sum = black_box(inorm()?);
        in_samples.push(start.elapsed().as_nanos() as f64);
    }
    ic_samples.sort_by(f64::total_cmp);
    in_samples.sort_by(f64::total_cmp);
    let elems = (l * n * d) as u64;
    let a = summarize("instance_center", [n, l, d], None, IC_OPS * elems, &ic_samples, ic_sum);
    let b = summarize("instance_norm", [n, l, d], None, INORM_OPS * elems, &in_samples, in_sum);
    Ok(NormBench {
        speedup: b.median_ns / a.median_ns,
        instance_center: a,
        instance_norm: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::frames::fine_coarse_context;
    use crate::rng::RngStream;

    #[test]
    fn flop_examples() {
        let sa = flop_estimate(Mechanism::Sa, 8, 64, 64, None).unwrap();
        let full = flop_estimate(Mechanism::Full, 8, 64, 64, None).unwrap();
        let sca_est = flop_estimate(Mechanism::Sca, 8, 64, 64, None).unwrap();
        let ffam = flop_estimate(Mechanism::Ffam, 8, 64, 64, Some(2)).unwrap();
        assert_eq!(ffam.context_len, 176);
        assert_eq!(ffam.flops * 32, full.flops * 11);
        assert_eq!(sca_est.flops * 4, full.flops);
        assert_eq!(sa.flops * 8, full.flops);
        let one = flop_estimate(Mechanism::Ffam, 1, 64, 64, Some(4)).unwrap();
        assert_eq!(one.flops, flop_estimate(Mechanism::Sa, 1, 64, 64, None).unwrap().flops);
        // per frame: 4·l·ctx·d + 5·l·ctx
        assert_eq!(sa.flops, 8 * (4 * 64 * 64 * 64 + 5 * 64 * 64));
    }

    #[test]
    fn flop_errors() {
        assert!(matches!(flop_estimate(Mechanism::Sa, 8, 64, 64, Some(2)), Err(Error::Config(_))));
        assert!(matches!(flop_estimate(Mechanism::Ffam, 8, 64, 64, None), Err(Error::Config(_))));
        assert!(matches!(flop_estimate(Mechanism::Ffam, 8, 64, 64, Some(3)), Err(Error::Config(_))));
        assert!(matches!(flop_estimate(Mechanism::Full, 0, 64, 64, None), Err(Error::Config(_))));
    }

    #[test]
    fn context_len_matches_constructed_context() {
        let mut rng = RngStream::new(4, 0).rng();
        for _ in 0..50 {
            let side = [2usize, 4, 6, 8][rng.index(0, 3)];
            let r = *[1usize, 2].iter().filter(|&&r| side % r == 0).last().unwrap();
            let r = if side % 4 == 0 && rng.sign() > 0.0 { 4.min(side) } else { r };
            let n = rng.index(1, 5);
            let l = side * side;
            let (frames, _) = bench_inputs(n, l, 2, &mut rng).unwrap();
            let est = flop_estimate(Mechanism::Ffam, n, l, 2, Some(r)).unwrap();
            let ctx = fine_coarse_context(&frames, rng.index(0, n - 1), r).unwrap();
            assert_eq!(est.context_len, ctx.rows());
        }
    }

    #[test]
    fn quantiles() {
        let s: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(quantile(&s, 0.5), 5.0);
        assert_eq!(quantile(&s, 0.1), 1.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn report_invariants_and_determinism() {
        let run = || wall_clock_bench(Mechanism::Ffam, 3, 16, 8, Some(2), 20, &mut RngStream::new(1, 2).rng()).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.checksum.to_bits(), b.checksum.to_bits());
        assert!(a.p10_ns <= a.median_ns && a.median_ns <= a.p90_ns);
        assert_eq!(a.reps, 20);
        let keys: Vec<String> = a.to_json().as_object().unwrap().keys().cloned().collect();
        for k in ["mechanism", "n", "l", "d", "r", "reps", "median_ns", "p10_ns", "p90_ns", "flops", "checksum"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
        assert!(!a.to_json_line().contains('\n'));
        assert!(wall_clock_bench(Mechanism::Sa, 3, 16, 8, None, 19, &mut RngStream::new(1, 2).rng()).is_err());
    }

    #[test]
    fn norm_bench_pairs() {
        let r = ic_vs_inorm_bench(4, 16, 8, 20, &mut RngStream::new(3, 0).rng()).unwrap();
        assert_eq!(r.instance_center.mechanism, "instance_center");
        assert!(r.speedup > 0.0);
        assert!(r.instance_center.checksum.abs() < 1e-9);
    }
}
