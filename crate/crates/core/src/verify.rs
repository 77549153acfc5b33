//! Randomized audit suite: moment propagation agreement, centering
//! exactness, shift bounds and frame-attention structure. Each family returns
//! named checks with `lhs`, `rhs` and `satisfied`.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gaussian::GaussianSpec;
use crate::layers::attention::{attention, BlockWeights};
use crate::layers::frames::{ffam, fine_coarse_context, fine_coarse_len, FrameSet};
use crate::layers::norm::{apply_norm, instance_center, NormMode, NormParams};
use crate::probe::{
    centering_failure_case, check_softmax_lipschitz, check_stam_output_bound, check_wq_tuning_bound, max_temporal_mean,
    monte_carlo_module_dist, stam_closed_form_cov, variance_bound_terms, BoundCheck, MixingRow, ProbeModule, MIN_TRIALS,
};
use crate::rng::{RngStream, Sampler};
use crate::spectral::operator_2_norm;
use crate::tensor::{matmul, Tensor};

/// Relative covariance tolerance at `REFERENCE_TRIALS`; scaled by
/// `√(REFERENCE_TRIALS/trials)` for smaller runs.
pub const COV_RTOL: f64 = 0.02;
pub const REFERENCE_TRIALS: usize = 200_000;
pub const MEAN_SE: f64 = 3.0;
pub const IC_TOL: f64 = 1e-12;
/// Temporal mean a non-centering norm must retain in the counterexample.
pub const CENTERING_DEVIATION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckFamily {
    pub name: String,
    pub checks: Vec<BoundCheck>,
}

impl CheckFamily {
    pub fn new(name: &str, checks: Vec<BoundCheck>) -> Self {
        Self {
            name: name.to_string(),
            checks,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.satisfied)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "passed": self.passed(),
            "checks": self.checks.iter().map(BoundCheck::to_json).collect::<Vec<_>>(),
        })
    }
}

/// `n×m` matrix with i.i.d. `N(0, scale²)` entries.
pub fn random_matrix(rng: &mut Sampler, n: usize, m: usize, scale: f64) -> Tensor {
    Tensor::from_parts_unchecked(vec![n, m], rng.normals(n * m).into_iter().map(|v| v * scale).collect())
}

/// `AAᵀ/d + 0.01·I`: well-conditioned random covariance.
pub fn random_covariance(rng: &mut Sampler, d: usize) -> Tensor {
    let a = random_matrix(rng, d, d, 1.0);
    let aat = matmul(&a, &a.transpose()).expect("square").scale(1.0 / d as f64);
    aat.add(&Tensor::identity(d).scale(0.01)).expect("same shape").symmetrized()
}

pub fn random_spec(rng: &mut Sampler, d: usize) -> GaussianSpec {
    let mean = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
    GaussianSpec::new(mean, random_covariance(rng, d)).expect("random covariance is PSD")
}

/// Self-attention block with `N(0, 1/d)` projections.
pub fn random_block(rng: &mut Sampler, d: usize, norm: NormParams, spectral: bool) -> BlockWeights {
    let s = 1.0 / (d as f64).sqrt();
    let m = |rng: &mut Sampler| random_matrix(rng, d, d, s);
    let (q, k, v, l) = (m(rng), m(rng), m(rng), m(rng));
    BlockWeights::new(q, k, v, l, norm, spectral).expect("square projections")
}

/// Softmax of standard normal logits.
pub fn random_mix(rng: &mut Sampler, n: usize) -> Result<MixingRow> {
    let mut w = rng.normals(n);
    crate::tensor::softmax_slice(&mut w, 1.0);
    let total: f64 = w.iter().sum();
    MixingRow::new(w.into_iter().map(|v| v / total).collect())
}

pub fn cov_tolerance(trials: usize) -> f64 {
    COV_RTOL * (REFERENCE_TRIALS as f64 / trials as f64).sqrt().max(1.0)
}

/// Fixed-mix Monte Carlo against the exact propagation, for contexts with no
/// norm and with instance centering.
pub fn fixed_mix_agreement(d: usize, rows: usize, trials: usize, spectral: bool, stream: RngStream) -> Result<CheckFamily> {
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!("trials below minimum {MIN_TRIALS}")));
    }
    let mut rng = stream.rng();
    let mut checks = Vec::new();
    for (k, mode) in [NormMode::None, NormMode::InstanceCenter].into_iter().enumerate() {
        let w = random_block(&mut rng, d, NormParams::new(mode), spectral);
        let spec = random_spec(&mut rng, d);
        let mix = random_mix(&mut rng, rows)?;
        let report = monte_carlo_module_dist(ProbeModule::Ta, &w, &spec, rows, Some(&mix), trials, stream.child(k as u64))?;
        let worst_se = report
            .predicted
            .mean()
            .iter()
            .zip(report.empirical.mean())
            .zip(report.mean_standard_errors())
            .map(|((p, e), se)| (p - e).abs() / se.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        checks.push(BoundCheck::new(format!("mean_within_se_{}", mode.name()), worst_se, MEAN_SE));
        checks.push(BoundCheck::new(
            format!("cov_rel_err_{}", mode.name()),
            report.cov_frob_rel_err,
            cov_tolerance(trials),
        ));
    }
    Ok(CheckFamily::new("fixed_mix_agreement", checks))
}

/// Fuzzed inputs with large column offsets: post-IC column sums and temporal
/// variances.
pub fn ic_exactness(inputs: usize, stream: RngStream) -> Result<CheckFamily> {
    let mut rng = stream.rng();
    let (mut worst_sum, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..inputs {
        let n = rng.index(1, 16);
        let d = rng.index(1, 8);
        let scale = 10f64.powf(rng.uniform(-3.0, 1.0));
        let mut z = random_matrix(&mut rng, n, d, scale);
        for j in 0..d {
            let offset = rng.uniform(-10.0, 10.0);
            for i in 0..n {
                z.set(i, j, z.get(i, j) + offset);
            }
        }
        let c = instance_center(&z);
        let sums = c.column_sums();
        worst_sum = worst_sum.max(sums.iter().map(|s| s.abs()).fold(0.0, f64::max) / n as f64);
        for j in 0..d {
            let before = column_variance(&z, j);
            let after = column_variance(&c, j);
            let rel = if before > 0.0 { (after - before).abs() / before } else { after.abs() };
            worst_var = worst_var.max(rel);
        }
    }
    Ok(CheckFamily::new(
        "ic_exactness",
        vec![
            BoundCheck::new("ic_column_sum_per_row", worst_sum, IC_TOL),
            BoundCheck::new("ic_variance_rel_change", worst_var, IC_TOL),
        ],
    ))
}

/// Temporal variance of column `j` around its own (shifted) mean.
fn column_variance(z: &Tensor, j: usize) -> f64 {
    let n = z.rows();
    let shift = z.get(0, j);
    let mean = (0..n).map(|i| z.get(i, j) - shift).sum::<f64>() / n as f64;
    (0..n).map(|i| (z.get(i, j) - shift - mean).powi(2)).sum::<f64>() / n as f64
}

/// Covariance-change bound over random draws (worst `lhs/rhs`) and the
/// quadratic response of its left side to scaling `W_v`.
pub fn variance_bound(draws: usize, stream: RngStream) -> Result<CheckFamily> {
    let mut rng = stream.rng();
    let (mut worst_op, mut worst_fro, mut worst_scale) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..draws {
        let d = rng.index(1, 8);
        let w_v = random_matrix(&mut rng, d, d, 1.0);
        let w_l = random_matrix(&mut rng, d, d, 1.0);
        let sigma = random_covariance(&mut rng, d);
        let [op, fro] = variance_bound_terms(&w_v, &w_l, &sigma)?;
        worst_op = worst_op.max(op.0 / op.1);
        worst_fro = worst_fro.max(fro.0 / fro.1);
        for s in [0.5, 2.0, 10.0] {
            let [scaled, _] = variance_bound_terms(&w_v.scale(s), &w_l, &sigma)?;
            worst_scale = worst_scale.max((scaled.0 / (s * s * op.0) - 1.0).abs());
        }
    }
    Ok(CheckFamily::new(
        "variance_bound",
        vec![
            BoundCheck::new("op2_worst_ratio", worst_op, 1.0),
            BoundCheck::new("frob_worst_ratio", worst_fro, 1.0),
            BoundCheck::new("quadratic_scaling_rel_err", worst_scale, 1e-9),
        ],
    ))
}

/// `‖Σ′‖₂ ≤ 2‖Σ‖₂` over random constrained blocks, the equality case, and one
/// Monte Carlo confirmation.
pub fn stam_output_bound(draws: usize, trials: usize, stream: RngStream) -> Result<CheckFamily> {
    let mut rng = stream.rng();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let d = rng.index(1, 8);
        let w = random_block(&mut rng, d, NormParams::new(NormMode::InstanceCenter), true);
        let sigma = random_covariance(&mut rng, d);
        let out = operator_2_norm(&stam_closed_form_cov(&w, &sigma)?);
        worst = worst.max(out / (2.0 * operator_2_norm(&sigma)));
    }
    let d = 4;
    let eq = BlockWeights::identity(d, NormParams::new(NormMode::InstanceCenter), true);
    let eq_norm = operator_2_norm(&stam_closed_form_cov(&eq, &Tensor::identity(d))?);
    let w = random_block(&mut rng, d, NormParams::new(NormMode::InstanceCenter), true);
    let spec = random_spec(&mut rng, d);
    let mut checks = vec![
        BoundCheck::new("closed_form_worst_ratio", worst, 1.0),
        BoundCheck::new("equality_case_abs_err", (eq_norm - 2.0).abs(), 1e-9),
    ];
    checks.extend(
        check_stam_output_bound(&w, &spec, trials, stream.child(1))?
            .into_iter()
            .filter(|c| c.name.ends_with("monte_carlo")),
    );
    Ok(CheckFamily::new("stam_output_bound", checks))
}

pub fn softmax_lipschitz(pairs: usize, stream: RngStream) -> Result<CheckFamily> {
    let checks = [4usize, 16]
        .iter()
        .enumerate()
        .map(|(k, &d)| check_softmax_lipschitz(d, pairs, stream.child(k as u64)).map(|(_, c)| c))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckFamily::new("softmax_lipschitz", checks))
}

/// `|Δω|` against the query-update bound over random draws (worst ratio).
pub fn wq_tuning(draws: usize, stream: RngStream) -> Result<CheckFamily> {
    let mut rng = stream.rng();
    let (mut worst, mut worst_cov) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let d = rng.index(1, 8);
        let n = rng.index(2, 8);
        let w = random_block(&mut rng, d, NormParams::new(NormMode::None), false);
        let zhat = random_matrix(&mut rng, n, d, 1.0);
        let step = 10f64.powf(rng.uniform(-3.0, 0.0));
        let delta = random_matrix(&mut rng, d, d, step);
        let i = rng.index(0, n - 1);
        let checks = check_wq_tuning_bound(&w, &delta, &zhat, i)?;
        let ratio = |c: &BoundCheck| if c.rhs > 0.0 { c.lhs / c.rhs } else if c.lhs > 0.0 { f64::INFINITY } else { 0.0 };
        worst = worst.max(ratio(&checks[0]));
        worst_cov = worst_cov.max(ratio(&checks[1]));
    }
    Ok(CheckFamily::new(
        "wq_tuning_bound",
        vec![
            BoundCheck::new("omega_worst_ratio", worst, 1.0),
            BoundCheck::new("covariance_worst_ratio", worst_cov, 1.0),
        ],
    ))
}

/// Constructed slice with temporal means of magnitude 0.5. Under `mode` the
/// output must be centered, or, with `expect_failure`, must keep a temporal
/// mean of at least [`CENTERING_DEVIATION`]. Instance centering is always
/// checked as the reference.
pub fn centering(mode: NormMode, expect_failure: bool) -> Result<CheckFamily> {
    let z = centering_failure_case(8, 6);
    let params = match mode {
        NormMode::LayerNorm => NormParams::layer_norm(vec![1.0], vec![0.0]),
        m => NormParams::new(m),
    };
    let dev = max_temporal_mean(&apply_norm(&z, &params)?);
    let main = if expect_failure {
        BoundCheck::at_least(format!("{}_retains_temporal_mean", mode.name()), dev, CENTERING_DEVIATION)
    } else {
        BoundCheck::new(format!("{}_temporal_mean", mode.name()), dev, IC_TOL)
    };
    let mut checks = vec![main];
    if mode != NormMode::InstanceCenter {
        checks.push(BoundCheck::new("instance_center_temporal_mean", max_temporal_mean(&instance_center(&z)), IC_TOL));
    }
    Ok(CheckFamily::new("centering", checks))
}

/// Fine-coarse context row counts for random `(n, l, r)` and the single-frame
/// reduction to self-attention.
pub fn ffam_structure(cases: usize, stream: RngStream) -> Result<CheckFamily> {
    let mut rng = stream.rng();
    let mut mismatches = 0usize;
    for _ in 0..cases {
        let (n, side, r) = random_ffam_dims(&mut rng);
        let l = side * side;
        let frames = random_frames(&mut rng, n, l, 2)?;
        let i = rng.index(0, n - 1);
        let rows = fine_coarse_context(&frames, i, r)?.rows();
        let formula = (n - 1 + r * r) * l / (r * r);
        if rows != formula || rows != fine_coarse_len(n, l, r) {
            mismatches += 1;
        }
    }
    let frames = random_frames(&mut rng, 8, 64, 4)?;
    let rows_176 = fine_coarse_context(&frames, 0, 2)?.rows();
    let single = random_frames(&mut rng, 1, 16, 4)?;
    let w = random_block(&mut rng, 4, NormParams::new(NormMode::None), false);
    let a = ffam(&single, 0, &w, 2)?;
    let b = attention(single.frame(0), single.frame(0), &w)?;
    let diff = a.sub(&b)?.max_abs();
    Ok(CheckFamily::new(
        "ffam_structure",
        vec![
            BoundCheck::new("row_count_mismatches", mismatches as f64, 0.0),
            BoundCheck::new("rows_n8_l64_r2_minus_176", (rows_176 as f64 - 176.0).abs(), 0.0),
            BoundCheck::new("single_frame_vs_self_attention", diff, 1e-10),
        ],
    ))
}

/// Random `(n, grid side, r)` with `r` dividing the side.
pub fn random_ffam_dims(rng: &mut Sampler) -> (usize, usize, usize) {
    let n = rng.index(1, 8);
    let side = [2usize, 4, 6, 8, 12][rng.index(0, 4)];
    let divisors: Vec<usize> = (1..=side).filter(|r| side % r == 0).collect();
    let r = divisors[rng.index(0, divisors.len() - 1)];
    (n, side, r)
}

fn random_frames(rng: &mut Sampler, n: usize, l: usize, d: usize) -> Result<FrameSet> {
    FrameSet::square((0..n).map(|_| random_matrix(rng, l, d, 1.0)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub d: usize,
    pub rows: usize,
    pub trials: usize,
    pub spectral: bool,
    pub norm_mode: NormMode,
    pub expect_centering_failure: bool,
    /// Random draws per bound family.
    pub draws: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            d: 4,
            rows: 8,
            trials: 20_000,
            spectral: true,
            norm_mode: NormMode::InstanceCenter,
            expect_centering_failure: false,
            draws: 1000,
        }
    }
}

/// Runs every family with streams derived from `seed`.
pub fn run_suite(cfg: &SuiteConfig, seed: u64) -> Result<Vec<CheckFamily>> {
    if cfg.trials < MIN_TRIALS {
        return Err(Error::Config(format!("trials below minimum {MIN_TRIALS}")));
    }
    if cfg.d == 0 || cfg.rows == 0 || cfg.draws == 0 {
        return Err(Error::Config("d, rows and draws must be positive".into()));
    }
    let s = |name: &str| RngStream::named(seed, name);
    Ok(vec![
        fixed_mix_agreement(cfg.d, cfg.rows, cfg.trials, cfg.spectral, s("fixed_mix"))?,
        ic_exactness(cfg.draws, s("ic"))?,
        variance_bound(cfg.draws, s("variance_bound"))?,
        stam_output_bound(cfg.draws, cfg.trials, s("stam_bound"))?,
        softmax_lipschitz(cfg.trials, s("lipschitz"))?,
        wq_tuning(cfg.draws, s("wq"))?,
        centering(cfg.norm_mode, cfg.expect_centering_failure)?,
        ffam_structure(50, s("ffam"))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let cfg = SuiteConfig {
            trials: 10_000,
            draws: 200,
            ..SuiteConfig::default()
        };
        let fams = run_suite(&cfg, 42).unwrap();
        assert!(fams.len() >= 6);
        for f in &fams {
            assert!(f.passed(), "{}", f.to_json());
        }
    }

    #[test]
    fn centering_family_modes() {
        assert!(centering(NormMode::InstanceCenter, false).unwrap().passed());
        assert!(centering(NormMode::InstanceNorm, false).unwrap().passed());
        assert!(!centering(NormMode::LayerNorm, false).unwrap().passed());
        assert!(centering(NormMode::LayerNorm, true).unwrap().passed());
        assert!(centering(NormMode::LayerNormNoAffine, true).unwrap().passed());
        assert!(!centering(NormMode::InstanceCenter, true).unwrap().passed());
    }

    #[test]
    fn rejects_small_trials() {
        let cfg = SuiteConfig {
            trials: 10,
            ..SuiteConfig::default()
        };
        assert_eq!(run_suite(&cfg, 1).unwrap_err(), Error::Config("trials below minimum 10000".into()));
    }

    #[test]
    fn random_covariance_is_psd() {
        let mut rng = RngStream::new(0, 0).rng();
        for d in 1..6 {
            assert!(crate::gaussian::cholesky(&random_covariance(&mut rng, d)).is_ok());
        }
    }
}
