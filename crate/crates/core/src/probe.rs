//! Gaussian moment propagation through attention blocks, Monte Carlo
//! estimation of actual block outputs, and numerical audits of the
//! shift bounds.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gaussian::{estimate_stats, GaussianSampler, GaussianSpec};
use crate::layers::attention::{transformer_block, transformer_block_with_mixing, BlockWeights};
use crate::layers::norm::{NormMode, NormParams};
use crate::layers::temporal::{stam, ta_module};
use crate::report::{config_hash, num, num_matrix, num_vec};
use crate::rng::RngStream;
use crate::spectral::operator_2_norm;
use crate::tensor::{dot, frobenius_norm, l2_norm, matmul, matmul_transb, softmax_slice, Tensor};

/// Relative slack on every `lhs ≤ rhs` comparison.
pub const BOUND_RTOL: f64 = 1e-9;
pub const MIN_TRIALS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

impl BoundCheck {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            satisfied: lhs <= rhs * (1.0 + BOUND_RTOL),
        }
    }

    /// A lower-bound requirement `lhs ≥ rhs`, stored as `-lhs ≤ -rhs`.
    pub fn at_least(name: impl Into<String>, value: f64, floor: f64) -> Self {
        Self {
            name: name.into(),
            lhs: value,
            rhs: floor,
            satisfied: value >= floor,
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "lhs": num(self.lhs),
            "rhs": num(self.rhs),
            "satisfied": self.satisfied,
        })
    }
}

/// One row of a softmax mixing matrix, with `ω = ‖row‖₂²` cached.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingRow {
    weights: Vec<f64>,
    omega: f64,
}

impl MixingRow {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Shape("mixing row is empty".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Domain("mixing weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixing weights sum to {total}, expected 1")));
        }
        let omega = dot(&weights, &weights);
        Ok(Self { weights, omega })
    }

    pub fn uniform(l: usize) -> Result<Self> {
        Self::new(vec![1.0 / l as f64; l])
    }

    pub fn one_hot(l: usize, k: usize) -> Result<Self> {
        if k >= l {
            return Err(Error::Shape(format!("one-hot index {k} out of range for length {l}")));
        }
        let mut w = vec![0.0; l];
        w[k] = 1.0;
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `N(W_vᵀμ, W_vᵀΣW_v)`.
pub fn predict_value_dist(c_spec: &GaussianSpec, w_v: &Tensor) -> Result<GaussianSpec> {
    check_rows("predict_value_dist", c_spec.dim(), w_v)?;
    let mean = vec_mat(c_spec.mean(), w_v);
    let cov = congruence(c_spec.cov(), w_v)?;
    Ok(GaussianSpec::from_parts_unchecked(mean, cov))
}

/// `N(μ_V, ω·Σ_V)`.
pub fn predict_attention_row_dist(v_spec: &GaussianSpec, mix: &MixingRow) -> GaussianSpec {
    GaussianSpec::from_parts_unchecked(v_spec.mean().to_vec(), v_spec.cov().scale(mix.omega()))
}

/// `N(μ_z + W_Lᵀμ_V + b, Σ_z + ω·W_LᵀΣ_V W_L)`.
pub fn predict_transformer_dist(
    z_spec: &GaussianSpec,
    v_spec: &GaussianSpec,
    omega: f64,
    w_l: &Tensor,
    b_l: &[f64],
) -> Result<GaussianSpec> {
    check_rows("predict_transformer_dist", v_spec.dim(), w_l)?;
    if w_l.cols() != z_spec.dim() || b_l.len() != z_spec.dim() {
        return Err(Error::Dimension {
            op: "predict_transformer_dist",
            left: vec![z_spec.dim()],
            right: vec![w_l.cols(), b_l.len()],
        });
    }
    if !(omega >= 0.0 && omega <= 1.0) {
        return Err(Error::Domain(format!("omega {omega} outside [0, 1]")));
    }
    let (mean, cov_delta) = transition(v_spec, omega, w_l, b_l)?;
    let mean = z_spec.mean().iter().zip(&mean).map(|(m, d)| m + d).collect();
    let cov = z_spec.cov().add(&cov_delta)?.symmetrized();
    Ok(GaussianSpec::from_parts_unchecked(mean, cov))
}

/// `(W_Lᵀμ_V + b, ω·W_LᵀΣ_V W_L)`, the change added to the residual stream.
fn transition(v_spec: &GaussianSpec, omega: f64, w_l: &Tensor, b_l: &[f64]) -> Result<(Vec<f64>, Tensor)> {
    let mean = vec_mat(v_spec.mean(), w_l).iter().zip(b_l).map(|(m, b)| m + b).collect();
    let cov = congruence(v_spec.cov(), w_l)?.scale(omega);
    Ok((mean, cov))
}

fn check_rows(op: &'static str, d: usize, w: &Tensor) -> Result<()> {
    if w.rows() != d {
        return Err(Error::Dimension {
            op,
            left: vec![d],
            right: w.shape().to_vec(),
        });
    }
    Ok(())
}

/// `vᵀW` as a vector.
fn vec_mat(v: &[f64], w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &vi) in v.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(w.row_slice(i)) {
            *o += vi * wij;
        }
    }
    out
}

/// `WᵀΣW`, symmetrized.
fn congruence(sigma: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(matmul(&w.transpose(), &matmul(sigma, w)?)?.symmetrized())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeModule {
    /// Temporal self-attention block with any norm.
    Ta,
    /// Shift-restricted temporal block (IC and spectral constraint enforced).
    Stam,
    /// Block with an independent context drawn from the same distribution.
    Transformer,
}

impl ProbeModule {
    pub fn name(self) -> &'static str {
        match self {
            ProbeModule::Ta => "ta",
            ProbeModule::Stam => "stam",
            ProbeModule::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ProbeModule::Ta, ProbeModule::Stam, ProbeModule::Transformer]
            .into_iter()
            .find(|m| m.name() == s)
    }

    fn is_self(self) -> bool {
        !matches!(self, ProbeModule::Transformer)
    }
}

/// Row distribution after `norm`, from population statistics of `spec`.
///
/// Exact for `none` and for the mean/covariance of a single centered row under
/// IC up to the `1/n` row coupling, which [`predict_fixed_mix`] accounts for.
/// Layer Norm and Instance Norm are approximated by freezing their statistics
/// at population values.
pub fn normalized_input_spec(spec: &GaussianSpec, norm: &NormParams) -> Result<GaussianSpec> {
    let d = spec.dim();
    let mu = spec.mean();
    let sigma = spec.cov();
    Ok(match norm.mode {
        NormMode::None => spec.clone(),
        NormMode::InstanceCenter => GaussianSpec::from_parts_unchecked(vec![0.0; d], sigma.clone()),
        NormMode::InstanceNorm => {
            let s: Vec<f64> = (0..d).map(|j| sigma.get(j, j).sqrt() + norm.epsilon).collect();
            let mut cov = sigma.clone();
            for i in 0..d {
                for j in 0..d {
                    cov.set(i, j, sigma.get(i, j) / (s[i] * s[j]));
                }
            }
            GaussianSpec::from_parts_unchecked(vec![0.0; d], cov)
        }
        NormMode::LayerNorm | NormMode::LayerNormNoAffine => {
            let m = mu.iter().sum::<f64>() / d as f64;
            let spread = mu.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
            let var = (0..d).map(|j| sigma.get(j, j)).sum::<f64>() / d as f64 + spread;
            let s = var.sqrt() + norm.epsilon;
            let affine: Vec<(f64, f64)> = (0..d).map(|j| norm.affine_at(j)).collect();
            let mean = (0..d).map(|j| affine[j].0 * (mu[j] - m) / s + affine[j].1).collect();
            let mut cov = sigma.clone();
            for i in 0..d {
                for j in 0..d {
                    cov.set(i, j, affine[i].0 * affine[j].0 * sigma.get(i, j) / (s * s));
                }
            }
            GaussianSpec::from_parts_unchecked(mean, cov)
        }
    })
}

/// Exact output moments of the designated row (row 0) when the mixing row is
/// fixed and the context norm is `none` or `instance_center`.
///
/// With mixing `m` over `n` context rows, centering turns the weights into
/// `a = m − 1/n` on the raw rows, so the value mean vanishes and `ω` becomes
/// `‖a‖² = ω − 1/n`. Self-attention modules also carry the correlation
/// between the residual row and its own value, `a₀(ΣG + GᵀΣ)` with
/// `G = W̄_v W̄_L`.
pub fn predict_fixed_mix(
    module: ProbeModule,
    w: &BlockWeights,
    z_spec: &GaussianSpec,
    mix: &MixingRow,
) -> Result<GaussianSpec> {
    let n = mix.len() as f64;
    let centered = match w.norm_c.mode {
        NormMode::None => false,
        NormMode::InstanceCenter => true,
        other => {
            return Err(Error::Config(format!(
                "no exact fixed-mix propagation for norm mode {other}"
            )))
        }
    };
    let a: Vec<f64> = mix
        .weights()
        .iter()
        .map(|m| if centered { m - 1.0 / n } else { *m })
        .collect();
    let omega_eff = dot(&a, &a);
    let w_v = w.effective_value()?;
    let w_l = w.effective_output()?;
    let zhat = normalized_input_spec(z_spec, &w.norm_c)?;
    let v = predict_value_dist(&zhat, &w_v)?;
    let out = predict_transformer_dist(z_spec, &v, omega_eff, &w_l, &w.b_l)?;
    if !module.is_self() {
        return Ok(out);
    }
    let g = matmul(&w_v, &w_l)?;
    let sg = matmul(z_spec.cov(), &g)?;
    let cross = sg.add(&sg.transpose())?.scale(a[0]);
    let cov = out.cov().add(&cross)?.symmetrized();
    Ok(GaussianSpec::from_parts_unchecked(out.mean().to_vec(), cov))
}

/// Worst-case (`ω = 1`) closed-form transition of a temporal block on inputs
/// distributed as `z_spec`: `(W̄_LᵀW̄_vᵀμ̂ + b, W̄_LᵀW̄_vᵀΣ̂W̄_vW̄_L)`.
pub fn closed_form_transition(w: &BlockWeights, z_spec: &GaussianSpec) -> Result<(Vec<f64>, Tensor)> {
    let zhat = normalized_input_spec(z_spec, &w.norm_c)?;
    let v = predict_value_dist(&zhat, &w.effective_value()?)?;
    transition(&v, 1.0, &w.effective_output()?, &w.b_l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftMetrics {
    pub mean_shift: f64,
    pub cov_shift_frob: f64,
    pub cov_shift_spec: f64,
}

pub fn shift_metrics(before: &GaussianSpec, after: &GaussianSpec) -> Result<ShiftMetrics> {
    if before.dim() != after.dim() {
        return Err(Error::Dimension {
            op: "shift_metrics",
            left: vec![before.dim()],
            right: vec![after.dim()],
        });
    }
    let dm: Vec<f64> = after.mean().iter().zip(before.mean()).map(|(a, b)| a - b).collect();
    Ok(metrics_from_delta(&dm, &after.cov().sub(before.cov())?))
}

fn metrics_from_delta(mean_delta: &[f64], cov_delta: &Tensor) -> ShiftMetrics {
    ShiftMetrics {
        mean_shift: l2_norm(mean_delta),
        cov_shift_frob: frobenius_norm(cov_delta),
        cov_shift_spec: operator_2_norm(cov_delta),
    }
}

/// Closed-form shift of a temporal block, from the transition itself so that
/// the mean shift of an IC block is exactly `‖b_L‖₂`.
pub fn closed_form_shift(w: &BlockWeights, z_spec: &GaussianSpec) -> Result<ShiftMetrics> {
    let (dm, dc) = closed_form_transition(w, z_spec)?;
    Ok(metrics_from_delta(&dm, &dc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReport {
    pub predicted: GaussianSpec,
    pub empirical: GaussianSpec,
    pub mean_abs_err: f64,
    pub cov_frob_rel_err: f64,
    pub bound_checks: Vec<BoundCheck>,
    pub trials: usize,
    pub seed: u64,
    pub module: String,
    pub config_hash: String,
    /// `true` when the mixing row was fixed, so the prediction's independence
    /// premise holds. Otherwise the report is a diagnostic.
    pub fixed_mix: bool,
    /// `true` when the prediction is exact rather than a population approximation.
    pub exact: bool,
}

impl ShiftReport {
    /// Per-coordinate standard error of the empirical mean under the prediction.
    pub fn mean_standard_errors(&self) -> Vec<f64> {
        self.predicted
            .variances()
            .iter()
            .map(|v| (v.max(0.0) / self.trials as f64).sqrt())
            .collect()
    }

    /// Every coordinate of the empirical mean lies within `k` standard errors.
    pub fn mean_within(&self, k: f64) -> bool {
        self.predicted
            .mean()
            .iter()
            .zip(self.empirical.mean())
            .zip(self.mean_standard_errors())
            .all(|((p, e), se)| (p - e).abs() <= k * se)
    }

    pub fn label(&self) -> &'static str {
        match (self.fixed_mix, self.exact) {
            (true, true) => "fixed_mix",
            (true, false) => "fixed_mix_approximate",
            (false, _) => "assumption-violating",
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "predicted_mean": num_vec(self.predicted.mean()),
            "predicted_cov": num_matrix(self.predicted.cov()),
            "empirical_mean": num_vec(self.empirical.mean()),
            "empirical_cov": num_matrix(self.empirical.cov()),
            "mean_abs_err": num(self.mean_abs_err),
            "cov_frob_rel_err": num(self.cov_frob_rel_err),
            "bound_checks": self.bound_checks.iter().map(BoundCheck::to_json).collect::<Vec<_>>(),
            "trials": self.trials,
            "seed": self.seed,
            "module": self.module,
            "label": self.label(),
            "config_hash": self.config_hash,
        })
    }
}

/// Samples `trials` inputs of `rows` i.i.d. rows from `z_spec`, runs the
/// module and compares the distribution of output row 0 with the closed form.
///
/// With `fixed_mix` the attention row is overridden and `rows` must equal its
/// length. For `transformer`, the context is an independent `rows×d` draw and
/// the query is a single row.
pub fn monte_carlo_module_dist(
    module: ProbeModule,
    w: &BlockWeights,
    z_spec: &GaussianSpec,
    rows: usize,
    fixed_mix: Option<&MixingRow>,
    trials: usize,
    stream: RngStream,
) -> Result<ShiftReport> {
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!("trials below minimum {MIN_TRIALS}")));
    }
    if rows == 0 {
        return Err(Error::Shape("probe needs at least one input row".into()));
    }
    if let Some(m) = fixed_mix {
        if m.len() != rows {
            return Err(Error::Dimension {
                op: "fixed mix",
                left: vec![rows],
                right: vec![m.len()],
            });
        }
    }
    let d = z_spec.dim();
    if w.query_dim() != d || w.context_dim() != d {
        return Err(Error::Dimension {
            op: "probe weights",
            left: vec![d, d],
            right: vec![w.query_dim(), w.context_dim()],
        });
    }
    if module == ProbeModule::Stam && !(w.spectral_constrained && w.norm_c.mode == NormMode::InstanceCenter) {
        return Err(Error::Config("stam probe requires instance_center and the spectral constraint".into()));
    }
    let resolved = w.resolved()?;
    let sampler = GaussianSampler::new(z_spec)?;
    let mixing = fixed_mix.map(|m| Tensor::row(m.weights()));
    let mut outputs = Vec::with_capacity(trials * d);
    for t in 0..trials {
        let mut rng = stream.child(t as u64).rng();
        let z = sampler.sample(rows, &mut rng);
        let row = match (module, &mixing) {
            (ProbeModule::Transformer, mix) => {
                let q = sampler.sample(1, &mut rng);
                match mix {
                    Some(m) => transformer_block_with_mixing(&q, &z, &resolved, m)?,
                    None => transformer_block(&q, &z, &resolved)?,
                }
            }
            (_, Some(m)) => {
                let z0 = Tensor::row(z.row_slice(0));
                transformer_block_with_mixing(&z0, &z, &resolved, m)?
            }
            (ProbeModule::Ta, None) => ta_module(&z.reshape(&[1, rows, d])?, &resolved)?,
            (ProbeModule::Stam, None) => stam(&z.reshape(&[1, rows, d])?, w)?,
        };
        outputs.extend_from_slice(&row.data()[..d]);
    }
    let empirical = estimate_stats(&Tensor::matrix(trials, d, outputs)?)?;

    let exact = fixed_mix.is_some() && matches!(w.norm_c.mode, NormMode::None | NormMode::InstanceCenter);
    let predicted = match fixed_mix {
        Some(m) if exact => predict_fixed_mix(module, w, z_spec, m)?,
        Some(m) => approximate_prediction(w, z_spec, m.omega())?,
        None => approximate_prediction(w, z_spec, 1.0)?,
    };
    let mean_abs_err = predicted
        .mean()
        .iter()
        .zip(empirical.mean())
        .map(|(p, e)| (p - e).abs())
        .fold(0.0, f64::max);
    let pf = frobenius_norm(predicted.cov());
    let diff = frobenius_norm(&empirical.cov().sub(predicted.cov())?);
    let cov_frob_rel_err = if pf > 0.0 { diff / pf } else { diff };
    let config = json!({
        "module": module.name(),
        "d": d,
        "rows": rows,
        "trials": trials,
        "seed": stream.base_seed,
        "stream_id": stream.stream_id,
        "norm_z": w.norm_z.mode.name(),
        "norm_c": w.norm_c.mode.name(),
        "spectral": w.spectral_constrained,
        "fixed_mix": fixed_mix.map(|m| num_vec(m.weights())),
    });
    Ok(ShiftReport {
        predicted,
        empirical,
        mean_abs_err,
        cov_frob_rel_err,
        bound_checks: Vec::new(),
        trials,
        seed: stream.base_seed,
        module: module.name().to_string(),
        config_hash: config_hash(&config),
        fixed_mix: fixed_mix.is_some(),
        exact,
    })
}

/// Direct application of the closed form with population-normalized inputs.
fn approximate_prediction(w: &BlockWeights, z_spec: &GaussianSpec, omega: f64) -> Result<GaussianSpec> {
    let zhat = normalized_input_spec(z_spec, &w.norm_c)?;
    let v = predict_value_dist(&zhat, &w.effective_value()?)?;
    predict_transformer_dist(z_spec, &v, omega, &w.effective_output()?, &w.b_l)
}

/// Largest `α_j²` of a rescaling norm, else 1.
pub fn rescale_multiplier(norm: &NormParams) -> f64 {
    if !norm.mode.has_affine() {
        return 1.0;
    }
    norm.alpha.iter().map(|a| a * a).fold(0.0, f64::max)
}

/// Terms of the covariance-change bound for raw matrices:
/// `‖W_LᵀW_vᵀΣW_vW_L‖ ≤ ‖W_L‖²‖W_v‖²‖Σ‖`, as
/// `[(lhs, rhs) operator-2, (lhs, rhs) Frobenius]`.
pub fn variance_bound_terms(w_v: &Tensor, w_l: &Tensor, sigma: &Tensor) -> Result<[(f64, f64); 2]> {
    let delta = congruence(&congruence(sigma, w_v)?, w_l)?;
    let op = (
        operator_2_norm(&delta),
        operator_2_norm(w_l).powi(2) * operator_2_norm(w_v).powi(2) * operator_2_norm(sigma),
    );
    let fro = (
        frobenius_norm(&delta),
        frobenius_norm(w_l).powi(2) * frobenius_norm(w_v).powi(2) * frobenius_norm(sigma),
    );
    Ok([op, fro])
}

/// Covariance-change bound at worst-case `ω = 1` with the block's effective
/// weights, under both norms. A rescaling norm on the context multiplies the
/// right-hand side by its largest `α²`.
pub fn check_variance_bound(w: &BlockWeights, zhat_spec: &GaussianSpec) -> Result<Vec<BoundCheck>> {
    let [op, fro] = variance_bound_terms(&w.effective_value()?, &w.effective_output()?, zhat_spec.cov())?;
    let k = rescale_multiplier(&w.norm_c);
    Ok(vec![
        BoundCheck::new("variance_bound_op2", op.0, op.1 * k),
        BoundCheck::new("variance_bound_frob", fro.0, fro.1 * k),
    ])
}

/// `Σ + W̄_LᵀW̄_vᵀΣW̄_vW̄_L`: the output covariance at `ω = 1` when the
/// centered input keeps covariance `Σ`.
pub fn stam_closed_form_cov(w: &BlockWeights, sigma: &Tensor) -> Result<Tensor> {
    let delta = congruence(&congruence(sigma, &w.effective_value()?)?, &w.effective_output()?)?;
    Ok(sigma.add(&delta)?.symmetrized())
}

/// `‖Σ′‖₂ ≤ 2‖Σ‖₂` for a constrained block, in closed form and, when
/// `trials > 0`, on a Monte Carlo estimate with a one-hot mix over an
/// independent centered context (tolerance three standard errors).
pub fn check_stam_output_bound(
    w: &BlockWeights,
    z_spec: &GaussianSpec,
    trials: usize,
    stream: RngStream,
) -> Result<Vec<BoundCheck>> {
    if !w.spectral_constrained {
        return Err(Error::Config("output bound requires spectrally constrained weights".into()));
    }
    let s = operator_2_norm(z_spec.cov());
    let closed = operator_2_norm(&stam_closed_form_cov(w, z_spec.cov())?);
    let mut checks = vec![BoundCheck::new("stam_output_bound_closed_form", closed, 2.0 * s)];
    if trials > 0 {
        let rows = 4;
        let mix = MixingRow::one_hot(rows, 0)?;
        let report = monte_carlo_module_dist(ProbeModule::Transformer, w, z_spec, rows, Some(&mix), trials, stream)?;
        let emp = operator_2_norm(report.empirical.cov());
        let se = operator_2_norm(report.predicted.cov()) * (2.0 / (trials - 1) as f64).sqrt();
        checks.push(BoundCheck::new("stam_output_bound_monte_carlo", emp, 2.0 * s + 3.0 * se));
    }
    Ok(checks)
}

/// Largest `‖softmax_λ(x) − softmax_λ(x′)‖₂ / ‖x − x′‖₂` over random pairs of
/// length-`d` vectors with entries in `[−10, 10]`, `λ = 1/√d`. Half the pairs
/// are independent, half are local perturbations of random size.
pub fn check_softmax_lipschitz(d: usize, pairs: usize, stream: RngStream) -> Result<(f64, BoundCheck)> {
    if pairs < MIN_TRIALS {
        return Err(Error::Config(format!("pairs below minimum {MIN_TRIALS}")));
    }
    if d < 1 {
        return Err(Error::Shape("softmax dimension must be positive".into()));
    }
    let lambda = 1.0 / (d as f64).sqrt();
    let mut rng = stream.rng();
    let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
    let (mut sx, mut sy) = (vec![0.0; d], vec![0.0; d]);
    let mut max_ratio = 0.0f64;
    for p in 0..pairs {
        for v in x.iter_mut() {
            *v = rng.uniform(-10.0, 10.0);
        }
        if p % 2 == 0 {
            for v in y.iter_mut() {
                *v = rng.uniform(-10.0, 10.0);
            }
        } else {
            let scale = 10f64.powf(rng.uniform(-6.0, 0.0));
            for (v, xv) in y.iter_mut().zip(&x) {
                *v = (xv + scale * rng.uniform(-1.0, 1.0)).clamp(-10.0, 10.0);
            }
        }
        let dx = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dx == 0.0 {
            continue;
        }
        sx.copy_from_slice(&x);
        sy.copy_from_slice(&y);
        softmax_slice(&mut sx, lambda);
        softmax_slice(&mut sy, lambda);
        let ds = sx.iter().zip(&sy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        max_ratio = max_ratio.max(ds / dx);
    }
    Ok((max_ratio, BoundCheck::new(format!("softmax_lipschitz_d{d}"), max_ratio, lambda)))
}

/// `ω` of row `i` of `softmax(ẑW_q (ẑW_k)ᵀ / √d)`.
fn row_omega(zhat: &Tensor, i: usize, w_q: &Tensor, k: &Tensor) -> Result<f64> {
    let q = matmul(&Tensor::row(zhat.row_slice(i)), w_q)?;
    let mut logits = matmul_transb(&q, k)?.into_data();
    softmax_slice(&mut logits, 1.0 / (w_q.cols() as f64).sqrt());
    Ok(dot(&logits, &logits))
}

/// Sensitivity of `ω` to a query-projection update `W_q → W_q + Δ`:
/// `|Δω| ≤ (2/d)‖Δ‖₂‖ẑⁱ‖₂‖K‖₂`, and the implied covariance change
/// `|Δω|·‖W_LᵀΣ_V W_L‖₂` against `rhs·‖W_LᵀΣ_V W_L‖₂` with unit input
/// covariance `Σ_V = W̄_vᵀW̄_v`.
pub fn check_wq_tuning_bound(w: &BlockWeights, delta: &Tensor, zhat: &Tensor, i: usize) -> Result<Vec<BoundCheck>> {
    if delta.shape() != w.w_q.shape() {
        return Err(Error::Dimension {
            op: "wq perturbation",
            left: w.w_q.shape().to_vec(),
            right: delta.shape().to_vec(),
        });
    }
    if i >= zhat.rows() {
        return Err(Error::Shape(format!("row {i} out of range for {} rows", zhat.rows())));
    }
    let k = matmul(zhat, &w.w_k)?;
    let before = row_omega(zhat, i, &w.w_q, &k)?;
    let after = row_omega(zhat, i, &w.w_q.add(delta)?, &k)?;
    let lhs = (after - before).abs();
    let d = w.attn_dim() as f64;
    let rhs = 2.0 / d * operator_2_norm(delta) * l2_norm(zhat.row_slice(i)) * operator_2_norm(&k);
    let w_v = w.effective_value()?;
    let sigma_v = matmul(&w_v.transpose(), &w_v)?;
    let c = operator_2_norm(&congruence(&sigma_v, &w.effective_output()?)?);
    Ok(vec![
        BoundCheck::new("wq_tuning_omega", lhs, rhs),
        BoundCheck::new("wq_tuning_covariance", lhs * c, rhs * c),
    ])
}

/// `n×d` temporal slice whose column `j` has temporal mean `0.5·(−1)ʲ` plus a
/// zero-mean ripple, so the global mean is zero for even `d`.
pub fn centering_failure_case(n: usize, d: usize) -> Tensor {
    let mut z = Tensor::zeros(&[n, d]);
    for t in 0..n {
        for j in 0..d {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let phase = 2.0 * std::f64::consts::PI * (t as f64 + 0.5 * j as f64) / n as f64;
            let ripple = if n > 1 { 0.1 * phase.cos() } else { 0.0 };
            z.set(t, j, 0.5 * sign + ripple);
        }
    }
    z
}

/// Largest absolute temporal (column) mean.
pub fn max_temporal_mean(z: &Tensor) -> f64 {
    z.column_means().into_iter().map(f64::abs).fold(0.0, f64::max)
}

/// Row distribution with per-column means `±0.5` alternating and variance
/// `0.05`, used to show the Layer Norm mean shift.
pub fn biased_input_spec(d: usize) -> GaussianSpec {
    let mean = (0..d).map(|j| if j % 2 == 0 { 0.5 } else { -0.5 }).collect();
    GaussianSpec::from_parts_unchecked(mean, Tensor::diag(&vec![0.05; d]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::norm::{instance_center, layer_norm};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn value_dist_examples() {
        let spec = GaussianSpec::new(vec![1.0, 0.0], Tensor::identity(2)).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        let v = predict_value_dist(&spec, &w).unwrap();
        assert_eq!(v.mean(), &[1.0, 1.0]);
        assert_eq!(v.cov().data(), &[1.0, 1.0, 1.0, 5.0]);
        assert_eq!(predict_value_dist(&spec, &Tensor::identity(2)).unwrap(), spec);
        let zero = GaussianSpec::standard(2);
        assert_eq!(predict_value_dist(&zero, &w).unwrap().mean(), &[0.0, 0.0]);
        assert!(predict_value_dist(&zero, &Tensor::identity(3)).is_err());
    }

    #[test]
    fn mixing_row_examples() {
        let spec = GaussianSpec::standard(2);
        let one = MixingRow::one_hot(3, 1).unwrap();
        assert_eq!(one.omega(), 1.0);
        assert_eq!(predict_attention_row_dist(&spec, &one), spec);
        let u = MixingRow::uniform(4).unwrap();
        assert_eq!(u.omega(), 0.25);
        assert_eq!(predict_attention_row_dist(&spec, &u).cov().data(), &[0.25, 0.0, 0.0, 0.25]);
        let m = MixingRow::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert!((m.omega() - 0.38).abs() < 1e-15);
        assert!(MixingRow::new(vec![0.5, 0.6]).is_err());
        assert!(MixingRow::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn transformer_dist_examples() {
        let z = GaussianSpec::new(vec![0.3, -0.2], Tensor::diag(&[2.0, 3.0])).unwrap();
        let v = GaussianSpec::new(vec![1.0, 1.0], Tensor::identity(2)).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(predict_transformer_dist(&z, &v, 1.0, &zero, &[0.0, 0.0]).unwrap(), z);
        let shifted = predict_transformer_dist(&z, &v, 1.0, &zero, &[1.0, 2.0]).unwrap();
        assert_eq!(shifted.mean(), &[1.3, 1.8]);
        assert_eq!(shifted.cov(), z.cov());
        let out = predict_transformer_dist(&z, &v, 1.0, &Tensor::identity(2), &[0.0, 0.0]).unwrap();
        assert!(close(out.mean(), &[1.3, 0.8], 1e-15));
        assert_eq!(out.cov().data(), &[3.0, 0.0, 0.0, 4.0]);
        assert!(predict_transformer_dist(&z, &v, 1.5, &zero, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn shift_metric_examples() {
        let a = GaussianSpec::standard(2);
        let m = shift_metrics(&a, &a).unwrap();
        assert_eq!((m.mean_shift, m.cov_shift_frob, m.cov_shift_spec), (0.0, 0.0, 0.0));
        let b = GaussianSpec::new(vec![3.0, 4.0], Tensor::identity(2)).unwrap();
        assert_eq!(shift_metrics(&a, &b).unwrap().mean_shift, 5.0);
        let c = GaussianSpec::new(vec![0.0, 0.0], Tensor::diag(&[2.0, 2.0])).unwrap();
        let m = shift_metrics(&a, &c).unwrap();
        assert!((m.cov_shift_spec - 1.0).abs() < 1e-12);
        assert!((m.cov_shift_frob - 2f64.sqrt()).abs() < 1e-15);
        assert!(shift_metrics(&a, &GaussianSpec::standard(3)).is_err());
    }

    #[test]
    fn closed_form_ic_mean_shift_is_bias_norm() {
        let mut s = RngStream::new(5, 0).rng();
        let mut w = BlockWeights::stam(4, &mut s);
        w.w_v = Tensor::matrix(4, 4, s.normals(16)).unwrap();
        w.w_l = Tensor::matrix(4, 4, s.normals(16)).unwrap();
        w.b_l = vec![0.3, -0.4, 1.2, 0.0];
        let spec = biased_input_spec(4);
        let m = closed_form_shift(&w, &spec).unwrap();
        assert_eq!(m.mean_shift, l2_norm(&w.b_l));
        w.b_l = vec![0.0; 4];
        assert_eq!(closed_form_shift(&w, &spec).unwrap().mean_shift, 0.0);
    }

    #[test]
    fn stam_dead_branch_probe() {
        let mut s = RngStream::new(6, 0).rng();
        let mut w = BlockWeights::stam(3, &mut s);
        w.w_l = Tensor::zeros(&[3, 3]);
        let spec = GaussianSpec::diagonal(vec![0.5, -0.2, 0.1], &[0.05, 0.02, 0.08]).unwrap();
        let r = monte_carlo_module_dist(ProbeModule::Stam, &w, &spec, 4, None, 10_000, RngStream::new(1, 2)).unwrap();
        assert_eq!(&r.predicted, &spec);
        assert!(r.mean_within(4.0));
        assert!(r.cov_frob_rel_err < 0.05);
        assert_eq!(r.label(), "assumption-violating");
    }

    #[test]
    fn fixed_mix_self_attention_matches_exact_moments() {
        let mut s = RngStream::new(7, 0).rng();
        let mut draw = |r: usize, c: usize| Tensor::matrix(r, c, s.normals(r * c)).unwrap().scale(0.6);
        for mode in [NormMode::None, NormMode::InstanceCenter] {
            let mut w = BlockWeights::new(draw(3, 3), draw(3, 3), draw(3, 3), draw(3, 3), NormParams::new(mode), false)
                .unwrap();
            w.b_l = vec![0.1, -0.1, 0.2];
            let spec = GaussianSpec::diagonal(vec![0.4, -0.7, 0.2], &[0.5, 1.0, 0.3]).unwrap();
            let mix = MixingRow::new(vec![0.4, 0.1, 0.2, 0.3]).unwrap();
            let r =
                monte_carlo_module_dist(ProbeModule::Ta, &w, &spec, 4, Some(&mix), 40_000, RngStream::new(9, 1)).unwrap();
            assert!(r.exact);
            assert!(r.mean_within(4.0), "{mode}: {:?} vs {:?}", r.predicted.mean(), r.empirical.mean());
            assert!(r.cov_frob_rel_err < 0.03, "{mode}: {}", r.cov_frob_rel_err);
        }
    }

    #[test]
    fn ic_cross_prediction_reduces_to_closed_form() {
        let mut s = RngStream::new(8, 0).rng();
        let mut w = BlockWeights::stam(3, &mut s);
        w.b_l = vec![0.5, 0.0, -0.5];
        let spec = GaussianSpec::diagonal(vec![1.0, 2.0, 3.0], &[1.0, 2.0, 0.5]).unwrap();
        let mix = MixingRow::uniform(4).unwrap();
        // uniform mix over centered rows sums to zero: only the bias moves.
        let p = predict_fixed_mix(ProbeModule::Transformer, &w, &spec, &mix).unwrap();
        assert!(close(p.mean(), &[1.5, 2.0, 2.5], 1e-15));
        assert!(close(p.cov().data(), spec.cov().data(), 1e-15));
    }

    #[test]
    fn layer_norm_counterexample_probe() {
        let d = 4;
        let spec = biased_input_spec(d);
        let ta = BlockWeights::identity(d, NormParams::layer_norm(vec![1.0], vec![0.0]), false);
        let st = BlockWeights::identity(d, NormParams::new(NormMode::InstanceCenter), true);
        let r_ta = monte_carlo_module_dist(ProbeModule::Ta, &ta, &spec, 8, None, 10_000, RngStream::new(3, 0)).unwrap();
        let r_st = monte_carlo_module_dist(ProbeModule::Stam, &st, &spec, 8, None, 10_000, RngStream::new(3, 0)).unwrap();
        let ta_shift = shift_metrics(&spec, &r_ta.empirical).unwrap().mean_shift;
        let st_shift = shift_metrics(&spec, &r_st.empirical).unwrap().mean_shift;
        assert!(ta_shift >= 0.05, "{ta_shift}");
        let se = (r_st.empirical.variances().iter().sum::<f64>() / 10_000.0).sqrt();
        assert!(st_shift <= 4.0 * se, "{st_shift} vs {se}");
    }

    #[test]
    fn centering_failure_construction() {
        let z = centering_failure_case(8, 6);
        let ln = layer_norm(&z, &NormParams::layer_norm(vec![1.0], vec![0.0])).unwrap();
        assert!(max_temporal_mean(&ln) >= 0.1);
        assert!(max_temporal_mean(&instance_center(&z)) <= 1e-12);
        assert!((max_temporal_mean(&z) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn variance_bound_quadratic_scaling() {
        let mut s = RngStream::new(10, 0).rng();
        let w_v = Tensor::matrix(4, 4, s.normals(16)).unwrap();
        let w_l = Tensor::matrix(4, 4, s.normals(16)).unwrap();
        let sigma = Tensor::diag(&[0.1, 0.2, 0.3, 0.4]);
        let base = variance_bound_terms(&w_v, &w_l, &sigma).unwrap();
        for k in [0.5, 2.0, 10.0] {
            let scaled = variance_bound_terms(&w_v.scale(k), &w_l, &sigma).unwrap();
            for (a, b) in scaled.iter().zip(&base) {
                assert!((a.0 / (k * k * b.0) - 1.0).abs() < 1e-9);
                assert!(a.0 <= a.1 * (1.0 + BOUND_RTOL));
            }
        }
    }

    #[test]
    fn stam_bound_equality_case() {
        let w = BlockWeights::identity(3, NormParams::new(NormMode::InstanceCenter), true);
        let cov = stam_closed_form_cov(&w, &Tensor::identity(3)).unwrap();
        assert_eq!(cov.data(), Tensor::identity(3).scale(2.0).data());
        let checks = check_stam_output_bound(&w, &GaussianSpec::standard(3), 0, RngStream::new(0, 0)).unwrap();
        assert!((checks[0].lhs - 2.0).abs() < 1e-9 && checks[0].satisfied);
    }

    #[test]
    fn wq_zero_perturbation() {
        let mut s = RngStream::new(11, 0).rng();
        let w = BlockWeights::init(3, 3, 3, NormParams::new(NormMode::None), false, &mut s);
        let z = Tensor::matrix(4, 3, s.normals(12)).unwrap();
        let c = check_wq_tuning_bound(&w, &Tensor::zeros(&[3, 3]), &z, 1).unwrap();
        assert_eq!((c[0].lhs, c[0].rhs), (0.0, 0.0));
        assert!(c[0].satisfied);
    }

    #[test]
    fn softmax_lipschitz_small() {
        let (ratio, check) = check_softmax_lipschitz(4, 10_000, RngStream::new(1, 1)).unwrap();
        assert!(ratio > 0.0 && check.satisfied);
        assert!(check_softmax_lipschitz(4, 10, RngStream::new(1, 1)).is_err());
    }

    #[test]
    fn report_json_keys() {
        let spec = GaussianSpec::standard(2);
        let w = BlockWeights::identity(2, NormParams::new(NormMode::None), false);
        let mix = MixingRow::uniform(2).unwrap();
        let r = monte_carlo_module_dist(ProbeModule::Transformer, &w, &spec, 2, Some(&mix), 10_000, RngStream::new(4, 0))
            .unwrap();
        let v = r.to_json();
        for key in [
            "predicted_mean",
            "predicted_cov",
            "empirical_mean",
            "empirical_cov",
            "mean_abs_err",
            "cov_frob_rel_err",
            "bound_checks",
            "trials",
            "seed",
            "module",
            "config_hash",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(monte_carlo_module_dist(ProbeModule::Ta, &w, &spec, 2, None, 100, RngStream::new(4, 0)).is_err());
    }
}
