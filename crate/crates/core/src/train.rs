//! Diffusion objective, a toy video denoiser built on the tape, AdamW and the
//! one-shot tuning loop that tracks covariate shift of the temporal blocks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{grad_check, Graph, Var, GRAD_CHECK_STEP};
use crate::error::{Error, Result};
use crate::gaussian::GaussianSpec;
use crate::layers::attention::BlockWeights;
use crate::layers::container::WeightBundle;
use crate::layers::norm::{NormAxis, NormMode, NormParams, DEFAULT_EPSILON};
use crate::probe::{closed_form_shift, ShiftMetrics};
use crate::report::{config_hash, num, num_vec};
use crate::rng::{RngStream, Sampler};
use crate::spectral::{spectral_norm, PowerMode};
use crate::tensor::{l2_norm, Grid, Tensor};

/// Linear `β_t` schedule with `α_t = 1 − β_t` and `ᾱ_t = Πα_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_TIMESTEPS: usize = 100;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("invalid beta range [{beta_start}, {beta_end}]")));
        }
        let alphas: Vec<f64> = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                1.0 - (beta_start + frac * (beta_end - beta_start))
            })
            .collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { alphas, alpha_bars })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, BETA_START, BETA_END).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// `α_t` for `1 ≤ t ≤ T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas[t - 1])
    }

    /// `ᾱ_t` for `1 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `√ᾱ·x0 + √(1−ᾱ)·noise` for an explicit `ᾱ`.
pub fn diffuse_with(x0: &Tensor, alpha_bar: f64, noise: &Tensor) -> Result<Tensor> {
    x0.scale(alpha_bar.sqrt()).add(&noise.scale((1.0 - alpha_bar).sqrt()))
}

pub fn forward_diffuse(x0: &Tensor, t: usize, sched: &DiffusionSchedule, noise: &Tensor) -> Result<Tensor> {
    diffuse_with(x0, sched.alpha_bar(t)?, noise)
}

/// Sinusoidal features `[sin(t·f_k), cos(t·f_k)]`, `f_k = 10000^(−2k/dim)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = 10000f64.powf(-(2.0 * k as f64) / dim as f64);
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Static,
    Drift,
    Oscillate,
}

impl Motion {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "static" => Some(Motion::Static),
            "drift" => Some(Motion::Drift),
            "oscillate" => Some(Motion::Oscillate),
            _ => None,
        }
    }
}

/// One training clip: `[n, l, c]` latents and `m` condition tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub frames: Tensor,
    pub condition: Tensor,
    pub grid: Grid,
    /// Per-frame offset used by `drift`/`oscillate`.
    pub delta: Vec<f64>,
}

impl SyntheticClip {
    pub fn n(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, i: usize) -> Tensor {
        let (l, c) = (self.tokens(), self.channels());
        Tensor::from_parts_unchecked(vec![l, c], self.frames.data()[i * l * c..(i + 1) * l * c].to_vec())
    }

    /// Frames stacked frame-major into `(n·l)×c`.
    pub fn stacked(&self) -> Tensor {
        Tensor::from_parts_unchecked(vec![self.n() * self.tokens(), self.channels()], self.frames.data().to_vec())
    }
}

/// Values are rounded to multiples of `2⁻²⁴` so frame differences are exact.
const CLIP_QUANTUM: f64 = 1.0 / (1u64 << 24) as f64;

fn quantize(x: f64) -> f64 {
    (x / CLIP_QUANTUM).round() * CLIP_QUANTUM
}

pub const CONDITION_TOKENS: usize = 4;

/// Base Gaussian frame with per-channel means `±U[0.1, 1]` and variances
/// `U[0.01, 0.1]`, plus deterministic per-frame motion.
pub fn build_synthetic_clip(n: usize, l: usize, c: usize, cond_dim: usize, motion: Motion, rng: &mut Sampler) -> Result<SyntheticClip> {
    if n == 0 || c == 0 || cond_dim == 0 {
        return Err(Error::Config("clip dimensions must be positive".into()));
    }
    let grid = Grid::square(l)?;
    let means: Vec<f64> = (0..c).map(|_| rng.sign() * rng.uniform(0.1, 1.0)).collect();
    let vars: Vec<f64> = (0..c).map(|_| rng.uniform(0.01, 0.1)).collect();
    let base: Vec<f64> = (0..l * c)
        .map(|k| quantize(means[k % c] + vars[k % c].sqrt() * rng.normal()))
        .collect();
    let delta: Vec<f64> = (0..c).map(|_| quantize(rng.uniform(-0.05, 0.05))).collect();
    let mut data = Vec::with_capacity(n * l * c);
    for i in 0..n {
        let shift = match motion {
            Motion::Static => 0.0,
            Motion::Drift => i as f64,
            Motion::Oscillate => quantize((2.0 * std::f64::consts::PI * i as f64 / n as f64).sin()),
        };
        for (k, b) in base.iter().enumerate() {
            data.push(b + shift * delta[k % c]);
        }
    }
    let condition = Tensor::matrix(CONDITION_TOKENS, cond_dim, rng.normals(CONDITION_TOKENS * cond_dim))?;
    Ok(SyntheticClip {
        frames: Tensor::new(vec![n, l, c], data)?,
        condition,
        grid,
        delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    Ta,
    Stam,
}

impl TemporalMode {
    pub fn name(self) -> &'static str {
        match self {
            TemporalMode::Ta => "ta",
            TemporalMode::Stam => "stam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ta" => Some(TemporalMode::Ta),
            "stam" => Some(TemporalMode::Stam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    TemporalBeforeCross,
    CrossBeforeTemporal,
}

impl BlockOrder {
    pub fn name(self) -> &'static str {
        match self {
            BlockOrder::TemporalBeforeCross => "temporal_before_cross",
            BlockOrder::CrossBeforeTemporal => "cross_before_temporal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "temporal_before_cross" => Some(BlockOrder::TemporalBeforeCross),
            "cross_before_temporal" => Some(BlockOrder::CrossBeforeTemporal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    pub l: usize,
    /// Latent channels.
    pub channels: usize,
    /// Model width.
    pub d: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub depth: usize,
    pub r: usize,
    pub mode: TemporalMode,
    pub block_order: BlockOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 4,
            l: 16,
            channels: 4,
            d: 8,
            cond_dim: 8,
            time_dim: 8,
            depth: 1,
            r: 2,
            mode: TemporalMode::Stam,
            block_order: BlockOrder::TemporalBeforeCross,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<Grid> {
        for (name, v) in [
            ("n", self.n),
            ("l", self.l),
            ("channels", self.channels),
            ("d", self.d),
            ("cond_dim", self.cond_dim),
            ("depth", self.depth),
            ("r", self.r),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        let grid = Grid::square(self.l)?;
        grid.check_ratio(self.r)?;
        Ok(grid)
    }

    fn context_dim(&self) -> usize {
        self.cond_dim + self.time_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Ffam,
    Temporal,
    Cross,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Ffam => "ffam",
            Kind::Temporal => "temporal",
            Kind::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Persistent power-iteration vectors and the `σ` cached for the current step.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCache {
    pub state_v: Vec<f64>,
    pub state_l: Vec<f64>,
    pub sigma_v: f64,
    pub sigma_l: f64,
}

/// Which parameters receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunableSet {
    /// Bias `b_L` of the temporal blocks.
    pub temporal_bias: bool,
}

impl Default for TunableSet {
    fn default() -> Self {
        Self { temporal_bias: true }
    }
}

/// `in_proj → [FFAM → temporal → cross]×depth → out_proj` on frame-major
/// `(n·l)×c` latents. Temporal and cross blocks swap under `cross_before_temporal`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub config: ModelConfig,
    pub grid: Grid,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    pub spectral: Vec<SpectralCache>,
}

/// Inherited (frozen, "pretrained") weights use this scale times `1/√fan_in`.
const INHERITED_GAIN: f64 = 1.0;

impl ToyDenoiser {
    pub fn new(config: ModelConfig, tunable: TunableSet, rng: &mut Sampler) -> Result<Self> {
        let grid = config.validate()?;
        let mut model = Self {
            grid,
            params: Vec::new(),
            index: HashMap::new(),
            spectral: Vec::new(),
            config: config.clone(),
        };
        let (c, d, dc) = (config.channels, config.d, config.context_dim());
        let dense = |rng: &mut Sampler, r: usize, k: usize| {
            let s = INHERITED_GAIN / (r as f64).sqrt();
            Tensor::from_parts_unchecked(vec![r, k], (0..r * k).map(|_| s * rng.normal()).collect())
        };
        let w = dense(rng, c, d);
        model.add("in_proj.w", w, false);
        model.add("in_proj.b", Tensor::zeros(&[1, d]), false);
        for b in 0..config.depth {
            for kind in [Kind::Ffam, Kind::Temporal, Kind::Cross] {
                let p = |s: &str| format!("blocks.{b}.{}.{s}", kind.name());
                let kv_dim = if kind == Kind::Cross { dc } else { d };
                let temporal = kind == Kind::Temporal;
                let mats = if temporal {
                    let fresh = BlockWeights::init(d, d, d, NormParams::new(NormMode::None), false, rng);
                    [fresh.w_q, fresh.w_k, fresh.w_v, fresh.w_l]
                } else {
                    [dense(rng, d, d), dense(rng, kv_dim, d), dense(rng, kv_dim, d), dense(rng, d, d)]
                };
                let [wq, wk, wv, wl] = mats;
                model.add(&p("w_q"), wq, true);
                model.add(&p("w_k"), wk, temporal);
                model.add(&p("w_v"), wv, temporal);
                model.add(&p("w_l"), wl, temporal);
                model.add(&p("b_l"), Tensor::zeros(&[1, d]), temporal && tunable.temporal_bias);
                let affine_trainable = temporal && config.mode == TemporalMode::Ta;
                model.add(&p("alpha"), Tensor::filled(&[1, d], 1.0), affine_trainable);
                model.add(&p("beta"), Tensor::zeros(&[1, d]), affine_trainable);
            }
            model.spectral.push(SpectralCache {
                state_v: vec![1.0; d],
                state_l: vec![1.0; d],
                sigma_v: 1.0,
                sigma_l: 1.0,
            });
        }
        let w = dense(rng, d, c);
        model.add("out_proj.w", w, false);
        model.add("out_proj.b", Tensor::zeros(&[1, c]), false);
        if config.mode == TemporalMode::Stam {
            model.refresh_spectral(PowerMode::Converged)?;
        }
        Ok(model)
    }

    fn add(&mut self, name: &str, value: Tensor, trainable: bool) {
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        self.params[i].trainable = trainable;
        Ok(())
    }

    /// Adds `scale·N(0, 1)` noise to every parameter and refreshes `σ`.
    pub fn perturb(&mut self, scale: f64, rng: &mut Sampler) {
        for p in &mut self.params {
            let noise = rng.normals(p.value.len());
            for (v, e) in p.value.data_mut().iter_mut().zip(noise) {
                *v += scale * e;
            }
        }
        let _ = self.refresh_spectral(PowerMode::Converged);
    }

    fn idx(&self, name: &str) -> usize {
        self.index[name]
    }

    /// Updates the cached `σ` of every temporal block from its persistent
    /// power-iteration vectors (one step in training, converged otherwise).
    pub fn refresh_spectral(&mut self, mode: PowerMode) -> Result<()> {
        self.update_sigma(mode, true)
    }

    fn update_sigma(&mut self, mode: PowerMode, persist: bool) -> Result<()> {
        if self.config.mode != TemporalMode::Stam {
            return Ok(());
        }
        for b in 0..self.config.depth {
            let wv = &self.params[self.idx(&format!("blocks.{b}.temporal.w_v"))].value;
            let wl = &self.params[self.idx(&format!("blocks.{b}.temporal.w_l"))].value;
            let cache = &mut self.spectral[b];
            let (sv, v) = sigma_or_unit(wv, mode, &cache.state_v)?;
            let (sl, l) = sigma_or_unit(wl, mode, &cache.state_l)?;
            cache.sigma_v = sv;
            cache.sigma_l = sl;
            if persist {
                cache.state_v = v;
                cache.state_l = l;
            }
        }
        Ok(())
    }

    /// Temporal block `b` as [`BlockWeights`], for probes and checkpoints.
    pub fn temporal_block(&self, b: usize) -> Result<BlockWeights> {
        let p = |s: &str| self.param(&format!("blocks.{b}.temporal.{s}")).cloned().expect("temporal params exist");
        let (norm, spectral) = match self.config.mode {
            TemporalMode::Ta => (NormParams::layer_norm(p("alpha").into_data(), p("beta").into_data()), false),
            TemporalMode::Stam => (NormParams::new(NormMode::InstanceCenter), true),
        };
        let mut w = BlockWeights::new(p("w_q"), p("w_k"), p("w_v"), p("w_l"), norm, spectral)?;
        w.b_l = p("b_l").into_data();
        w.sn_state_v = self.spectral[b].state_v.clone();
        w.sn_state_l = self.spectral[b].state_l.clone();
        Ok(w)
    }

    /// Graph leaves for every parameter, in [`ToyDenoiser::params`] order.
    pub fn leaves(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }

    /// Condition tokens with the timestep embedding appended to every row.
    pub fn context(&self, condition: &Tensor, t: usize) -> Result<Tensor> {
        if condition.cols() != self.config.cond_dim {
            return Err(Error::Dimension {
                op: "condition",
                left: vec![self.config.cond_dim],
                right: condition.shape().to_vec(),
            });
        }
        let emb = timestep_embedding(t, self.config.time_dim);
        let rows: Vec<Vec<f64>> = (0..condition.rows())
            .map(|i| condition.row_slice(i).iter().chain(&emb).copied().collect())
            .collect();
        Tensor::from_rows(&rows)
    }

    /// Predicted noise for frame-major latents `x_t` given the context tokens.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x_t: &Tensor, ctx: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        if x_t.shape() != [cfg.n * cfg.l, cfg.channels] {
            return Err(Error::Dimension {
                op: "denoiser input",
                left: vec![cfg.n * cfg.l, cfg.channels],
                right: x_t.shape().to_vec(),
            });
        }
        let pv = |name: &str| vars[self.index[name]];
        let x = g.leaf(x_t.clone())?;
        let c = g.leaf(ctx.clone())?;
        let h = g.matmul(x, pv("in_proj.w"))?;
        let mut h = g.add_row(h, pv("in_proj.b"))?;
        for b in 0..cfg.depth {
            let p = |kind: Kind, s: &str| pv(&format!("blocks.{b}.{}.{s}", kind.name()));
            h = self.ffam_block(g, h, &|s| p(Kind::Ffam, s))?;
            let temporal = |g: &mut Graph, h| self.temporal_block_fwd(g, h, b, &|s| p(Kind::Temporal, s));
            let cross = |g: &mut Graph, h| cross_block(g, h, c, &|s| p(Kind::Cross, s));
            h = match cfg.block_order {
                BlockOrder::TemporalBeforeCross => {
                    let h = temporal(g, h)?;
                    cross(g, h)?
                }
                BlockOrder::CrossBeforeTemporal => {
                    let h = cross(g, h)?;
                    temporal(g, h)?
                }
            };
        }
        let y = g.matmul(h, pv("out_proj.w"))?;
        g.add_row(y, pv("out_proj.b"))
    }

    fn ffam_block(&self, g: &mut Graph, h: Var, p: &dyn Fn(&str) -> Var) -> Result<Var> {
        let (n, l, r) = (self.config.n, self.config.l, self.config.r);
        let temp = 1.0 / (self.config.d as f64).sqrt();
        let hn = g.layer_norm(h, p("alpha"), p("beta"), DEFAULT_EPSILON, NormAxis::Row)?;
        let q = g.matmul(hn, p("w_q"))?;
        let k = g.matmul(hn, p("w_k"))?;
        let v = g.matmul(hn, p("w_v"))?;
        let frame = |g: &mut Graph, src: Var, i: usize| g.gather_rows(src, &(i * l..(i + 1) * l).collect::<Vec<_>>());
        let mut kf = Vec::with_capacity(n);
        let mut vf = Vec::with_capacity(n);
        let mut kc = Vec::with_capacity(n);
        let mut vc = Vec::with_capacity(n);
        for i in 0..n {
            let (ki, vi) = (frame(g, k, i)?, frame(g, v, i)?);
            // pooling commutes with the right projection: ds(h)W = ds(hW).
            kc.push(g.downsample(ki, self.grid, r)?);
            vc.push(g.downsample(vi, self.grid, r)?);
            kf.push(ki);
            vf.push(vi);
        }
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let qi = frame(g, q, i)?;
            let mut kparts = vec![kf[i]];
            let mut vparts = vec![vf[i]];
            for j in (0..n).filter(|&j| j != i) {
                kparts.push(kc[j]);
                vparts.push(vc[j]);
            }
            let kctx = g.concat_rows(&kparts)?;
            let vctx = g.concat_rows(&vparts)?;
            let s = g.matmul_transb(qi, kctx)?;
            let m = g.softmax_rows(s, temp)?;
            outs.push(g.matmul(m, vctx)?);
        }
        let o = g.concat_rows(&outs)?;
        residual_linear(g, h, o, p("w_l"), p("b_l"))
    }

    fn temporal_block_fwd(&self, g: &mut Graph, h: Var, b: usize, p: &dyn Fn(&str) -> Var) -> Result<Var> {
        let (n, l) = (self.config.n, self.config.l);
        let temp = 1.0 / (self.config.d as f64).sqrt();
        let (wv, wl) = match self.config.mode {
            TemporalMode::Ta => (p("w_v"), p("w_l")),
            TemporalMode::Stam => {
                let cache = &self.spectral[b];
                (g.scale(p("w_v"), 1.0 / cache.sigma_v)?, g.scale(p("w_l"), 1.0 / cache.sigma_l)?)
            }
        };
        let mut outs = Vec::with_capacity(l);
        for u in 0..l {
            let rows: Vec<usize> = (0..n).map(|i| i * l + u).collect();
            let s = g.gather_rows(h, &rows)?;
            let sn = match self.config.mode {
                TemporalMode::Ta => g.layer_norm(s, p("alpha"), p("beta"), DEFAULT_EPSILON, NormAxis::Global)?,
                TemporalMode::Stam => g.instance_center(s)?,
            };
            let q = g.matmul(sn, p("w_q"))?;
            let k = g.matmul(sn, p("w_k"))?;
            let v = g.matmul(sn, wv)?;
            let sc = g.matmul_transb(q, k)?;
            let m = g.softmax_rows(sc, temp)?;
            outs.push(g.matmul(m, v)?);
        }
        // unit-major back to frame-major
        let stacked = g.concat_rows(&outs)?;
        let order: Vec<usize> = (0..n * l).map(|row| (row % l) * n + row / l).collect();
        let o = g.gather_rows(stacked, &order)?;
        residual_linear(g, h, o, wl, p("b_l"))
    }

    /// Noise prediction without recording gradients.
    pub fn predict(&self, x_t: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.leaves(&mut g)?;
        let out = self.forward(&mut g, &vars, x_t, ctx)?;
        Ok(g.value(out).clone())
    }

    pub fn to_bundle(&self) -> Result<WeightBundle> {
        let mut bundle = WeightBundle::new();
        for p in &self.params {
            bundle.push(p.name.clone(), p.value.clone())?;
        }
        for (b, s) in self.spectral.iter().enumerate() {
            bundle.push_vector(format!("blocks.{b}.temporal.sn_state_v"), &s.state_v)?;
            bundle.push_vector(format!("blocks.{b}.temporal.sn_state_l"), &s.state_l)?;
        }
        Ok(bundle)
    }

    /// Restores parameters and power-iteration state saved by
    /// [`ToyDenoiser::to_bundle`] into a model of the same configuration.
    pub fn load_bundle(&mut self, bundle: &WeightBundle) -> Result<()> {
        for p in &mut self.params {
            let t = bundle.require(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!("record {} has shape {:?}", p.name, t.shape())));
            }
            p.value = t.clone();
        }
        for b in 0..self.spectral.len() {
            self.spectral[b].state_v = bundle.require(&format!("blocks.{b}.temporal.sn_state_v"))?.data().to_vec();
            self.spectral[b].state_l = bundle.require(&format!("blocks.{b}.temporal.sn_state_l"))?.data().to_vec();
        }
        self.update_sigma(PowerMode::Converged, false)
    }
}

fn sigma_or_unit(w: &Tensor, mode: PowerMode, state: &[f64]) -> Result<(f64, Vec<f64>)> {
    if w.max_abs() == 0.0 {
        return Ok((1.0, state.to_vec()));
    }
    spectral_norm(w, mode, Some(state))
}

fn residual_linear(g: &mut Graph, h: Var, o: Var, wl: Var, bl: Var) -> Result<Var> {
    let y = g.matmul(o, wl)?;
    let y = g.add_row(y, bl)?;
    g.add(h, y)
}

fn cross_block(g: &mut Graph, h: Var, ctx: Var, p: &dyn Fn(&str) -> Var) -> Result<Var> {
    let d = g.value(p("w_q")).cols();
    let hn = g.layer_norm(h, p("alpha"), p("beta"), DEFAULT_EPSILON, NormAxis::Row)?;
    let q = g.matmul(hn, p("w_q"))?;
    let k = g.matmul(ctx, p("w_k"))?;
    let v = g.matmul(ctx, p("w_v"))?;
    let s = g.matmul_transb(q, k)?;
    let m = g.softmax_rows(s, 1.0 / (d as f64).sqrt())?;
    let o = g.matmul(m, v)?;
    residual_linear(g, h, o, p("w_l"), p("b_l"))
}

/// Anything that predicts noise from `(x_t, t, condition)`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: usize, condition: &Tensor) -> Result<Tensor>;
}

impl NoisePredictor for ToyDenoiser {
    fn predict_noise(&self, x_t: &Tensor, t: usize, condition: &Tensor) -> Result<Tensor> {
        self.predict(x_t, &self.context(condition, t)?)
    }
}

/// One draw of the diffusion objective: `t ~ U{1..T}`, `ε ~ N(0, I)`,
/// `mean((ε − ε_θ(x_t, t, condition))²)`.
pub fn diffusion_loss(model: &dyn NoisePredictor, clip: &SyntheticClip, sched: &DiffusionSchedule, rng: &mut Sampler) -> Result<f64> {
    let x0 = clip.stacked();
    let t = rng.index(1, sched.steps());
    let noise = Tensor::matrix(x0.rows(), x0.cols(), rng.normals(x0.len()))?;
    let x_t = forward_diffuse(&x0, t, sched, &noise)?;
    let pred = model.predict_noise(&x_t, t, &clip.condition)?;
    let diff = pred.sub(&noise)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub hyper: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(hyper: AdamWConfig, shapes: &[&[usize]]) -> Self {
        Self {
            hyper,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Decoupled update: `p ← p(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads[k];
            if g.shape() != p.shape() || self.m[k].shape() != p.shape() {
                return Err(Error::Dimension {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *pv *= 1.0 - h.lr * h.weight_decay;
                *pv -= h.lr * mhat / (vhat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub adamw: AdamWConfig,
    /// Timestep/noise draws averaged per step.
    pub batch: usize,
    pub probe_every: usize,
    pub motion: Motion,
    pub tunable: TunableSet,
    pub timesteps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 500,
            adamw: AdamWConfig::default(),
            batch: 8,
            probe_every: 50,
            motion: Motion::Drift,
            tunable: TunableSet::default(),
            timesteps: DEFAULT_TIMESTEPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftPoint {
    pub step: usize,
    pub block_index: usize,
    pub metrics: ShiftMetrics,
    /// `‖b_L‖₂` of the block at this step.
    pub bias_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub shift_trajectory: Vec<ShiftPoint>,
    /// Largest relative error of tape gradients against central differences
    /// on a depth-1 instance of the same configuration.
    pub grad_check: f64,
    pub config: TrainConfig,
    pub seed: u64,
}

impl TrainReport {
    pub fn config_json(&self) -> Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    pub fn to_json(&self) -> Value {
        let config = self.config_json();
        json!({
            "loss_curve": num_vec(&self.loss_curve),
            "shift_trajectory": self.shift_trajectory.iter().map(|p| json!({
                "step": p.step,
                "block_index": p.block_index,
                "mean_shift": num(p.metrics.mean_shift),
                "cov_shift_frob": num(p.metrics.cov_shift_frob),
                "cov_shift_spec": num(p.metrics.cov_shift_spec),
                "bias_norm": num(p.bias_norm),
            })).collect::<Vec<_>>(),
            "grad_check": num(self.grad_check),
            "config_hash": config_hash(&json!({"config": config.clone(), "seed": self.seed})),
            "config": config,
            "seed": self.seed,
        })
    }

    /// Median of the loss over `[start, end)`.
    pub fn median_loss(&self, start: usize, end: usize) -> Option<f64> {
        let mut w: Vec<f64> = self.loss_curve.get(start..end.min(self.loss_curve.len()))?.to_vec();
        if w.is_empty() {
            return None;
        }
        w.sort_by(f64::total_cmp);
        let k = w.len();
        Some(if k % 2 == 1 { w[k / 2] } else { 0.5 * (w[k / 2 - 1] + w[k / 2]) })
    }
}

/// Held-out Gaussian input used for closed-form shift probes of `d`-wide blocks.
pub fn probe_spec(d: usize, stream: RngStream) -> GaussianSpec {
    let mut rng = stream.rng();
    let mean: Vec<f64> = (0..d).map(|_| rng.sign() * rng.uniform(0.1, 1.0)).collect();
    let vars: Vec<f64> = (0..d).map(|_| rng.uniform(0.01, 0.1)).collect();
    GaussianSpec::diagonal(mean, &vars).expect("positive variances")
}

/// Everything a run needs besides its configuration.
pub struct TrainSetup {
    pub model: ToyDenoiser,
    pub clip: SyntheticClip,
    pub schedule: DiffusionSchedule,
    pub probe: GaussianSpec,
}

impl TrainSetup {
    pub fn new(config: &TrainConfig, seed: u64) -> Result<Self> {
        let m = &config.model;
        let mut init = RngStream::named(seed, "init").rng();
        let model = ToyDenoiser::new(m.clone(), config.tunable, &mut init)?;
        let mut clip_rng = RngStream::named(seed, "clip").rng();
        let clip = build_synthetic_clip(m.n, m.l, m.channels, m.cond_dim, config.motion, &mut clip_rng)?;
        Ok(Self {
            model,
            clip,
            schedule: DiffusionSchedule::linear(config.timesteps, BETA_START, BETA_END)?,
            probe: probe_spec(m.d, RngStream::named(seed, "probe")),
        })
    }
}

/// Loss and gradients of the trainable parameters for one batch of
/// `(t, ε)` draws.
pub fn loss_and_grads(
    model: &ToyDenoiser,
    clip: &SyntheticClip,
    sched: &DiffusionSchedule,
    draws: &[(usize, Tensor)],
) -> Result<(f64, Vec<Tensor>)> {
    let x0 = clip.stacked();
    let mut g = Graph::new();
    let vars = model.leaves(&mut g)?;
    let mut total: Option<Var> = None;
    for (t, noise) in draws {
        let x_t = forward_diffuse(&x0, *t, sched, noise)?;
        let ctx = model.context(&clip.condition, *t)?;
        let out = model.forward(&mut g, &vars, &x_t, &ctx)?;
        let l = g.mse_loss(out, noise)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Config("batch must be positive".into()))?;
    let loss_var = g.scale(total, 1.0 / draws.len() as f64)?;
    let loss = g.value(loss_var).data()[0];
    let grads = g.backward(loss_var)?;
    let out = model
        .params()
        .iter()
        .zip(&vars)
        .filter(|(p, _)| p.trainable)
        .map(|(p, v)| grads.get_or_zeros(*v, &p.value))
        .collect();
    Ok((loss, out))
}

fn draw_batch(rng: &mut Sampler, batch: usize, sched: &DiffusionSchedule, rows: usize, cols: usize) -> Result<Vec<(usize, Tensor)>> {
    (0..batch)
        .map(|_| {
            let t = rng.index(1, sched.steps());
            Ok((t, Tensor::matrix(rows, cols, rng.normals(rows * cols))?))
        })
        .collect()
}

/// Closed-form shift metrics of every temporal block on the probe input.
pub fn temporal_shifts(model: &ToyDenoiser, probe: &GaussianSpec, step: usize) -> Result<Vec<ShiftPoint>> {
    (0..model.config.depth)
        .map(|b| {
            let w = model.temporal_block(b)?;
            Ok(ShiftPoint {
                step,
                block_index: b,
                metrics: closed_form_shift(&w, probe)?,
                bias_norm: l2_norm(&w.b_l),
            })
        })
        .collect()
}

/// Max relative gradient error over every parameter of a small depth-1 model
/// sharing the temporal mode, block order and ratio of `config`.
pub fn model_grad_check(config: &ModelConfig, seed: u64) -> Result<f64> {
    let small = ModelConfig {
        n: 2,
        l: 4,
        channels: 2,
        d: 4,
        cond_dim: 2,
        time_dim: 2,
        depth: 1,
        r: if config.r > 1 { 2 } else { 1 },
        ..config.clone()
    };
    let mut rng = RngStream::named(seed, "grad_check").rng();
    let mut model = ToyDenoiser::new(small.clone(), TunableSet::default(), &mut rng)?;
    model.perturb(0.3, &mut rng);
    model.refresh_spectral(PowerMode::Converged)?;
    let clip = build_synthetic_clip(small.n, small.l, small.channels, small.cond_dim, Motion::Drift, &mut rng)?;
    let x = clip.stacked();
    let ctx = model.context(&clip.condition, 7)?;
    let target = Tensor::matrix(x.rows(), x.cols(), rng.normals(x.len()))?;
    let inputs: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    grad_check(&inputs, GRAD_CHECK_STEP, |g, vars| {
        let out = model.forward(g, vars, &x, &ctx)?;
        g.mse_loss(out, &target)
    })
}

/// One-shot tuning: `steps` AdamW updates of the trainable parameters on a
/// single clip, probing temporal-block shift every `probe_every` steps.
pub fn train_oneshot(config: &TrainConfig, seed: u64) -> Result<(TrainReport, ToyDenoiser)> {
    if config.batch == 0 || config.probe_every == 0 {
        return Err(Error::Config("batch and probe_every must be positive".into()));
    }
    let TrainSetup {
        mut model,
        clip,
        schedule,
        probe,
    } = TrainSetup::new(config, seed)?;
    let grad_check = model_grad_check(&config.model, seed)?;
    let shapes: Vec<Vec<usize>> = model
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.value.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = AdamW::new(config.adamw, &shape_refs);
    let mut rng = RngStream::named(seed, "train").rng();
    let (rows, cols) = (config.model.n * config.model.l, config.model.channels);
    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut trajectory = temporal_shifts(&model, &probe, 0)?;
    for step in 0..config.steps {
        model.refresh_spectral(PowerMode::SingleStep)?;
        let draws = draw_batch(&mut rng, config.batch, &schedule, rows, cols)?;
        let (loss, grads) = loss_and_grads(&model, &clip, &schedule, &draws)?;
        if !loss.is_finite() {
            let norms: Vec<String> = model
                .params()
                .iter()
                .map(|p| format!("{}={:.3e}", p.name, crate::tensor::frobenius_norm(&p.value)))
                .collect();
            return Err(Error::NonFiniteLoss {
                step,
                detail: norms.join(", "),
            });
        }
        let mut params: Vec<&mut Tensor> = model
            .params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| &mut p.value)
            .collect();
        opt.step(&mut params, &grads)?;
        loss_curve.push(loss);
        if (step + 1) % config.probe_every == 0 {
            trajectory.extend(temporal_shifts(&model, &probe, step + 1)?);
        }
    }
    Ok((
        TrainReport {
            loss_curve,
            shift_trajectory: trajectory,
            grad_check,
            config: config.clone(),
            seed,
        },
        model,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants() {
        let s = DiffusionSchedule::default_linear();
        assert_eq!(s.steps(), 100);
        assert!((s.alpha(1).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((s.alpha(100).unwrap() - (1.0 - 2e-2)).abs() < 1e-15);
        let mut prod = 1.0;
        for t in 1..=100 {
            prod *= s.alpha(t).unwrap();
            assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-12);
            if t > 1 {
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            }
        }
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(101).is_err());
    }

    #[test]
    fn diffuse_examples() {
        let x0 = Tensor::filled(&[1, 1], 4.0);
        let noise = Tensor::filled(&[1, 1], 2.0);
        assert_eq!(diffuse_with(&x0, 1.0, &noise).unwrap(), x0);
        assert_eq!(diffuse_with(&x0, 0.0, &noise).unwrap(), noise);
        let v = diffuse_with(&x0, 0.25, &noise).unwrap().data()[0];
        assert!((v - (2.0 + 0.75f64.sqrt() * 2.0)).abs() < 1e-15);
        let s = DiffusionSchedule::default_linear();
        assert!(forward_diffuse(&x0, 0, &s, &noise).is_err());
    }

    #[test]
    fn clip_motion() {
        let mut rng = RngStream::new(1, 0).rng();
        let c = build_synthetic_clip(3, 4, 2, 3, Motion::Static, &mut rng).unwrap();
        assert_eq!(c.frame(0), c.frame(2));
        let c = build_synthetic_clip(4, 4, 2, 3, Motion::Drift, &mut rng).unwrap();
        for i in 0..3 {
            let diff = c.frame(i + 1).sub(&c.frame(i)).unwrap();
            for row in diff.to_rows() {
                assert_eq!(row, c.delta);
            }
        }
        assert!(build_synthetic_clip(2, 5, 2, 3, Motion::Static, &mut rng).is_err());
    }

    #[test]
    fn clip_statistics_in_range() {
        let mut rng = RngStream::new(2, 0).rng();
        let c = build_synthetic_clip(1, 10_000, 3, 2, Motion::Static, &mut rng).unwrap();
        let stats = crate::gaussian::estimate_stats(&c.frame(0)).unwrap();
        for (m, v) in stats.mean().iter().zip(stats.variances()) {
            assert!((0.09..=1.01).contains(&m.abs()), "{m}");
            assert!((0.009..=0.11).contains(&v), "{v}");
        }
    }

    struct Oracle {
        x0: Tensor,
        sched: DiffusionSchedule,
    }

    impl NoisePredictor for Oracle {
        fn predict_noise(&self, x_t: &Tensor, t: usize, _c: &Tensor) -> Result<Tensor> {
            let ab = self.sched.alpha_bar(t)?;
            Ok(x_t.sub(&self.x0.scale(ab.sqrt()))?.scale(1.0 / (1.0 - ab).sqrt()))
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict_noise(&self, x_t: &Tensor, _t: usize, _c: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(x_t.shape()))
        }
    }

    #[test]
    fn loss_oracles() {
        let mut rng = RngStream::new(3, 0).rng();
        let clip = build_synthetic_clip(2, 4, 2, 2, Motion::Drift, &mut rng).unwrap();
        let sched = DiffusionSchedule::default_linear();
        let oracle = Oracle {
            x0: clip.stacked(),
            sched: sched.clone(),
        };
        assert!(diffusion_loss(&oracle, &clip, &sched, &mut rng).unwrap() < 1e-20);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| diffusion_loss(&Zero, &clip, &sched, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((mean - 1.0).abs() <= 3.0 * (var / draws.len() as f64).sqrt());
        let mut a = RngStream::new(9, 9).rng();
        let mut b = RngStream::new(9, 9).rng();
        assert_eq!(
            diffusion_loss(&Zero, &clip, &sched, &mut a).unwrap(),
            diffusion_loss(&Zero, &clip, &sched, &mut b).unwrap()
        );
    }

    #[test]
    fn adamw_examples() {
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let mut opt = AdamW::new(hyper, &[&[1, 2]]);
        opt.step(&mut [&mut p], &[Tensor::zeros(&[1, 2])]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);

        let mut p = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let g = Tensor::matrix(1, 2, vec![0.5, -4.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&[1, 2]]);
        opt.step(&mut [&mut p], &[g.clone()]).unwrap();
        let h = AdamWConfig::default();
        for (i, p0) in [1.0f64, -2.0].iter().enumerate() {
            let gi = g.data()[i];
            // bias-corrected moments after one step are exactly g and g².
            let expected = p0 * (1.0 - h.lr * h.weight_decay) - h.lr * gi / (gi.abs() + h.eps);
            assert!((p.data()[i] - expected).abs() < 1e-15);
        }

        let mut p = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&[1, 1]]);
        opt.step(&mut [&mut p], &[Tensor::zeros(&[1, 1])]).unwrap();
        assert_eq!(p.data()[0], 3.0 * (1.0 - 3e-5 * 1e-2));
    }

    #[test]
    fn gradients_of_the_denoiser() {
        for mode in [TemporalMode::Ta, TemporalMode::Stam] {
            for order in [BlockOrder::TemporalBeforeCross, BlockOrder::CrossBeforeTemporal] {
                let cfg = ModelConfig {
                    mode,
                    block_order: order,
                    ..ModelConfig::default()
                };
                let err = model_grad_check(&cfg, 5).unwrap();
                assert!(err <= 1e-5, "{mode:?} {order:?}: {err}");
            }
        }
    }

    fn short(mode: TemporalMode, steps: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                mode,
                ..ModelConfig::default()
            },
            steps,
            probe_every: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_reports_initial_state() {
        let (r, _) = train_oneshot(&short(TemporalMode::Stam, 0), 42).unwrap();
        assert!(r.loss_curve.is_empty());
        assert_eq!(r.shift_trajectory.len(), 1);
        assert_eq!(r.shift_trajectory[0].metrics.mean_shift, 0.0);
    }

    #[test]
    fn stam_mean_shift_tracks_bias() {
        let (r, model) = train_oneshot(&short(TemporalMode::Stam, 10), 7).unwrap();
        let last = r.shift_trajectory.last().unwrap();
        assert_eq!(last.step, 10);
        let b = model.temporal_block(0).unwrap().b_l;
        assert!(l2_norm(&b) > 0.0);
        assert_eq!(last.metrics.mean_shift, l2_norm(&b));

        let mut cfg = short(TemporalMode::Stam, 10);
        cfg.tunable.temporal_bias = false;
        let (r, _) = train_oneshot(&cfg, 7).unwrap();
        assert!(r.shift_trajectory.iter().all(|p| p.metrics.mean_shift == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = short(TemporalMode::Ta, 6);
        let (a, ma) = train_oneshot(&cfg, 11).unwrap();
        let (b, mb) = train_oneshot(&cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().to_string(), b.to_json().to_string());
        assert_eq!(ma, mb);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, model) = train_oneshot(&short(TemporalMode::Stam, 3), 1).unwrap();
        let bytes = model.to_bundle().unwrap().to_bytes();
        let mut fresh = ToyDenoiser::new(model.config.clone(), TunableSet::default(), &mut RngStream::new(0, 0).rng()).unwrap();
        fresh.load_bundle(&WeightBundle::from_bytes(&bytes).unwrap()).unwrap();
        for (a, b) in fresh.params().iter().zip(model.params()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(
            fresh.spectral.iter().map(|s| &s.state_v).collect::<Vec<_>>(),
            model.spectral.iter().map(|s| &s.state_v).collect::<Vec<_>>()
        );
    }

    #[test]
    fn tunable_set_matches_policy() {
        let m = ToyDenoiser::new(ModelConfig::default(), TunableSet::default(), &mut RngStream::new(0, 0).rng()).unwrap();
        let trainable: Vec<&str> = m.params().iter().filter(|p| p.trainable).map(|p| p.name.as_str()).collect();
        assert_eq!(
            trainable,
            [
                "blocks.0.ffam.w_q",
                "blocks.0.temporal.w_q",
                "blocks.0.temporal.w_k",
                "blocks.0.temporal.w_v",
                "blocks.0.temporal.w_l",
                "blocks.0.temporal.b_l",
                "blocks.0.cross.w_q",
            ]
        );
    }
}
