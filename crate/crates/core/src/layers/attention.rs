//! Single-head attention and the residual Transformer block.

use serde::{Deserialize, Serialize};

use super::norm::{apply_norm, NormMode, NormParams};
use crate::error::{Error, Result};
use crate::rng::Sampler;
use crate::spectral::{spectral_norm, PowerMode, PowerState};
use crate::tensor::{matmul, matmul_transb, row_softmax, Tensor};

/// Standard deviation of the Gaussian initializer for new attention weights.
pub const INIT_STD: f64 = 0.02;

/// Parameters of one block `z + Linear(Attention(norm(z), norm(c)))`.
///
/// Shapes: `w_q: d₁×d`, `w_k: d₂×d`, `w_v: d₂×d`, `w_l: d×d₁`, `b_l: d₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_l: Tensor,
    pub b_l: Vec<f64>,
    pub norm_z: NormParams,
    pub norm_c: NormParams,
    /// Use `W̄ = W / σ_max(W)` for the value and output projections.
    pub spectral_constrained: bool,
    pub sn_state_v: PowerState,
    pub sn_state_l: PowerState,
}

impl BlockWeights {
    /// Validates shapes and assembles a block with zero bias.
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_l: Tensor, norm: NormParams, spectral: bool) -> Result<Self> {
        let d1 = w_q.rows();
        let w = Self {
            sn_state_v: vec![1.0; w_v.cols()],
            sn_state_l: vec![1.0; w_l.cols()],
            b_l: vec![0.0; d1],
            w_q,
            w_k,
            w_v,
            w_l,
            norm_c: norm.clone(),
            norm_z: norm,
            spectral_constrained: spectral,
        };
        w.validate()?;
        Ok(w)
    }

    /// Gaussian `N(0, 0.02²)` weights, zero bias.
    pub fn init(d1: usize, d2: usize, d: usize, norm: NormParams, spectral: bool, rng: &mut Sampler) -> Self {
        let mut draw = |r: usize, c: usize| {
            Tensor::from_parts_unchecked(vec![r, c], (0..r * c).map(|_| INIT_STD * rng.normal()).collect())
        };
        let w_q = draw(d1, d);
        let w_k = draw(d2, d);
        let w_v = draw(d2, d);
        let w_l = draw(d, d1);
        Self::new(w_q, w_k, w_v, w_l, norm, spectral).expect("init shapes are consistent")
    }

    /// Self-attention block whose four projections are the identity.
    pub fn identity(d: usize, norm: NormParams, spectral: bool) -> Self {
        let i = Tensor::identity(d);
        Self::new(i.clone(), i.clone(), i.clone(), i, norm, spectral).expect("square identities")
    }

    /// Shift-restricted temporal block: instance centering and spectral constraint.
    pub fn stam(d: usize, rng: &mut Sampler) -> Self {
        Self::init(d, d, d, NormParams::new(NormMode::InstanceCenter), true, rng)
    }

    /// Baseline temporal block: Layer Norm with unit affine, no constraint.
    pub fn ta(d: usize, rng: &mut Sampler) -> Self {
        Self::init(d, d, d, NormParams::layer_norm(vec![1.0; d], vec![0.0; d]), false, rng)
    }

    pub fn query_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn context_dim(&self) -> usize {
        self.w_k.rows()
    }

    pub fn attn_dim(&self) -> usize {
        self.w_q.cols()
    }

    /// Softmax temperature `1/√d` applied to `QKᵀ`.
    pub fn temperature(&self) -> f64 {
        1.0 / (self.attn_dim() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let (d1, d) = self.w_q.dims2();
        let d2 = self.w_k.rows();
        let checks: [(&'static str, &Tensor, [usize; 2]); 3] = [
            ("w_k", &self.w_k, [d2, d]),
            ("w_v", &self.w_v, [d2, d]),
            ("w_l", &self.w_l, [d, d1]),
        ];
        for (name, t, want) in checks {
            if t.shape() != want {
                return Err(Error::Dimension {
                    op: name,
                    left: want.to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        if self.b_l.len() != d1 {
            return Err(Error::Dimension {
                op: "b_l",
                left: vec![d1],
                right: vec![self.b_l.len()],
            });
        }
        self.norm_z.validate()?;
        self.norm_c.validate()
    }

    /// `W̄_v` under the constraint (converged power iteration), else `W_v`.
    pub fn effective_value(&self) -> Result<Tensor> {
        normalized(&self.w_v, self.spectral_constrained)
    }

    /// `W̄_L` under the constraint (converged power iteration), else `W_L`.
    pub fn effective_output(&self) -> Result<Tensor> {
        normalized(&self.w_l, self.spectral_constrained)
    }

    /// Copy with the spectral constraint already applied to `W_v`, `W_L`, so
    /// repeated forward passes skip the power iteration.
    pub fn resolved(&self) -> Result<Self> {
        if !self.spectral_constrained {
            return Ok(self.clone());
        }
        Ok(Self {
            w_v: self.effective_value()?,
            w_l: self.effective_output()?,
            spectral_constrained: false,
            ..self.clone()
        })
    }

    /// One single-step power iteration per constrained matrix, advancing the
    /// persistent vectors. Returns `(σ_v, σ_L)`.
    pub fn advance_spectral_state(&mut self) -> Result<(f64, f64)> {
        let (sv, v) = spectral_norm(&self.w_v, PowerMode::SingleStep, Some(&self.sn_state_v))?;
        let (sl, l) = spectral_norm(&self.w_l, PowerMode::SingleStep, Some(&self.sn_state_l))?;
        self.sn_state_v = v;
        self.sn_state_l = l;
        Ok((sv, sl))
    }
}

/// `W / σ_max(W)`; a zero matrix is left as is (it already satisfies `‖W‖ ≤ 1`).
fn normalized(w: &Tensor, constrained: bool) -> Result<Tensor> {
    if !constrained || w.max_abs() == 0.0 {
        return Ok(w.clone());
    }
    let (sigma, _) = spectral_norm(w, PowerMode::Converged, None)?;
    Ok(w.scale(1.0 / sigma))
}

/// Mixing matrix `M = softmax(QKᵀ/√d)` with `Q = zW_q`, `K = cW_k`.
pub fn attention_weights(z: &Tensor, c: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    let q = matmul(z, &w.w_q)?;
    let k = matmul(c, &w.w_k)?;
    row_softmax(&matmul_transb(&q, &k)?, w.temperature())
}

/// `M · (c W_v)`, with `W̄_v` when the block is spectrally constrained.
pub fn mix_values(mixing: &Tensor, c: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    let v = matmul(c, &w.effective_value()?)?;
    matmul(mixing, &v)
}

pub fn attention(z: &Tensor, c: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    let m = attention_weights(z, c, w)?;
    mix_values(&m, c, w)
}

/// `x W_L + b` (or `x W̄_L + b`).
pub fn linear(x: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    matmul(x, &w.effective_output()?)?.add_row_vector(&w.b_l)
}

/// `z + Linear(Attention(norm(z), norm(c)))`.
pub fn transformer_block(z: &Tensor, c: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    let zn = apply_norm(z, &w.norm_z)?;
    let cn = apply_norm(c, &w.norm_c)?;
    let a = attention(&zn, &cn, w)?;
    z.add(&linear(&a, w)?)
}

/// Same block with the mixing matrix supplied instead of computed from `Q, K`.
pub fn transformer_block_with_mixing(z: &Tensor, c: &Tensor, w: &BlockWeights, mixing: &Tensor) -> Result<Tensor> {
    let cn = apply_norm(c, &w.norm_c)?;
    if mixing.shape() != [z.rows(), c.rows()] {
        return Err(Error::Dimension {
            op: "mixing override",
            left: vec![z.rows(), c.rows()],
            right: mixing.shape().to_vec(),
        });
    }
    let a = mix_values(mixing, &cn, w)?;
    z.add(&linear(&a, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random(r: usize, c: usize, s: &mut Sampler) -> Tensor {
        Tensor::matrix(r, c, s.normals(r * c)).unwrap()
    }

    fn block(d1: usize, d2: usize, d: usize, s: &mut Sampler) -> BlockWeights {
        BlockWeights::new(
            random(d1, d, s),
            random(d2, d, s),
            random(d2, d, s),
            random(d, d1, s),
            NormParams::new(NormMode::None),
            false,
        )
        .unwrap()
    }

    #[test]
    fn single_key_forces_value_row() {
        let mut s = RngStream::new(1, 0).rng();
        let w = block(3, 2, 4, &mut s);
        let z = random(5, 3, &mut s);
        let c = random(1, 2, &mut s);
        let out = attention(&z, &c, &w).unwrap();
        let v = matmul(&c, &w.w_v).unwrap();
        for i in 0..5 {
            assert_eq!(out.row_slice(i), v.row_slice(0));
        }
    }

    #[test]
    fn zero_query_key_gives_column_mean() {
        let mut s = RngStream::new(2, 0).rng();
        let mut w = block(3, 3, 2, &mut s);
        w.w_q = Tensor::zeros(&[3, 2]);
        w.w_k = Tensor::zeros(&[3, 2]);
        let z = random(4, 3, &mut s);
        let c = random(6, 3, &mut s);
        let out = attention(&z, &c, &w).unwrap();
        let mean = matmul(&c, &w.w_v).unwrap().column_means();
        for i in 0..4 {
            for (a, b) in out.row_slice(i).iter().zip(&mean) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_token_hand_case() {
        // Q = K = V = z with identity projections, d = 2, λ = 1/√2.
        let w = BlockWeights::identity(2, NormParams::new(NormMode::None), false);
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let out = attention(&z, &z, &w).unwrap();
        let lam = 1.0 / 2f64.sqrt();
        // row 0 scores: [1, 0]; row 1 scores: [0, 4]
        let p0 = (lam * 1.0f64).exp() / ((lam * 1.0f64).exp() + 1.0);
        let p1 = 1.0 / (1.0 + (lam * 4.0f64).exp());
        let expected = [p0, 2.0 * (1.0 - p0), p1, 2.0 * (1.0 - p1)];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn dead_branch_and_bias_only() {
        let mut s = RngStream::new(3, 0).rng();
        let mut w = block(3, 3, 4, &mut s);
        w.w_l = Tensor::zeros(&[4, 3]);
        let z = random(5, 3, &mut s);
        let c = random(2, 3, &mut s);
        assert_eq!(transformer_block(&z, &c, &w).unwrap(), z);
        w.b_l = vec![0.5, -1.0, 2.0];
        let out = transformer_block(&z, &c, &w).unwrap();
        assert_eq!(out, z.add_row_vector(&w.b_l).unwrap());
    }

    #[test]
    fn block_composes_public_ops() {
        let mut s = RngStream::new(4, 0).rng();
        let mut w = block(3, 2, 4, &mut s);
        w.norm_z = NormParams::layer_norm(vec![0.5, 2.0, 1.0], vec![0.1, 0.0, -0.3]);
        w.norm_c = NormParams::new(NormMode::InstanceCenter);
        w.b_l = vec![0.3, 0.2, 0.1];
        let z = random(5, 3, &mut s);
        let c = random(4, 2, &mut s);
        let zn = apply_norm(&z, &w.norm_z).unwrap();
        let cn = apply_norm(&c, &w.norm_c).unwrap();
        let q = matmul(&zn, &w.w_q).unwrap();
        let k = matmul(&cn, &w.w_k).unwrap();
        let m = row_softmax(&matmul(&q, &k.transpose()).unwrap(), 0.5).unwrap();
        let a = matmul(&m, &matmul(&cn, &w.w_v).unwrap()).unwrap();
        let expected = z.add(&matmul(&a, &w.w_l).unwrap().add_row_vector(&w.b_l).unwrap()).unwrap();
        let out = transformer_block(&z, &c, &w).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn spectral_constraint_normalizes() {
        let mut s = RngStream::new(5, 0).rng();
        let mut w = block(4, 4, 4, &mut s);
        w.spectral_constrained = true;
        for m in [w.effective_value().unwrap(), w.effective_output().unwrap()] {
            let sigma = crate::spectral::operator_2_norm(&m);
            assert!((sigma - 1.0).abs() < 1e-4, "{sigma}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut s = RngStream::new(6, 0).rng();
        let w = block(3, 2, 4, &mut s);
        assert!(attention(&random(2, 4, &mut s), &random(2, 2, &mut s), &w).is_err());
        let bad = BlockWeights::new(
            random(3, 4, &mut s),
            random(2, 4, &mut s),
            random(2, 5, &mut s),
            random(4, 3, &mut s),
            NormParams::new(NormMode::None),
            false,
        );
        assert!(matches!(bad, Err(Error::Dimension { .. })));
    }
}
