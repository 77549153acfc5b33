//! Layer Norm, Instance Norm and Instance Centering.
//!
//! Layer Norm follows the global definition: one mean and one standard
//! deviation over every entry of the `n×d` input. A per-row variant sits
//! behind [`NormAxis::Row`]. All standard deviations use the population
//! divisor and `ε` is added to `σ`, not to the variance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    LayerNorm,
    LayerNormNoAffine,
    InstanceNorm,
    InstanceCenter,
    None,
}

impl NormMode {
    pub const ALL: [NormMode; 5] = [
        NormMode::LayerNorm,
        NormMode::LayerNormNoAffine,
        NormMode::None,
        NormMode::InstanceNorm,
        NormMode::InstanceCenter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormMode::LayerNorm => "layer_norm",
            NormMode::LayerNormNoAffine => "layer_norm_no_affine",
            NormMode::InstanceNorm => "instance_norm",
            NormMode::InstanceCenter => "instance_center",
            NormMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn has_affine(self) -> bool {
        self == NormMode::LayerNorm
    }
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAxis {
    /// Statistics over all `n·d` entries.
    #[default]
    Global,
    /// Statistics per row.
    Row,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub mode: NormMode,
    /// Per-feature scale; length 1 broadcasts.
    pub alpha: Vec<f64>,
    /// Per-feature shift; length 1 broadcasts.
    pub beta: Vec<f64>,
    pub epsilon: f64,
    #[serde(default)]
    pub axis: NormAxis,
}

impl NormParams {
    pub fn new(mode: NormMode) -> Self {
        Self {
            mode,
            alpha: vec![1.0],
            beta: vec![0.0],
            epsilon: DEFAULT_EPSILON,
            axis: NormAxis::Global,
        }
    }

    pub fn layer_norm(alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        Self {
            alpha,
            beta,
            ..Self::new(NormMode::LayerNorm)
        }
    }

    pub fn with_axis(mut self, axis: NormAxis) -> Self {
        self.axis = axis;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("norm epsilon must be positive, got {}", self.epsilon)));
        }
        if self.alpha.is_empty() || self.beta.is_empty() {
            return Err(Error::Config("norm affine vectors must be non-empty".into()));
        }
        Ok(())
    }

    /// Effective `(α_j, β_j)` for feature `j`, honoring modes that ignore the affine.
    pub fn affine_at(&self, j: usize) -> (f64, f64) {
        if !self.mode.has_affine() {
            return (1.0, 0.0);
        }
        let a = if self.alpha.len() == 1 { self.alpha[0] } else { self.alpha[j] };
        let b = if self.beta.len() == 1 { self.beta[0] } else { self.beta[j] };
        (a, b)
    }

    fn check_affine_len(&self, d: usize) -> Result<()> {
        if self.mode.has_affine()
            && ((self.alpha.len() != 1 && self.alpha.len() != d) || (self.beta.len() != 1 && self.beta.len() != d))
        {
            return Err(Error::Dimension {
                op: "norm affine",
                left: vec![d],
                right: vec![self.alpha.len(), self.beta.len()],
            });
        }
        Ok(())
    }
}

/// Dispatches on `params.mode` for one `n×d` slice.
pub fn apply_norm(z: &Tensor, params: &NormParams) -> Result<Tensor> {
    params.validate()?;
    match params.mode {
        NormMode::LayerNorm | NormMode::LayerNormNoAffine => layer_norm(z, params),
        NormMode::InstanceNorm => Ok(instance_norm(z, params.epsilon)),
        NormMode::InstanceCenter => Ok(instance_center(z)),
        NormMode::None => Ok(z.clone()),
    }
}

/// Population mean and standard deviation of a slice.
pub(crate) fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut it = values.clone();
    let first = it.next().unwrap_or(0.0);
    let (mut sum, mut count) = (0.0, 1usize);
    for v in it {
        sum += v - first;
        count += 1;
    }
    let mean = first + sum / count as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    (mean, var.sqrt())
}

pub fn layer_norm(z: &Tensor, params: &NormParams) -> Result<Tensor> {
    if !matches!(params.mode, NormMode::LayerNorm | NormMode::LayerNormNoAffine) {
        return Err(Error::Config(format!("layer_norm called with mode {}", params.mode)));
    }
    params.validate()?;
    let (n, d) = z.dims2();
    params.check_affine_len(d)?;
    let mut out = z.clone();
    let groups: Vec<(usize, usize)> = match params.axis {
        NormAxis::Global => vec![(0, n * d)],
        NormAxis::Row => (0..n).map(|i| (i * d, (i + 1) * d)).collect(),
    };
    for (start, end) in groups {
        let (mean, std) = mean_std(z.data()[start..end].iter().copied());
        let denom = std + params.epsilon;
        for k in start..end {
            let (a, b) = params.affine_at(k % d);
            out.data_mut()[k] = a * (z.data()[k] - mean) / denom + b;
        }
    }
    Ok(out)
}

/// Subtracts the temporal (row) mean from every row: `z − (1/n)Σᵢ zⁱ`.
pub fn instance_center(z: &Tensor) -> Tensor {
    let means = z.column_means();
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(means.len()) {
        for (v, m) in row.iter_mut().zip(&means) {
            *v -= m;
        }
    }
    out
}

/// Per feature column: subtract the temporal mean and divide by `σ + ε`.
pub fn instance_norm(z: &Tensor, epsilon: f64) -> Tensor {
    let (n, d) = z.dims2();
    let mut out = z.clone();
    for j in 0..d {
        let (mean, std) = mean_std((0..n).map(|i| z.get(i, j)));
        for i in 0..n {
            out.set(i, j, (z.get(i, j) - mean) / (std + epsilon));
        }
    }
    out
}

/// Batched forms over a `[l, n, d]` tensor: each spatial unit is normalized on
/// its own `n×d` slice.
pub fn apply_norm_batched(z: &Tensor, params: &NormParams) -> Result<Tensor> {
    let [l, n, d] = batch_dims(z)?;
    let mut data = Vec::with_capacity(z.len());
    for u in 0..l {
        let slice = Tensor::from_parts_unchecked(vec![n, d], z.data()[u * n * d..(u + 1) * n * d].to_vec());
        data.extend_from_slice(apply_norm(&slice, params)?.data());
    }
    Ok(Tensor::from_parts_unchecked(vec![l, n, d], data))
}

pub fn instance_center_batched(z: &Tensor) -> Result<Tensor> {
    apply_norm_batched(z, &NormParams::new(NormMode::InstanceCenter))
}

pub fn instance_norm_batched(z: &Tensor, epsilon: f64) -> Result<Tensor> {
    apply_norm_batched(
        z,
        &NormParams {
            epsilon,
            ..NormParams::new(NormMode::InstanceNorm)
        },
    )
}

pub(crate) fn batch_dims(z: &Tensor) -> Result<[usize; 3]> {
    match *z.shape() {
        [l, n, d] => Ok([l, n, d]),
        _ => Err(Error::Shape(format!("expected a [l, n, d] batch, got {:?}", z.shape()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn layer_norm_examples() {
        let p = NormParams::layer_norm(vec![1.0], vec![0.0]);
        let z = m(&[&[1.0, 1.0], &[-1.0, -1.0]]);
        assert!(close(&layer_norm(&z, &p).unwrap(), &z, 1e-4));

        let beta = 0.7;
        let c = Tensor::filled(&[3, 4], 2.5);
        let out = layer_norm(&c, &NormParams::layer_norm(vec![1.3], vec![beta])).unwrap();
        assert!(out.data().iter().all(|&v| v == beta));

        // μ = 3, σ = √5
        let z = m(&[&[0.0, 2.0], &[4.0, 6.0]]);
        let s5 = 5f64.sqrt() + DEFAULT_EPSILON;
        let expected = m(&[&[-3.0 / s5, -1.0 / s5], &[1.0 / s5, 3.0 / s5]]);
        assert!(close(&layer_norm(&z, &p).unwrap(), &expected, 1e-12));
        let unshifted = m(&[&[-3.0, -1.0], &[1.0, 3.0]]).scale(1.0 / 5f64.sqrt());
        assert!(close(&layer_norm(&z, &p).unwrap(), &unshifted, 1e-5));
    }

    #[test]
    fn layer_norm_row_axis() {
        let z = m(&[&[0.0, 2.0], &[10.0, 30.0]]);
        let p = NormParams::new(NormMode::LayerNormNoAffine).with_axis(NormAxis::Row);
        let out = layer_norm(&z, &p).unwrap();
        for i in 0..2 {
            assert!((out.get(i, 0) + 1.0).abs() < 1e-4 && (out.get(i, 1) - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn no_affine_modes_ignore_alpha_beta() {
        let mut p = NormParams::new(NormMode::LayerNormNoAffine);
        p.alpha = vec![5.0];
        p.beta = vec![9.0];
        let z = m(&[&[0.0, 2.0], &[4.0, 6.0]]);
        let plain = layer_norm(&z, &NormParams::new(NormMode::LayerNormNoAffine)).unwrap();
        assert_eq!(layer_norm(&z, &p).unwrap(), plain);
    }

    #[test]
    fn instance_center_examples() {
        assert_eq!(instance_center(&Tensor::filled(&[4, 3], 1.25)).data(), &[0.0; 12]);
        let centered = m(&[&[1.0, -2.0], &[-1.0, 2.0]]);
        assert_eq!(instance_center(&centered), centered);
        assert_eq!(instance_center(&m(&[&[1.0, 2.0], &[3.0, 4.0]])), m(&[&[-1.0, -1.0], &[1.0, 1.0]]));
    }

    #[test]
    fn instance_norm_examples() {
        let a = 3.0;
        let out = instance_norm(&m(&[&[-a], &[a]]), DEFAULT_EPSILON);
        assert!((out.get(0, 0) + 1.0).abs() < 1e-5 && (out.get(1, 0) - 1.0).abs() < 1e-5);

        assert_eq!(instance_norm(&Tensor::filled(&[3, 2], 4.0), DEFAULT_EPSILON).data(), &[0.0; 6]);

        let out = instance_norm(&m(&[&[0.0], &[1.0], &[2.0]]), DEFAULT_EPSILON);
        let k = 1.5f64.sqrt();
        for (v, e) in out.data().iter().zip([-k, 0.0, k]) {
            assert!((v - e).abs() < 1e-4, "{v} vs {e}");
        }
        // exact against σ + ε
        let sigma = (2.0f64 / 3.0).sqrt();
        assert!((out.get(2, 0) - 1.0 / (sigma + DEFAULT_EPSILON)).abs() < 1e-14);
    }

    #[test]
    fn epsilon_must_be_positive() {
        let mut p = NormParams::new(NormMode::LayerNorm);
        p.epsilon = 0.0;
        assert!(apply_norm(&Tensor::zeros(&[2, 2]), &p).is_err());
    }

    #[test]
    fn batched_centering_is_per_unit() {
        let z = Tensor::new(vec![2, 2, 1], vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let out = instance_center_batched(&z).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0, -5.0, 5.0]);
    }
}
