//! Multivariate Gaussian row distributions: construction, sampling, estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngStream, Sampler};
use crate::tensor::{frobenius_norm, Tensor};

/// Jitter added to the covariance diagonal before factoring for sampling.
pub const SAMPLING_JITTER: f64 = 1e-12;
/// PSD tolerance relative to the Frobenius norm of the covariance.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Distribution `N(mean, cov)` of one `d`-dimensional row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    mean: Vec<f64>,
    cov: Tensor,
}

impl GaussianSpec {
    /// Symmetrizes `cov` and rejects it unless its smallest eigenvalue is at
    /// least `-1e-8·‖cov‖_F`.
    pub fn new(mean: Vec<f64>, cov: Tensor) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.shape() != [d, d] {
            return Err(Error::Dimension {
                op: "GaussianSpec::new",
                left: vec![d],
                right: cov.shape().to_vec(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("mean contains non-finite values".into()));
        }
        let cov = cov.symmetrized();
        // λ_min(Σ) > -τ  ⇔  Σ + τI is positive definite.
        let tau = PSD_TOLERANCE * frobenius_norm(&cov);
        if tau > 0.0 {
            cholesky(&add_diagonal(&cov, tau))?;
        } else if cov.max_abs() != 0.0 {
            return Err(Error::NotPsd { pivot: 0, value: 0.0 });
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            cov: Tensor::identity(d),
        }
    }

    /// Independent coordinates with the given means and variances.
    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        Self::new(mean, Tensor::diag(variances))
    }

    pub(crate) fn from_parts_unchecked(mean: Vec<f64>, cov: Tensor) -> Self {
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Tensor {
        &self.cov
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.cov.get(i, i)).collect()
    }
}

pub(crate) fn add_diagonal(m: &Tensor, v: f64) -> Tensor {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let x = out.get(i, i);
        out.set(i, i, x + v);
    }
    out
}

/// Lower-triangular `L` with `L·Lᵀ = a`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2();
    if n != m {
        return Err(Error::Shape(format!("cholesky needs a square matrix, got {n}x{m}")));
    }
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag > 0.0) {
            return Err(Error::NotPsd { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Reusable sampler holding the Cholesky factor of `Σ + 1e-12·I`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: Vec<f64>,
    factor: Tensor,
}

impl GaussianSampler {
    pub fn new(spec: &GaussianSpec) -> Result<Self> {
        let factor = cholesky(&add_diagonal(&spec.cov, SAMPLING_JITTER))?;
        Ok(Self {
            mean: spec.mean.clone(),
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Writes one draw into `out` (length `d`).
    pub fn sample_row(&self, rng: &mut Sampler, out: &mut [f64]) {
        let d = self.dim();
        let xi: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for i in 0..d {
            let lrow = self.factor.row_slice(i);
            let mut v = self.mean[i];
            for k in 0..=i {
                v += lrow[k] * xi[k];
            }
            out[i] = v;
        }
    }

    pub fn sample(&self, rows: usize, rng: &mut Sampler) -> Tensor {
        let d = self.dim();
        let mut data = vec![0.0; rows * d];
        for row in data.chunks_mut(d) {
            self.sample_row(rng, row);
        }
        Tensor::from_parts_unchecked(vec![rows, d], data)
    }
}

/// `rows` i.i.d. draws from `spec`, determined entirely by `rng`.
pub fn sample_gaussian(spec: &GaussianSpec, rows: usize, rng: RngStream) -> Result<Tensor> {
    if rows == 0 {
        return Err(Error::Shape("cannot sample zero rows".into()));
    }
    let sampler = GaussianSampler::new(spec)?;
    Ok(sampler.sample(rows, &mut rng.rng()))
}

/// Sample mean and unbiased covariance (divisor `n-1`), accumulated in row order.
pub fn estimate_stats(samples: &Tensor) -> Result<GaussianSpec> {
    let (n, d) = samples.dims2();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = samples.column_means();
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in samples.data().chunks(d) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianSpec::from_parts_unchecked(
        mean,
        Tensor::from_parts_unchecked(vec![d, d], cov),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indefinite() {
        let cov = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(GaussianSpec::new(vec![0.0; 2], cov), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn symmetrizes() {
        let cov = Tensor::from_rows(&[vec![2.0, 0.3], vec![0.1, 2.0]]).unwrap();
        let spec = GaussianSpec::new(vec![0.0; 2], cov).unwrap();
        assert_eq!(spec.cov().get(0, 1), spec.cov().get(1, 0));
        assert!((spec.cov().get(0, 1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_spec_samples_the_mean() {
        let spec = GaussianSpec::new(vec![1.5, -2.0, 0.25], Tensor::zeros(&[3, 3])).unwrap();
        let x = sample_gaussian(&spec, 50, RngStream::new(1, 2)).unwrap();
        for i in 0..50 {
            for (a, b) in x.row_slice(i).iter().zip(spec.mean()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = GaussianSpec::standard(3);
        let a = sample_gaussian(&spec, 100, RngStream::new(42, 3)).unwrap();
        let b = sample_gaussian(&spec, 100, RngStream::new(42, 3)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn estimate_examples() {
        let s = estimate_stats(&Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(s.mean(), &[1.0, 2.0]);
        assert_eq!(s.cov().data(), &[0.0; 4]);

        let s = estimate_stats(&Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap()).unwrap();
        assert_eq!(s.mean(), &[1.0]);
        assert_eq!(s.cov().data(), &[2.0]);

        assert!(matches!(
            estimate_stats(&Tensor::zeros(&[1, 3])),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = Tensor::from_rows(&[vec![4.0, 2.0, 0.4], vec![2.0, 5.0, 1.0], vec![0.4, 1.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        let back = crate::tensor::matmul(&l, &l.transpose()).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
