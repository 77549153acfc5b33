//! Temporal modules applied per spatial unit of a `[l, n, d]` batch.

use super::attention::{transformer_block, BlockWeights};
use super::norm::{batch_dims, NormMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn per_unit(z: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    let [l, n, d] = batch_dims(z)?;
    let w = w.resolved()?;
    let mut data = Vec::with_capacity(z.len());
    for u in 0..l {
        let slice = Tensor::from_parts_unchecked(vec![n, d], z.data()[u * n * d..(u + 1) * n * d].to_vec());
        data.extend_from_slice(transformer_block(&slice, &slice, &w)?.data());
    }
    Ok(Tensor::from_parts_unchecked(vec![l, n, d], data))
}

/// Temporal attention: `transformer_block(zᵤ, zᵤ, w)` on every unit's `n×d` slice.
pub fn ta_module(z: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    per_unit(z, w)
}

/// `z + Linear̄(Attention̄(IC(z), IC(z)))` per spatial unit.
///
/// Requires instance centering on both inputs and the spectral constraint.
pub fn stam(z: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    if !w.spectral_constrained {
        return Err(Error::Config("stam requires spectrally constrained weights".into()));
    }
    if w.norm_z.mode != NormMode::InstanceCenter || w.norm_c.mode != NormMode::InstanceCenter {
        return Err(Error::Config(format!(
            "stam requires instance_center normalization, got {} / {}",
            w.norm_z.mode, w.norm_c.mode
        )));
    }
    per_unit(z, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::attention::{attention_weights, linear, mix_values};
    use crate::layers::norm::{apply_norm, instance_center, NormParams};
    use crate::rng::RngStream;
    use crate::tensor::matmul;

    fn batch(l: usize, n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::new(vec![l, n, d], RngStream::new(seed, 0).rng().normals(l * n * d)).unwrap()
    }

    fn unit(z: &Tensor, u: usize) -> Tensor {
        let [_, n, d] = batch_dims(z).unwrap();
        Tensor::matrix(n, d, z.data()[u * n * d..(u + 1) * n * d].to_vec()).unwrap()
    }

    #[test]
    fn single_frame_ta() {
        let mut s = RngStream::new(7, 0).rng();
        let mut w = BlockWeights::ta(3, &mut s);
        w.b_l = vec![0.1, 0.2, 0.3];
        let z = batch(4, 1, 3, 8);
        let out = ta_module(&z, &w).unwrap();
        for u in 0..4 {
            let zu = unit(&z, u);
            let v = matmul(&apply_norm(&zu, &w.norm_z).unwrap(), &w.w_v).unwrap();
            let expected = zu.add(&linear(&v, &w).unwrap()).unwrap();
            let got = unit(&out, u);
            for (a, b) in got.data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dead_branch_is_identity() {
        let mut s = RngStream::new(9, 0).rng();
        let mut w = BlockWeights::ta(3, &mut s);
        w.w_l = Tensor::zeros(&[3, 3]);
        let z = batch(4, 3, 3, 10);
        assert_eq!(ta_module(&z, &w).unwrap(), z);
    }

    #[test]
    fn batched_equals_loop() {
        let mut s = RngStream::new(11, 0).rng();
        let w = BlockWeights::init(4, 4, 4, NormParams::layer_norm(vec![1.0], vec![0.0]), false, &mut s);
        let z = batch(5, 3, 4, 12);
        let out = ta_module(&z, &w).unwrap();
        for u in 0..5 {
            let zu = unit(&z, u);
            assert_eq!(unit(&out, u), transformer_block(&zu, &zu, &w).unwrap());
        }
    }

    #[test]
    fn stam_centered_input_dead_branch() {
        let mut s = RngStream::new(13, 0).rng();
        let mut w = BlockWeights::stam(3, &mut s);
        w.w_l = Tensor::zeros(&[3, 3]);
        let z = batch(2, 4, 3, 14);
        let mut centered = Vec::new();
        for u in 0..2 {
            centered.extend_from_slice(instance_center(&unit(&z, u)).data());
        }
        let zc = Tensor::new(vec![2, 4, 3], centered).unwrap();
        assert_eq!(stam(&zc, &w).unwrap(), zc);
    }

    #[test]
    fn stam_constant_over_time_adds_bias_exactly() {
        let mut s = RngStream::new(15, 0).rng();
        let mut w = BlockWeights::stam(3, &mut s);
        w.b_l = vec![0.25, -0.5, 1.0];
        let row = [0.3, -1.7, 2.2];
        let z = Tensor::new(vec![2, 4, 3], row.repeat(8)).unwrap();
        let out = stam(&z, &w).unwrap();
        let expected: Vec<f64> = row.iter().zip(&w.b_l).map(|(a, b)| a + b).collect();
        for chunk in out.data().chunks(3) {
            assert_eq!(chunk, expected.as_slice());
        }
    }

    #[test]
    fn stam_matches_manual_composition() {
        let mut s = RngStream::new(16, 0).rng();
        let mut w = BlockWeights::stam(4, &mut s);
        w.b_l = vec![0.1, 0.0, -0.2, 0.3];
        let z = batch(3, 5, 4, 17);
        let out = stam(&z, &w).unwrap();
        for u in 0..3 {
            let ic = instance_center(&unit(&z, u));
            let m = attention_weights(&ic, &ic, &w).unwrap();
            let a = mix_values(&m, &ic, &w).unwrap();
            let expected = unit(&z, u).add(&linear(&a, &w).unwrap()).unwrap();
            for (x, y) in unit(&out, u).data().iter().zip(expected.data()) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn stam_preconditions() {
        let mut s = RngStream::new(18, 0).rng();
        let w = BlockWeights::ta(3, &mut s);
        assert!(matches!(stam(&batch(1, 2, 3, 0), &w), Err(Error::Config(_))));
    }
}
