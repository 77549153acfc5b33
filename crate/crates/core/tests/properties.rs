use proptest::prelude::*;

use attnshift::layers::attention::{attention_weights, BlockWeights};
use attnshift::layers::frames::{ffam, fine_coarse_context, fine_coarse_len, full_st_attention, FrameSet};
use attnshift::layers::norm::{instance_center, NormMode, NormParams};
use attnshift::layers::WeightBundle;
use attnshift::spectral::{operator_2_norm, spectral_norm, PowerMode};
use attnshift::{RngStream, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c))
}

fn block(d: usize, seed: u64, spectral: bool) -> BlockWeights {
    let mut rng = RngStream::new(seed, 0).rng();
    BlockWeights::init(d, d, d, NormParams::new(NormMode::None), spectral, &mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn instance_center_zeroes_columns_and_keeps_deviations(z in sized_matrix(12, 6), offset in -100.0f64..100.0) {
        let shifted = z.map(|v| v + offset);
        let c = instance_center(&shifted);
        for s in c.column_sums() {
            prop_assert!(s.abs() <= 1e-12 * z.rows() as f64 * 100.0);
        }
        // Centering is idempotent and ignores a common offset.
        let cc = instance_center(&c);
        prop_assert!(cc.sub(&c).unwrap().max_abs() <= 1e-12 * 100.0);
        prop_assert!(instance_center(&z).sub(&c).unwrap().max_abs() <= 1e-11 * 100.0);
    }

    #[test]
    fn spectral_constraint_gives_unit_operator_norm(d in 1usize..7, seed in any::<u64>()) {
        let w = block(d, seed, true);
        for m in [w.effective_value().unwrap(), w.effective_output().unwrap()] {
            // The estimate never exceeds σ_max; a close second singular value
            // slows the power iteration, so the excess is small but nonzero.
            let norm = operator_2_norm(&m);
            prop_assert!(norm >= 1.0 - 1e-12 && norm <= 1.0 + 1e-3, "{norm}");
        }
    }

    #[test]
    fn converged_power_iteration_matches_exact_norm(w in sized_matrix(6, 6)) {
        prop_assume!(w.max_abs() > 1e-3);
        let (sigma, _) = spectral_norm(&w, PowerMode::Converged, None).unwrap();
        let exact = operator_2_norm(&w);
        prop_assert!(sigma <= exact * (1.0 + 1e-9));
        prop_assert!(sigma >= exact * 0.9, "{sigma} vs {exact}");
    }

    #[test]
    fn omega_lies_in_unit_interval(
        z in sized_matrix(8, 4),
        seed in any::<u64>(),
        ctx_rows in 1usize..10,
    ) {
        let d = z.cols();
        let mut rng = RngStream::new(seed, 1).rng();
        let c = Tensor::matrix(ctx_rows, d, rng.normals(ctx_rows * d)).unwrap();
        let m = attention_weights(&z, &c, &block(d, seed, false)).unwrap();
        for i in 0..m.rows() {
            let row = m.row_slice(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let omega = row.iter().map(|w| w * w).sum::<f64>();
            prop_assert!(omega > 0.0 && omega <= 1.0 + 1e-12);
            prop_assert!(omega >= 1.0 / ctx_rows as f64 - 1e-12);
        }
    }

    #[test]
    fn ffam_with_unit_ratio_is_full_attention(n in 1usize..4, side in 1usize..4, seed in any::<u64>()) {
        let l = side * side;
        let d = 3;
        let mut rng = RngStream::new(seed, 2).rng();
        let frames = FrameSet::square((0..n).map(|_| Tensor::matrix(l, d, rng.normals(l * d)).unwrap()).collect()).unwrap();
        let w = block(d, seed, false);
        let full = full_st_attention(&frames, &w).unwrap();
        for i in 0..n {
            prop_assert_eq!(fine_coarse_context(&frames, i, 1).unwrap().rows(), n * l);
            let f = ffam(&frames, i, &w, 1).unwrap();
            prop_assert!(f.sub(full.frame(i)).unwrap().max_abs() <= 1e-10);
        }
        prop_assert_eq!(fine_coarse_len(n, l, 1), n * l);
    }

    #[test]
    fn container_round_trips(mats in prop::collection::vec(sized_matrix(5, 5), 0..5)) {
        let mut b = WeightBundle::new();
        for (k, m) in mats.iter().enumerate() {
            b.push(format!("w{k}"), m.clone()).unwrap();
        }
        let back = WeightBundle::from_bytes(&b.to_bytes()).unwrap();
        prop_assert_eq!(back.len(), mats.len());
        for (k, m) in mats.iter().enumerate() {
            prop_assert_eq!(back.get(&format!("w{k}")).unwrap(), m);
        }
    }
}

#[test]
fn spectral_constraint_escapes_a_poor_start() {
    // The all-ones start is nearly orthogonal to the top singular vector here.
    let w = block(3, 9272, true);
    for m in [w.effective_value().unwrap(), w.effective_output().unwrap()] {
        assert!(operator_2_norm(&m) <= 1.0 + 1e-3);
    }
}

#[test]
fn container_rejects_corruption() {
    let mut b = WeightBundle::new();
    b.push("w", Tensor::identity(3)).unwrap();
    let bytes = b.to_bytes();
    assert!(WeightBundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(WeightBundle::from_bytes(&bad).is_err());
}
