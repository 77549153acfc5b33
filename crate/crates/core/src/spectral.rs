//! Largest singular value by power iteration on `WᵀW`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Tensor};

pub const CONVERGED_REL_TOL: f64 = 1e-6;
pub const CONVERGED_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    /// Iterate until the estimate changes by less than 1e-6 relative, or 100
    /// steps, from the given start and from each basis vector; keep the largest.
    Converged,
    /// One step from the persistent vector, as done once per training step.
    SingleStep,
}

/// Right singular vector estimate carried across calls (length = cols of `W`).
pub type PowerState = Vec<f64>;

fn wv(w: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| crate::tensor::dot(w.row_slice(i), v)).collect()
}

fn wtu(w: &Tensor, u: &[f64]) -> Vec<f64> {
    let c = w.cols();
    let mut out = vec![0.0; c];
    for (i, &ui) in u.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(w.row_slice(i)) {
            *o += ui * x;
        }
    }
    out
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Deterministic start vector: all ones, normalized. Avoids depending on an RNG
/// for stateless (converged) use.
fn default_start(c: usize) -> Vec<f64> {
    vec![1.0 / (c as f64).sqrt(); c]
}

/// One power step `v ← normalize(WᵀW v)`, returning `(σ, v)` with `σ = ‖W v_new‖`.
fn power_step(w: &Tensor, v: &[f64]) -> (f64, Vec<f64>) {
    let mut u = wv(w, v);
    if normalize(&mut u) == 0.0 {
        // v is in the null space; fall back to the column of largest norm.
        let c = w.cols();
        let best = (0..c)
            .max_by(|&a, &b| col_norm(w, a).total_cmp(&col_norm(w, b)))
            .unwrap_or(0);
        let mut e = vec![0.0; c];
        e[best] = 1.0;
        return power_step(w, &e);
    }
    let mut v_new = wtu(w, &u);
    normalize(&mut v_new);
    let sigma = l2_norm(&wv(w, &v_new));
    (sigma, v_new)
}

fn col_norm(w: &Tensor, j: usize) -> f64 {
    (0..w.rows()).map(|i| w.get(i, j).powi(2)).sum::<f64>().sqrt()
}

/// Estimate `σ_max(W)`. Returns the estimate and the updated right vector.
pub fn spectral_norm(w: &Tensor, mode: PowerMode, state: Option<&[f64]>) -> Result<(f64, PowerState)> {
    if !w.is_matrix() {
        return Err(Error::Shape(format!("spectral_norm needs a matrix, got {:?}", w.shape())));
    }
    if w.max_abs() == 0.0 {
        return Err(Error::Degenerate("spectral norm of a zero matrix".into()));
    }
    let c = w.cols();
    let v = match state {
        Some(s) if s.len() == c && l2_norm(s) > 0.0 => {
            let mut s = s.to_vec();
            normalize(&mut s);
            s
        }
        Some(s) if s.len() != c => {
            return Err(Error::Dimension {
                op: "spectral_norm state",
                left: w.shape().to_vec(),
                right: vec![s.len()],
            })
        }
        _ => default_start(c),
    };
    match mode {
        PowerMode::SingleStep => {
            let (sigma, v) = power_step(w, &v);
            Ok((sigma, v))
        }
        PowerMode::Converged => {
            // A start nearly orthogonal to the top singular vector can stall on
            // a smaller one; some basis vector has overlap at least 1/√c.
            let mut best = converge(w, v);
            for j in 0..c {
                let mut e = vec![0.0; c];
                e[j] = 1.0;
                let cand = converge(w, e);
                if cand.0 > best.0 * (1.0 + CONVERGED_REL_TOL) {
                    best = cand;
                }
            }
            Ok(best)
        }
    }
}

/// Power steps until the estimate changes by at most `CONVERGED_REL_TOL`
/// relative, or `CONVERGED_MAX_ITERS` steps.
fn converge(w: &Tensor, mut v: Vec<f64>) -> (f64, PowerState) {
    let mut sigma = 0.0;
    for _ in 0..CONVERGED_MAX_ITERS {
        let (s, next) = power_step(w, &v);
        v = next;
        let done = (s - sigma).abs() <= CONVERGED_REL_TOL * s;
        sigma = s;
        if done {
            break;
        }
    }
    (sigma, v)
}

/// Operator 2-norm, `sqrt(λ_max(WᵀW))` from a Jacobi eigensolve of the smaller
/// Gram matrix. Bound audits compare norms at 1e-9 relative, which a power
/// iteration stopped at 1e-6 cannot resolve.
pub fn operator_2_norm(w: &Tensor) -> f64 {
    let (r, c) = w.dims2();
    let gram = if c <= r {
        crate::tensor::matmul(&w.transpose(), w)
    } else {
        crate::tensor::matmul_transb(w, w)
    }
    .expect("gram shapes agree");
    symmetric_eigenvalues(&gram)
        .into_iter()
        .fold(0.0f64, f64::max)
        .max(0.0)
        .sqrt()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations (ascending).
pub fn symmetric_eigenvalues(a: &Tensor) -> Vec<f64> {
    let (n, m) = a.dims2();
    assert_eq!(n, m, "symmetric_eigenvalues needs a square matrix");
    let mut s = a.symmetrized().into_data();
    let scale = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    if scale == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = s[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = s[p * n + p];
                let aqq = s[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = s[k * n + p];
                    let akq = s[k * n + q];
                    s[k * n + p] = c * akp - sn * akq;
                    s[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = s[p * n + k];
                    let aqk = s[q * n + k];
                    s[p * n + k] = c * apk - sn * aqk;
                    s[q * n + k] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| s[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}
