//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation together with its forward value.
//! [`Graph::backward`] consumes the graph; any later use is an error.

use crate::error::{Error, Result};
use crate::layers::norm::{instance_center, instance_norm, layer_norm, NormAxis, NormMode, NormParams};
use crate::tensor::{matmul, matmul_transb, row_softmax, spatial_downsample, Grid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var, f64),
    InstanceCenter(Var),
    InstanceNorm(Var, f64),
    LayerNorm {
        x: Var,
        alpha: Var,
        beta: Var,
        epsilon: f64,
        axis: NormAxis,
    },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Downsample(Var, Grid, usize),
    Transpose(Var),
    MseLoss(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients indexed by [`Var`]; `None` for nodes the loss does not reach.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros shaped like `like` when `v` is off the loss path.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_matrix() {
            return Err(Error::Shape(format!("graph values must be matrices, got {:?}", t.shape())));
        }
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    /// `a bᵀ`.
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_transb(self.value(a), self.value(b))?;
        self.push(v, Op::MatMulTransB(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1×c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        if b.rows() != 1 {
            return Err(Error::Shape(format!("bias must be a single row, got {:?}", b.shape())));
        }
        let v = self.value(a).add_row_vector(b.data())?;
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let v = row_softmax(self.value(a), temperature)?;
        self.push(v, Op::SoftmaxRows(a, temperature))
    }

    pub fn instance_center(&mut self, a: Var) -> Result<Var> {
        let v = instance_center(self.value(a));
        self.push(v, Op::InstanceCenter(a))
    }

    pub fn instance_norm(&mut self, a: Var, epsilon: f64) -> Result<Var> {
        let v = instance_norm(self.value(a), epsilon);
        self.push(v, Op::InstanceNorm(a, epsilon))
    }

    /// Layer Norm with `1×d` affine rows `alpha`, `beta`.
    pub fn layer_norm(&mut self, x: Var, alpha: Var, beta: Var, epsilon: f64, axis: NormAxis) -> Result<Var> {
        let d = self.value(x).cols();
        for (name, p) in [("alpha", alpha), ("beta", beta)] {
            if self.value(p).shape() != [1, d] {
                return Err(Error::Dimension {
                    op: if name == "alpha" { "layer_norm alpha" } else { "layer_norm beta" },
                    left: vec![1, d],
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let params = NormParams {
            alpha: self.value(alpha).data().to_vec(),
            beta: self.value(beta).data().to_vec(),
            epsilon,
            axis,
            ..NormParams::new(NormMode::LayerNorm)
        };
        let v = layer_norm(self.value(x), &params)?;
        self.push(
            v,
            Op::LayerNorm {
                x,
                alpha,
                beta,
                epsilon,
                axis,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&refs)?;
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.rows()) {
            return Err(Error::Shape(format!("row {bad} out of range for {} rows", src.rows())));
        }
        let v = src.gather_rows(indices);
        self.push(v, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn downsample(&mut self, a: Var, grid: Grid, r: usize) -> Result<Var> {
        let v = spatial_downsample(self.value(a), grid, r)?;
        self.push(v, Op::Downsample(a, grid, r))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// `mean((a − target)²)` as a `1×1` value.
    pub fn mse_loss(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let diff = self.value(a).sub(target)?;
        let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64;
        self.push(Tensor::from_parts_unchecked(vec![1, 1], vec![loss]), Op::MseLoss(a, target.clone()))
    }

    /// Reverse pass from the scalar `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(&[1, 1], 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (target, contrib) in self.local_grads(node, &g)? {
                accumulate(&mut grads[target.0], contrib)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, matmul_transb(g, val(*b))?),
                (*b, matmul(&val(*a).transpose(), g)?),
            ],
            Op::MatMulTransB(a, b) => vec![
                (*a, matmul(g, val(*b))?),
                (*b, matmul(&g.transpose(), val(*a))?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, b) => {
                let sums: Vec<f64> = g.column_sums();
                vec![(*a, g.clone()), (*b, Tensor::row(&sums))]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::SoftmaxRows(a, t) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = g.clone();
                for (row_g, row_y) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let inner: f64 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                    for (gv, yv) in row_g.iter_mut().zip(row_y) {
                        *gv = t * yv * (*gv - inner);
                    }
                }
                vec![(*a, dx)]
            }
            Op::InstanceCenter(a) => vec![(*a, instance_center(g))],
            Op::InstanceNorm(a, eps) => {
                let x = val(*a);
                let (n, d) = x.dims2();
                let mut dx = Tensor::zeros(&[n, d]);
                for j in 0..d {
                    let xs: Vec<f64> = (0..n).map(|i| x.get(i, j)).collect();
                    let gs: Vec<f64> = (0..n).map(|i| g.get(i, j)).collect();
                    for (i, v) in normalize_backward(&xs, &gs, *eps).into_iter().enumerate() {
                        dx.set(i, j, v);
                    }
                }
                vec![(*a, dx)]
            }
            Op::LayerNorm {
                x,
                alpha,
                beta,
                epsilon,
                axis,
            } => {
                let xv = val(*x);
                let al = val(*alpha).data();
                let (n, d) = xv.dims2();
                let groups: Vec<(usize, usize)> = match axis {
                    NormAxis::Global => vec![(0, n * d)],
                    NormAxis::Row => (0..n).map(|i| (i * d, (i + 1) * d)).collect(),
                };
                let mut dx = vec![0.0; n * d];
                let mut dalpha = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (start, end) in groups {
                    let xs = &xv.data()[start..end];
                    let gs: Vec<f64> = (start..end).map(|k| g.data()[k] * al[k % d]).collect();
                    let back = normalize_backward(xs, &gs, *epsilon);
                    dx[start..end].copy_from_slice(&back);
                    let (mean, std) = crate::layers::norm::mean_std(xs.iter().copied());
                    for k in start..end {
                        let xhat = (xv.data()[k] - mean) / (std + epsilon);
                        dalpha[k % d] += g.data()[k] * xhat;
                        dbeta[k % d] += g.data()[k];
                    }
                }
                vec![
                    (*x, Tensor::from_parts_unchecked(vec![n, d], dx)),
                    (*alpha, Tensor::row(&dalpha)),
                    (*beta, Tensor::row(&dbeta)),
                ]
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let r = val(*p).rows();
                    let data = g.data()[offset * c..(offset + r) * c].to_vec();
                    out.push((*p, Tensor::from_parts_unchecked(vec![r, c], data)));
                    offset += r;
                }
                out
            }
            Op::GatherRows(a, idx) => {
                let src = val(*a);
                let c = src.cols();
                let mut dx = Tensor::zeros(src.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in dx.row_slice_mut(i).iter_mut().zip(g.row_slice(k)) {
                        *o += v;
                    }
                }
                debug_assert_eq!(dx.cols(), c);
                vec![(*a, dx)]
            }
            Op::Downsample(a, grid, r) => {
                let src = val(*a);
                let mut dx = Tensor::zeros(src.shape());
                let inv = 1.0 / (r * r) as f64;
                let ow = grid.w / r;
                for y in 0..grid.h {
                    for x in 0..grid.w {
                        let o = (y / r) * ow + x / r;
                        for (d, v) in dx.row_slice_mut(y * grid.w + x).iter_mut().zip(g.row_slice(o)) {
                            *d = v * inv;
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::MseLoss(a, target) => {
                let diff = val(*a).sub(target)?;
                let k = 2.0 * g.data()[0] / diff.len() as f64;
                vec![(*a, diff.scale(k))]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) -> Result<()> {
    match slot {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
    Ok(())
}

/// Backward of `y = (x − mean)/(std + ε)` over one group, population std.
fn normalize_backward(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let (mean, std) = crate::layers::norm::mean_std(x.iter().copied());
    let denom = std + eps;
    let gbar = g.iter().sum::<f64>() / n;
    let gu: f64 = g.iter().zip(x).map(|(gi, xi)| gi * (xi - mean)).sum();
    let k = if std > 0.0 { gu / (denom * denom * n * std) } else { 0.0 };
    x.iter()
        .zip(g)
        .map(|(xi, gi)| (gi - gbar) / denom - (xi - mean) * k)
        .collect()
}

/// `|a − f| / max(|a|, |f|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor of [`relative_error`] in gradient checks.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Largest relative error between tape gradients and fourth-order central
/// differences (points `±h`, `±2h`) over every entry of every input. `f` builds a scalar loss from
/// leaves holding `inputs`, in order.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(grad_check_per_input(inputs, h, f)?.into_iter().fold(0.0, f64::max))
}

/// Like [`grad_check`] but reports the worst error of each input separately.
pub fn grad_check_per_input<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ts.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut out = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, &inputs[k]);
        let mut worst = 0.0f64;
        for e in 0..inputs[k].len() {
            let orig = inputs[k].data()[e];
            let mut at = |x: f64| -> Result<f64> {
                probe[k].data_mut()[e] = x;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(orig + h)?, at(orig - h)?, at(orig + 2.0 * h)?, at(orig - 2.0 * h)?);
            probe[k].data_mut()[e] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            worst = worst.max(relative_error(analytic.data()[e], numeric, GRAD_CHECK_FLOOR));
        }
        out.push(worst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn rand(r: usize, c: usize, seed: u64) -> Tensor {
        Tensor::matrix(r, c, RngStream::new(seed, 0).rng().normals(r * c)).unwrap()
    }

    fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let err = grad_check(inputs, GRAD_CHECK_STEP, f).unwrap();
        assert!(err <= 1e-5, "max relative error {err}");
    }

    /// Weighted sum so every output entry gets a distinct upstream gradient.
    fn weighted_loss(g: &mut Graph, v: Var) -> Result<Var> {
        let (r, c) = g.value(v).dims2();
        let target = Tensor::matrix(r, c, (0..r * c).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap();
        g.mse_loss(v, &target)
    }

    #[test]
    fn quadratic_form_hand_gradient() {
        // L = mean((x W)²) for a single row x: dL/dW = (2/c)·xᵀ(xW).
        let x = rand(1, 3, 1);
        let w = rand(3, 2, 2);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone()).unwrap();
        let wv = g.leaf(w.clone()).unwrap();
        let y = g.matmul(xv, wv).unwrap();
        let loss = g.mse_loss(y, &Tensor::zeros(&[1, 2])).unwrap();
        let grads = g.backward(loss).unwrap();
        let xw = matmul(&x, &w).unwrap();
        let expected = matmul(&x.transpose(), &xw).unwrap().scale(2.0 / 2.0);
        for (a, b) in grads.get(wv).unwrap().data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn off_path_parameter_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(rand(2, 2, 3)).unwrap();
        let unused = g.leaf(rand(2, 2, 4)).unwrap();
        let loss = g.mse_loss(a, &Tensor::zeros(&[2, 2])).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &Tensor::zeros(&[2, 2])), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn graph_reuse_is_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(rand(1, 1, 5)).unwrap();
        let loss = g.mse_loss(a, &Tensor::zeros(&[1, 1])).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss).unwrap_err(), Error::GraphConsumed);
        assert_eq!(g.leaf(rand(1, 1, 6)).unwrap_err(), Error::GraphConsumed);
    }

    #[test]
    fn matmul_and_bias() {
        check(&[rand(3, 4, 1), rand(4, 2, 2), rand(1, 2, 3)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add_row(y, v[2])?;
            weighted_loss(g, y)
        });
        check(&[rand(3, 4, 1), rand(5, 4, 2)], |g, v| {
            let y = g.matmul_transb(v[0], v[1])?;
            let t = g.transpose(y)?;
            let s = g.scale(t, 0.7)?;
            weighted_loss(g, s)
        });
    }

    #[test]
    fn softmax() {
        check(&[rand(3, 5, 4)], |g, v| {
            let y = g.softmax_rows(v[0], 0.5)?;
            weighted_loss(g, y)
        });
    }

    #[test]
    fn normalizations() {
        check(&[rand(4, 3, 5)], |g, v| {
            let y = g.instance_center(v[0])?;
            weighted_loss(g, y)
        });
        check(&[rand(4, 3, 6)], |g, v| {
            let y = g.instance_norm(v[0], 1e-5)?;
            weighted_loss(g, y)
        });
        for axis in [NormAxis::Global, NormAxis::Row] {
            check(&[rand(4, 3, 7), rand(1, 3, 8), rand(1, 3, 9)], |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5, axis)?;
                weighted_loss(g, y)
            });
        }
    }

    #[test]
    fn structural_ops() {
        check(&[rand(2, 3, 10), rand(3, 3, 11)], |g, v| {
            let c = g.concat_rows(&[v[0], v[1], v[0]])?;
            let p = g.gather_rows(c, &[4, 0, 0, 2, 6])?;
            weighted_loss(g, p)
        });
        check(&[rand(16, 2, 12)], |g, v| {
            let p = g.downsample(v[0], Grid::new(4, 4), 2)?;
            weighted_loss(g, p)
        });
    }

    #[test]
    fn attention_composite() {
        check(&[rand(4, 3, 13), rand(3, 3, 14), rand(3, 3, 15), rand(3, 3, 16)], |g, v| {
            let q = g.matmul(v[0], v[1])?;
            let k = g.matmul(v[0], v[2])?;
            let s = g.matmul_transb(q, k)?;
            let m = g.softmax_rows(s, 1.0 / 3f64.sqrt())?;
            let vv = g.matmul(v[0], v[3])?;
            let o = g.matmul(m, vv)?;
            let r = g.add(o, v[0])?;
            weighted_loss(g, r)
        });
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
