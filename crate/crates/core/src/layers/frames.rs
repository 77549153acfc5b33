//! Frame-level attention: sparse-causal, fine-coarse, and dense spatial-temporal.
//!
//! Frame indices are zero-based throughout.

use serde::{Deserialize, Serialize};

use super::attention::{attention, BlockWeights};
use crate::error::{Error, Result};
use crate::tensor::{spatial_downsample, Grid, Tensor};

/// `n` frames of `l×d` features on a shared `h×w` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSet {
    frames: Vec<Tensor>,
    grid: Grid,
}

impl FrameSet {
    pub fn new(frames: Vec<Tensor>, grid: Grid) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("a frame set needs at least one frame".into()))?;
        if !first.is_matrix() || first.rows() != grid.tokens() {
            return Err(Error::Shape(format!(
                "frame shape {:?} does not match grid {}x{}",
                first.shape(),
                grid.h,
                grid.w
            )));
        }
        if let Some(bad) = frames.iter().find(|f| f.shape() != first.shape()) {
            return Err(Error::Dimension {
                op: "FrameSet::new",
                left: first.shape().to_vec(),
                right: bad.shape().to_vec(),
            });
        }
        Ok(Self { frames, grid })
    }

    /// Frames on a square grid inferred from the token count.
    pub fn square(frames: Vec<Tensor>) -> Result<Self> {
        let l = frames.first().map_or(0, Tensor::rows);
        Self::new(frames, Grid::square(l)?)
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Tensor {
        &self.frames[i]
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.grid.tokens()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].cols()
    }

    /// Rearranges into a `[l, n, d]` batch of temporal slices.
    pub fn to_temporal(&self) -> Tensor {
        let (n, l, d) = (self.len(), self.tokens(), self.dim());
        let mut data = Vec::with_capacity(n * l * d);
        for u in 0..l {
            for f in &self.frames {
                data.extend_from_slice(f.row_slice(u));
            }
        }
        Tensor::from_parts_unchecked(vec![l, n, d], data)
    }

    /// Inverse of [`FrameSet::to_temporal`].
    pub fn from_temporal(batch: &Tensor, grid: Grid) -> Result<Self> {
        let [l, n, d] = super::norm::batch_dims(batch)?;
        if l != grid.tokens() {
            return Err(Error::Shape(format!("batch has {l} units, grid has {}", grid.tokens())));
        }
        let frames = (0..n)
            .map(|i| {
                let mut data = Vec::with_capacity(l * d);
                for u in 0..l {
                    let off = (u * n + i) * d;
                    data.extend_from_slice(&batch.data()[off..off + d]);
                }
                Tensor::from_parts_unchecked(vec![l, d], data)
            })
            .collect();
        Self::new(frames, grid)
    }

    fn map_frames(&self, f: impl Fn(usize) -> Result<Tensor>) -> Result<Self> {
        let frames = (0..self.len()).map(f).collect::<Result<Vec<_>>>()?;
        Self::new(frames, self.grid)
    }
}

/// Key/value context of sparse-causal attention for frame `i`: the first frame
/// and the previous one. Frame 0 uses two copies of itself.
pub fn sparse_causal_context(frames: &FrameSet, i: usize) -> Result<Tensor> {
    let prev = i.saturating_sub(1);
    Tensor::concat_rows(&[frames.frame(0), frames.frame(prev)])
}

pub fn sca(frames: &FrameSet, w: &BlockWeights) -> Result<FrameSet> {
    let w = w.resolved()?;
    frames.map_frames(|i| attention(frames.frame(i), &sparse_causal_context(frames, i)?, &w))
}

/// `concat[zⁱ, downsample(zʲ, r) for j ≠ i]`, other frames in ascending order.
///
/// Has `((n − 1 + r²)/r²)·l` rows.
pub fn fine_coarse_context(frames: &FrameSet, i: usize, r: usize) -> Result<Tensor> {
    if i >= frames.len() {
        return Err(Error::Shape(format!("frame index {i} out of range for {} frames", frames.len())));
    }
    frames.grid.check_ratio(r)?;
    let coarse = (0..frames.len())
        .filter(|&j| j != i)
        .map(|j| spatial_downsample(frames.frame(j), frames.grid, r))
        .collect::<Result<Vec<_>>>()?;
    let mut parts = vec![frames.frame(i)];
    parts.extend(coarse.iter());
    Tensor::concat_rows(&parts)
}

/// Row count of the fine-coarse context, `((n − 1 + r²)/r²)·l`.
pub fn fine_coarse_len(n: usize, l: usize, r: usize) -> usize {
    l + (n - 1) * (l / (r * r))
}

/// Fine-coarse frame attention for frame `i`: `Attention(zⁱ, z_FC)`.
pub fn ffam(frames: &FrameSet, i: usize, w: &BlockWeights, r: usize) -> Result<Tensor> {
    let ctx = fine_coarse_context(frames, i, r)?;
    attention(frames.frame(i), &ctx, w)
}

pub fn ffam_all(frames: &FrameSet, w: &BlockWeights, r: usize) -> Result<FrameSet> {
    let w = w.resolved()?;
    frames.map_frames(|i| ffam(frames, i, &w, r))
}

/// Dense reference: every token attends to all `n·l` tokens.
pub fn full_st_attention(frames: &FrameSet, w: &BlockWeights) -> Result<FrameSet> {
    let w = w.resolved()?;
    let all: Vec<&Tensor> = frames.frames.iter().collect();
    let ctx = Tensor::concat_rows(&all)?;
    frames.map_frames(|i| attention(frames.frame(i), &ctx, &w))
}

/// Plain per-frame self-attention.
pub fn self_attention(frames: &FrameSet, w: &BlockWeights) -> Result<FrameSet> {
    let w = w.resolved()?;
    frames.map_frames(|i| attention(frames.frame(i), frames.frame(i), &w))
}
