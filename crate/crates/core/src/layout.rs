//! Precomputed index maps for data movement.
//!
//! An [`IndexMap`] describes a pure gather: for every destination element it
//! names the source element to read, or [`IndexMap::ZERO`] to read an
//! implicit zero (used for padding). The same map, run through
//! `scatter_add`, performs the exact adjoint. All structured data movement in
//! the crate — convolution patch extraction, pooling taps, broadcasts,
//! layout permutes, row/column picks, contiguous slices — is built here once
//! per shape and then replayed, which keeps the autodiff tape's operation set
//! small.

use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, numel_of};

/// A gather plan from `src_shape` to `dst_shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub src_shape: Vec<usize>,
    pub dst_shape: Vec<usize>,
    /// One linear source index per destination element, or [`Self::ZERO`].
    pub indices: Vec<usize>,
}

impl IndexMap {
    /// Sentinel source index meaning "read zero" (out-of-bounds padding).
    pub const ZERO: usize = usize::MAX;

    pub fn new(src_shape: Vec<usize>, dst_shape: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != numel_of(&dst_shape) {
            return Err(Error::shape(
                "index_map::new",
                format!(
                    "destination {} needs {} indices, got {}",
                    fmt_shape(&dst_shape),
                    numel_of(&dst_shape),
                    indices.len()
                ),
            ));
        }
        let src_numel = numel_of(&src_shape);
        if let Some(&bad) = indices
            .iter()
            .find(|&&i| i != Self::ZERO && i >= src_numel)
        {
            return Err(Error::invalid(
                "index_map::new",
                format!(
                    "index {} out of bounds for source {}",
                    bad,
                    fmt_shape(&src_shape)
                ),
            ));
        }
        Ok(IndexMap {
            src_shape,
            dst_shape,
            indices,
        })
    }

    /// Broadcasts a one-element tensor to an arbitrary shape.
    pub fn broadcast_scalar(src_shape: Vec<usize>, dst_shape: Vec<usize>) -> Result<Self> {
        if numel_of(&src_shape) != 1 {
            return Err(Error::invalid(
                "index_map::broadcast_scalar",
                format!("source {} is not one element", fmt_shape(&src_shape)),
            ));
        }
        let n = numel_of(&dst_shape);
        Self::new(src_shape, dst_shape, vec![0; n])
    }

    /// Broadcasts a length-`cols` vector across `rows` rows.
    pub fn row_broadcast(rows: usize, cols: usize) -> Result<Self> {
        let mut indices = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            for c in 0..cols {
                indices.push(c);
            }
        }
        Self::new(vec![cols], vec![rows, cols], indices)
    }

    /// Broadcasts a per-channel vector over a `[b, c, h, w]` activation.
    pub fn channel_broadcast_nchw(b: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let mut indices = Vec::with_capacity(b * c * h * w);
        for _ in 0..b {
            for ci in 0..c {
                for _ in 0..h * w {
                    indices.push(ci);
                }
            }
        }
        Self::new(vec![c], vec![b, c, h, w], indices)
    }

    /// Extracts 3x3 patches of a `[b, c, h, w]` input with symmetric zero
    /// padding `pad`, producing a `[b*oh*ow, c*9]` patch matrix. Output
    /// spatial size is `oh = h + 2*pad - 2` (stride 1).
    pub fn im2col(b: usize, c: usize, h: usize, w: usize, pad: usize) -> Result<Self> {
        const K: usize = 3;
        if h + 2 * pad < K || w + 2 * pad < K {
            return Err(Error::invalid(
                "index_map::im2col",
                format!("input {}x{} with pad {} is smaller than a 3x3 window", h, w, pad),
            ));
        }
        let oh = h + 2 * pad - (K - 1);
        let ow = w + 2 * pad - (K - 1);
        let mut indices = Vec::with_capacity(b * oh * ow * c * K * K);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ci in 0..c {
                        for ky in 0..K {
                            for kx in 0..K {
                                let iy = (oy + ky) as isize - pad as isize;
                                let ix = (ox + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    indices.push(Self::ZERO);
                                } else {
                                    indices.push(
                                        ((bi * c + ci) * h + iy as usize) * w + ix as usize,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        Self::new(
            vec![b, c, h, w],
            vec![b * oh * ow, c * K * K],
            indices,
        )
    }

    /// Rearranges a `[b*oh*ow, o]` matrix of per-position channel rows into a
    /// `[b, o, oh, ow]` activation (the inverse of how convolution-as-matmul
    /// lays out its output).
    pub fn rows_to_nchw(b: usize, o: usize, oh: usize, ow: usize) -> Result<Self> {
        let mut indices = Vec::with_capacity(b * o * oh * ow);
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..oh {
                    for x in 0..ow {
                        indices.push(((bi * oh + y) * ow + x) * o + oi);
                    }
                }
            }
        }
        Self::new(vec![b * oh * ow, o], vec![b, o, oh, ow], indices)
    }

    /// Permutes `[b, c, h, w]` to `[b, h, w, c]`.
    pub fn channels_last(b: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let mut indices = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        indices.push(((bi * c + ci) * h + y) * w + x);
                    }
                }
            }
        }
        Self::new(vec![b, c, h, w], vec![b, h, w, c], indices)
    }

    /// One tap of a 2x2 stride-2 average pool: `dst[b,c,y,x] =
    /// src[b,c,2y+dy,2x+dx]`. Requires even spatial dimensions.
    pub fn pool_tap(b: usize, c: usize, h: usize, w: usize, dy: usize, dx: usize) -> Result<Self> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "index_map::pool_tap",
                format!("2x2 pooling needs even spatial dims, got {}x{}", h, w),
            ));
        }
        if dy > 1 || dx > 1 {
            return Err(Error::invalid("index_map::pool_tap", "tap offset must be 0 or 1"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut indices = Vec::with_capacity(b * c * oh * ow);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        indices.push(((bi * c + ci) * h + 2 * y + dy) * w + 2 * x + dx);
                    }
                }
            }
        }
        Self::new(vec![b, c, h, w], vec![b, c, oh, ow], indices)
    }

    /// Broadcasts a `[rows, 1]` column across `cols` columns.
    pub fn col_broadcast(rows: usize, cols: usize) -> Result<Self> {
        let mut indices = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for _ in 0..cols {
                indices.push(r);
            }
        }
        Self::new(vec![rows, 1], vec![rows, cols], indices)
    }

    /// Picks one column per row of a `[rows, cols]` matrix.
    pub fn column_pick(rows: usize, cols: usize, picks: &[usize]) -> Result<Self> {
        if picks.len() != rows {
            return Err(Error::invalid(
                "index_map::column_pick",
                format!("{} picks for {} rows", picks.len(), rows),
            ));
        }
        let mut indices = Vec::with_capacity(rows);
        for (r, &p) in picks.iter().enumerate() {
            if p >= cols {
                return Err(Error::invalid(
                    "index_map::column_pick",
                    format!("column {} out of bounds for {} columns", p, cols),
                ));
            }
            indices.push(r * cols + p);
        }
        Self::new(vec![rows, cols], vec![rows], indices)
    }

    /// Contiguous slice: `dst[i] = src[offset + i]`. Covers per-sample blocks
    /// of batched tensors and row slices of matrices.
    pub fn subrange(src_shape: Vec<usize>, offset: usize, dst_shape: Vec<usize>) -> Result<Self> {
        let n = numel_of(&dst_shape);
        if offset + n > numel_of(&src_shape) {
            return Err(Error::invalid(
                "index_map::subrange",
                format!(
                    "range {}..{} out of bounds for source {}",
                    offset,
                    offset + n,
                    fmt_shape(&src_shape)
                ),
            ));
        }
        let indices = (offset..offset + n).collect();
        Self::new(src_shape, dst_shape, indices)
    }
}
