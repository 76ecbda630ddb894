//! Non-overlapping patch rearrangement of feature maps.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub p1: usize,
    pub p2: usize,
}

impl PatchGrid {
    pub fn new(p1: usize, p2: usize) -> Result<Self> {
        if p1 == 0 || p2 == 0 {
            return Err(Error::arg("patch extents must be positive"));
        }
        Ok(Self { p1, p2 })
    }

    pub fn square(p: usize) -> Result<Self> {
        Self::new(p, p)
    }

    /// Extents rounded up to whole patches.
    pub fn padded(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.p1) * self.p1, w.div_ceil(self.p2) * self.p2)
    }

    /// Patch counts `(n_h, n_w)` of an `h x w` canvas that the grid divides.
    pub fn counts(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if !h.is_multiple_of(self.p1) || !w.is_multiple_of(self.p2) {
            return Err(Error::shape(format!(
                "{h}x{w} canvas is not divisible by {}x{} patches",
                self.p1, self.p2
            )));
        }
        Ok((h / self.p1, w / self.p2))
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        channels * self.p1 * self.p2
    }
}

fn split_chw(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    if shape.len() < 3 {
        return Err(Error::shape(format!("expected [.., c, h, w], got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 3].iter().product(), [shape[r - 3], shape[r - 2], shape[r - 1]]))
}

/// `[.., c, h, w] -> [.., n_h*n_w, c*p1*p2]`. Patches are in row-major order and
/// each is flattened in `(c, p1, p2)` order.
pub fn patchify<T: Scalar>(f: &Var<T>, grid: PatchGrid) -> Result<Var<T>> {
    let (lead, [c, h, w]) = split_chw(f.shape())?;
    let (nh, nw) = grid.counts(h, w)?;
    let lead_shape = &f.shape()[..f.shape().len() - 3];
    let mut out_shape = lead_shape.to_vec();
    out_shape.extend([nh * nw, grid.patch_dim(c)]);
    f.reshape([lead, c, nh, grid.p1, nw, grid.p2])?
        .transpose(&[0, 2, 4, 1, 3, 5])?
        .reshape(out_shape)
}

/// Inverse of [`patchify`] for a `c x h x w` canvas.
pub fn unpatchify<T: Scalar>(p: &Var<T>, grid: PatchGrid, c: usize, h: usize, w: usize) -> Result<Var<T>> {
    let (nh, nw) = grid.counts(h, w)?;
    let shape = p.shape();
    let r = shape.len();
    if r < 2 || shape[r - 2] != nh * nw || shape[r - 1] != grid.patch_dim(c) {
        return Err(Error::shape(format!(
            "unpatchify: expected [.., {}, {}], got {shape:?}",
            nh * nw,
            grid.patch_dim(c)
        )));
    }
    let lead: usize = shape[..r - 2].iter().product();
    let mut out_shape = shape[..r - 2].to_vec();
    out_shape.extend([c, h, w]);
    p.reshape([lead, nh, nw, c, grid.p1, grid.p2])?
        .transpose(&[0, 3, 1, 4, 2, 5])?
        .reshape(out_shape)
}

/// Pad bottom and right edges up to whole patches. Reflection is used where the
/// map is large enough, zeros otherwise.
pub fn pad_to_grid<T: Scalar>(f: &Var<T>, grid: PatchGrid) -> Result<Var<T>> {
    let (_, [_, h, w]) = split_chw(f.shape())?;
    let (hp, wp) = grid.padded(h, w);
    if (hp, wp) == (h, w) {
        return Ok(f.clone());
    }
    let (db, dr) = (hp - h, wp - w);
    f.pad2d(0, db, 0, dr, db < h && dr < w)
}
