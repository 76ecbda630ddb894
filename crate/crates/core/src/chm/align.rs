//! History alignment by patch attention with a per-row top-k mask.

use super::queue::HistoryView;
use crate::autodiff::{TopkMode, Var};
use crate::error::{Error, Result};
use crate::nn::{pad_to_grid, patchify, spatial_self_attention, unpatchify, PatchGrid, Scope};
use crate::tensor::Scalar;

/// Aligned history `[tau + 1, c, h, w]` together with the attention scores of
/// the alignment step, both `[tau, n, n]` with `n` patches.
#[derive(Clone)]
pub struct Alignment<T: Scalar> {
    pub aligned: Var<T>,
    pub scores: Var<T>,
    pub masked: Var<T>,
}

/// Align every history frame to `f`: queries come from `f`, keys and values from
/// the history frame, and each query keeps its `k` best keys. The self-attention
/// transform of `f` is appended as the last slot.
///
/// `params` holds the alignment projections under `sab` and the spatial
/// self-attention under `bt`.
pub fn state_align<T: Scalar>(
    f: &Var<T>,
    history: &HistoryView<T>,
    params: &Scope<'_, T>,
    grid: PatchGrid,
    k: usize,
    mode: TopkMode,
) -> Result<Alignment<T>> {
    if f.shape().len() != 3 {
        return Err(Error::shape(format!("state_align expects [c, h, w], got {:?}", f.shape())));
    }
    let hs = history.h.shape();
    if hs.len() != 4 || hs[1..] != *f.shape() {
        return Err(Error::shape(format!("history {:?} does not match frame {:?}", hs, f.shape())));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let fp = pad_to_grid(f, grid)?;
    let (hp, wp) = (fp.shape()[1], fp.shape()[2]);
    let (nh, nw) = grid.counts(hp, wp)?;
    let n = nh * nw;
    if k == 0 || k > n {
        return Err(Error::arg(format!("top-k {k} outside 1..={n} for {nh}x{nw} patches")));
    }
    let sab = params.child("sab");
    let q = patchify(&fp, grid)?.matmul(&sab.get("w_q")?)?;
    let hist = patchify(&pad_to_grid(&history.h, grid)?, grid)?;
    let keys = hist.matmul(&sab.get("w_k")?)?;
    let values = hist.matmul(&sab.get("w_v")?)?;
    let scores = q.matmul(&keys.transpose(&[0, 2, 1])?)?.div(&sab.get("alpha")?)?;
    let masked = match mode {
        TopkMode::Topk => scores.topk_mask(k, 2)?,
        TopkMode::DenseSoftmax => scores.clone(),
    };
    let out = masked.softmax(2)?.matmul(&values)?.matmul(&sab.get("w_o")?)?;
    let aligned = unpatchify(&out, grid, c, hp, wp)?.crop2d(0, 0, h, w)?;
    let own = spatial_self_attention(f, &params.child("bt"), grid)?.reshape([1, c, h, w])?;
    Ok(Alignment { aligned: Var::concat(&[aligned, own], 0)?, scores, masked })
}
