//! Channel attention from the current frame over the aligned history.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::Scope;
use crate::tensor::Scalar;

const NORM_EPS: f64 = 1e-12;

pub struct Routed<T: Scalar> {
    /// `[c, h, w]`, including the identity skip.
    pub y: Var<T>,
    /// Softmax weights `[c, (tau + 1) * c]`, one row per output channel.
    pub weights: Var<T>,
}

/// Every channel of `f` attends over all channels of all slots of `aligned`.
/// Queries and keys are unit-normalized over pixels before the scaled product,
/// so scores do not grow with resolution. Projections are `[c, c]` matrices
/// applied on the channel axis.
pub fn route<T: Scalar>(f: &Var<T>, aligned: &Var<T>, params: &Scope<'_, T>) -> Result<Routed<T>> {
    let fs = f.shape();
    let a = aligned.shape();
    if fs.len() != 3 || a.len() != 4 || a[1..] != *fs {
        return Err(Error::shape(format!("router: frame {fs:?} and aligned history {a:?}")));
    }
    let (slots, c, hw) = (a[0], fs[0], fs[1] * fs[2]);
    let fm = f.reshape([c, hw])?;
    let hm = aligned.reshape([slots, c, hw])?;
    let q = params.get("w_q")?.matmul(&fm)?.l2_normalize(1, NORM_EPS)?;
    let k = params.get("w_k")?.matmul(&hm)?.reshape([slots * c, hw])?.l2_normalize(1, NORM_EPS)?;
    let v = params.get("w_v")?.matmul(&hm)?.reshape([slots * c, hw])?;
    let weights = q.matmul(&k.transpose(&[1, 0])?)?.div(&params.get("alpha")?)?.softmax(1)?;
    let out = params.get("w_o")?.matmul(&weights.matmul(&v)?)?;
    let y = out.reshape(fs.to_vec())?.add(f)?;
    Ok(Routed { y, weights })
}

pub fn frame_history_router<T: Scalar>(f: &Var<T>, aligned: &Var<T>, params: &Scope<'_, T>) -> Result<Var<T>> {
    Ok(route(f, aligned, params)?.y)
}
