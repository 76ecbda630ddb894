//! Patched dot-product attention within a single frame.

use super::params::{join, ParamInit, ParamSpec, Scope};
use super::patch::{pad_to_grid, patchify, unpatchify, PatchGrid};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Projections `w_q`, `w_k`, `w_v`, `w_o` of shape `[d, d]` applied as `P · W`,
/// and the score divisor `alpha`.
pub fn attention_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    let mut specs: Vec<ParamSpec> = ["w_q", "w_k", "w_v", "w_o"]
        .iter()
        .map(|n| ParamSpec::new(join(prefix, n), [d, d], ParamInit::FanIn(d)))
        .collect();
    specs.push(ParamSpec::new(join(prefix, "alpha"), [1], ParamInit::Constant((d as f64).sqrt())));
    specs
}

fn check_dim<T: Scalar>(w: &Var<T>, d: usize, name: &str) -> Result<()> {
    if w.shape() != [d, d] {
        return Err(Error::shape(format!("{name}: expected [{d}, {d}], got {:?}", w.shape())));
    }
    Ok(())
}

/// Patchify `f` (already divisible by the grid) and project it three ways.
pub fn qkv_project<T: Scalar>(
    f: &Var<T>,
    params: &Scope<'_, T>,
    grid: PatchGrid,
) -> Result<(Var<T>, Var<T>, Var<T>)> {
    let p = patchify(f, grid)?;
    let d = *p.shape().last().unwrap();
    let mut out = Vec::with_capacity(3);
    for name in ["w_q", "w_k", "w_v"] {
        let w = params.get(name)?;
        check_dim(&w, d, name)?;
        out.push(p.matmul(&w)?);
    }
    let v = out.pop().unwrap();
    let k = out.pop().unwrap();
    let q = out.pop().unwrap();
    Ok((q, k, v))
}

/// Dense softmax attention among the patches of one `[c, h, w]` frame, projected
/// by `w_o` and returned at the input extents.
pub fn spatial_self_attention<T: Scalar>(f: &Var<T>, params: &Scope<'_, T>, grid: PatchGrid) -> Result<Var<T>> {
    if f.shape().len() != 3 {
        return Err(Error::shape(format!("spatial attention expects [c, h, w], got {:?}", f.shape())));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let padded = pad_to_grid(f, grid)?;
    let (hp, wp) = (padded.shape()[1], padded.shape()[2]);
    let (q, k, v) = qkv_project(&padded, params, grid)?;
    let d = grid.patch_dim(c);
    let w_o = params.get("w_o")?;
    check_dim(&w_o, d, "w_o")?;
    let scores = q.matmul(&k.transpose(&[1, 0])?)?.div(&params.get("alpha")?)?;
    let out = scores.softmax(1)?.matmul(&v)?.matmul(&w_o)?;
    unpatchify(&out, grid, c, hp, wp)?.crop2d(0, 0, h, w)
}
