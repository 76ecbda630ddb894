//! Historyless feed-forward block: two gated residual halves applied per frame.
//!
//! ```text
//! x = F + conv2(gate(dw3x3(conv1(LN(F)))))
//! y = x + conv4(gate(conv3(LN(x))))
//! ```
//!
//! `conv1`/`conv3` expand to `2c` channels, `gate` multiplies the two halves, and
//! the final projections `conv2`/`conv4` are zero-initialized.

use super::params::{join, ParamInit, ParamSpec, Scope};
use crate::autodiff::{Padding, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

const LN_EPS: f64 = 1e-6;

pub fn ffn_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    let p = |n: &str| join(prefix, n);
    vec![
        ParamSpec::new(p("norm1.gain"), [c], ParamInit::Constant(1.0)),
        ParamSpec::new(p("norm1.bias"), [c], ParamInit::Zeros),
        ParamSpec::new(p("conv1.w"), [2 * c, c, 1, 1], ParamInit::FanIn(c)),
        ParamSpec::new(p("conv1.b"), [2 * c], ParamInit::Zeros),
        ParamSpec::new(p("dw.w"), [2 * c, 1, 3, 3], ParamInit::FanIn(9)),
        ParamSpec::new(p("dw.b"), [2 * c], ParamInit::Zeros),
        ParamSpec::new(p("conv2.w"), [c, c, 1, 1], ParamInit::Zeros),
        ParamSpec::new(p("conv2.b"), [c], ParamInit::Zeros),
        ParamSpec::new(p("norm2.gain"), [c], ParamInit::Constant(1.0)),
        ParamSpec::new(p("norm2.bias"), [c], ParamInit::Zeros),
        ParamSpec::new(p("conv3.w"), [2 * c, c, 1, 1], ParamInit::FanIn(c)),
        ParamSpec::new(p("conv3.b"), [2 * c], ParamInit::Zeros),
        ParamSpec::new(p("conv4.w"), [c, c, 1, 1], ParamInit::Zeros),
        ParamSpec::new(p("conv4.b"), [c], ParamInit::Zeros),
    ]
}

fn conv<T: Scalar>(x: &Var<T>, p: &Scope<'_, T>, name: &str, pad: usize, groups: usize) -> Result<Var<T>> {
    let s = p.child(name);
    x.conv2d(&s.get("w")?, Some(&s.get("b")?), 1, Padding::Zeros(pad), groups)
}

fn norm<T: Scalar>(x: &Var<T>, p: &Scope<'_, T>, name: &str) -> Result<Var<T>> {
    let s = p.child(name);
    x.layer_norm(&s.get("gain")?, &s.get("bias")?, 0, LN_EPS)
}

/// Apply the block to one `[c, h, w]` frame.
pub fn historyless_ffn<T: Scalar>(f: &Var<T>, params: &Scope<'_, T>) -> Result<Var<T>> {
    if f.shape().len() != 3 {
        return Err(Error::shape(format!("historyless FFN expects [c, h, w], got {:?}", f.shape())));
    }
    let c2 = 2 * f.shape()[0];
    let y = norm(f, params, "norm1")?;
    let y = conv(&y, params, "conv1", 0, 1)?;
    let y = conv(&y, params, "dw", 1, c2)?.gate(0)?;
    let x = f.add(&conv(&y, params, "conv2", 0, 1)?)?;
    let z = norm(&x, params, "norm2")?;
    let z = conv(&z, params, "conv3", 0, 1)?.gate(0)?;
    x.add(&conv(&z, params, "conv4", 0, 1)?)
}
