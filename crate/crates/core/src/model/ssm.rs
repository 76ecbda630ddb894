//! Time-varying linear state-space recurrence
//! `h_t = A_t h_{t-1} + B_t f_t`, `y_t = C_t h_t`, starting from `h = 0`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-step matrices: `a[t]` is `[n, n]`, `b[t]` is `[n, m]`, `c[t]` is `[p, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    pub a: Vec<Tensor<T>>,
    pub b: Vec<Tensor<T>>,
    pub c: Vec<Tensor<T>>,
}

impl<T: Scalar> SsmParams<T> {
    pub fn steps(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.b.len() != self.a.len() || self.c.len() != self.a.len() {
            return Err(Error::shape("A, B and C need one matrix per step"));
        }
        for t in 0..self.a.len() {
            self.check_step(t)?;
        }
        Ok(())
    }

    fn check_step(&self, t: usize) -> Result<(usize, usize)> {
        let (a, b, c) = (&self.a[t], &self.b[t], &self.c[t]);
        let ok = a.rank() == 2
            && b.rank() == 2
            && c.rank() == 2
            && a.shape()[0] == a.shape()[1]
            && b.shape()[0] == a.shape()[0]
            && c.shape()[1] == a.shape()[0];
        if !ok {
            return Err(Error::shape(format!(
                "step {t}: A {:?}, B {:?}, C {:?} are not conformable",
                a.shape(),
                b.shape(),
                c.shape()
            )));
        }
        Ok((a.shape()[0], b.shape()[1]))
    }
}

fn column<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    v.reshape([v.len(), 1])
}

/// Advance one step `t`. `h_prev` has `n` entries and `f` has `m`.
pub fn ssm_step<T: Scalar>(
    h_prev: &Tensor<T>,
    f: &Tensor<T>,
    params: &SsmParams<T>,
    t: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if t >= params.steps() {
        return Err(Error::arg(format!("step {t} beyond {} parameter sets", params.steps())));
    }
    let (n, m) = params.check_step(t)?;
    if h_prev.len() != n || f.len() != m {
        return Err(Error::shape(format!(
            "state has {} entries and input {}, expected {n} and {m}",
            h_prev.len(),
            f.len()
        )));
    }
    let ah = params.a[t].matmul(&column(h_prev)?)?;
    let bf = params.b[t].matmul(&column(f)?)?;
    let h = ah.zip_map(&bf, |x, y| x + y)?.reshape([n])?;
    let y = params.c[t].matmul(&column(&h)?)?;
    let p = y.len();
    Ok((h, y.reshape([p])?))
}

/// Outputs `y_0 .. y_{T-1}` from a zero initial state.
pub fn ssm_unroll<T: Scalar>(frames: &[Tensor<T>], params: &SsmParams<T>) -> Result<Vec<Tensor<T>>> {
    params.validate()?;
    if frames.len() > params.steps() {
        return Err(Error::arg(format!("{} frames but {} parameter sets", frames.len(), params.steps())));
    }
    let Some(a0) = params.a.first() else {
        return Ok(Vec::new());
    };
    let mut h = Tensor::zeros([a0.shape()[0]])?;
    let mut out = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        let (next, y) = ssm_step(&h, f, params, t)?;
        h = next;
        out.push(y);
    }
    Ok(out)
}
