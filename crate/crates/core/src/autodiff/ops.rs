use std::borrow::Cow;
use std::rc::Rc;

use super::{count_macs, Var};
use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_index_map, broadcast_shapes, gemm, matmul_forward, reduce_to_shape, strides, Scalar,
    Tensor,
};

/// Spatial padding applied symmetrically on the last two axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zeros(usize),
    Reflect(usize),
}

impl Padding {
    pub fn amount(self) -> usize {
        match self {
            Padding::Zeros(p) | Padding::Reflect(p) => p,
        }
    }
}

/// Attention score selection: keep the top `k` keys per query, or all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopkMode {
    Topk,
    DenseSoftmax,
}

const ZERO_FILL: usize = usize::MAX;

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::arg(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Index arithmetic shared by the permuting ops.
fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let pstrides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            flat += pstrides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            flat -= pstrides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    (out_shape, map)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

impl<T: Scalar> Var<T> {
    // ---- elementwise -------------------------------------------------------

    fn binary(
        &self,
        other: &Self,
        op: &'static str,
        f: fn(T, T) -> T,
        df: fn(T, T, T) -> (T, T),
    ) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        if a.shape() == b.shape() {
            let value = a.zip_map(b, f)?;
            return Var::custom(op, vec![self.clone(), other.clone()], value, move |g, p, _| {
                let (a, b) = (p[0].value().data(), p[1].value().data());
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(g.len());
                for ((&gi, &x), &y) in g.data().iter().zip(a).zip(b) {
                    let (da, db) = df(x, y, gi);
                    ga.push(da);
                    gb.push(db);
                }
                let shape = g.shape().to_vec();
                vec![
                    Some(Tensor::from_parts(shape.clone(), ga)),
                    Some(Tensor::from_parts(shape, gb)),
                ]
            });
        }
        let out_shape = broadcast_shapes(a.shape(), b.shape())?;
        let amap = Rc::new(broadcast_index_map(a.shape(), &out_shape));
        let bmap = Rc::new(broadcast_index_map(b.shape(), &out_shape));
        let data = amap
            .iter()
            .zip(bmap.iter())
            .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
            .collect();
        let value = Tensor::from_parts(out_shape.clone(), data);
        Var::custom(op, vec![self.clone(), other.clone()], value, move |g, p, _| {
            let (a, b) = (p[0].value(), p[1].value());
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Vec::with_capacity(g.len());
            for ((&gi, &i), &j) in g.data().iter().zip(amap.iter()).zip(bmap.iter()) {
                let (da, db) = df(a.data()[i], b.data()[j], gi);
                ga.push(da);
                gb.push(db);
            }
            let ga = Tensor::from_parts(out_shape.clone(), ga);
            let gb = Tensor::from_parts(out_shape.clone(), gb);
            vec![Some(reduce_to_shape(&ga, a.shape())), Some(reduce_to_shape(&gb, b.shape()))]
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(other, "div", |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)))
    }

    /// `f` maps input to output, `df(x, y)` is the derivative at input `x` with output `y`.
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Self> {
        let value = self.value().map(f);
        Var::custom(op, vec![self.clone()], value, move |g, p, y| {
            let x = p[0].value();
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        let c = T::lit(c);
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Self> {
        let c = T::lit(c);
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn neg(&self) -> Result<Self> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn abs(&self) -> Result<Self> {
        self.unary("abs", |x| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Self> {
        let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let a = T::lit(0.044715);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
            },
        )
    }

    /// Split `axis` into two halves and multiply them elementwise.
    pub fn gate(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        if len % 2 != 0 {
            return Err(Error::shape(format!("gate needs an even extent on axis {axis}, got {len}")));
        }
        let half = len / 2;
        let x = self.value().data();
        let mut data = Vec::with_capacity(outer * half * inner);
        for o in 0..outer {
            let base = o * len * inner;
            for j in 0..half * inner {
                data.push(x[base + j] * x[base + half * inner + j]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = half;
        let value = Tensor::from_parts(shape, data);
        Var::custom("gate", vec![self.clone()], value, move |g, p, _| {
            let x = p[0].value().data();
            let mut dx = vec![T::zero(); x.len()];
            for o in 0..outer {
                let base = o * len * inner;
                for j in 0..half * inner {
                    let gi = g.data()[o * half * inner + j];
                    dx[base + j] = gi * x[base + half * inner + j];
                    dx[base + half * inner + j] = gi * x[base + j];
                }
            }
            vec![Some(Tensor::from_parts(p[0].shape().to_vec(), dx))]
        })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self) -> Result<Self> {
        let value = Tensor::scalar(self.value().sum());
        Var::custom("sum", vec![self.clone()], value, |g, p, _| {
            vec![Some(Tensor::full(p[0].shape().to_vec(), g.item()).unwrap())]
        })
    }

    pub fn mean(&self) -> Result<Self> {
        let n = T::lit(self.value().len() as f64);
        let value = Tensor::scalar(self.value().sum() / n);
        Var::custom("mean", vec![self.clone()], value, move |g, p, _| {
            vec![Some(Tensor::full(p[0].shape().to_vec(), g.item() / n).unwrap())]
        })
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (value, layout) = matmul_forward(self.value(), other.value())?;
        let batch = layout.batch_shape.iter().product::<usize>().max(1);
        count_macs((batch * layout.m * layout.k * layout.n) as u64);
        Var::custom("matmul", vec![self.clone(), other.clone()], value, |g, p, _| {
            let (a, b) = (p[0].value(), p[1].value());
            let ga = p[0].requires_grad().then(|| {
                let (full, _) = matmul_forward(g, &b.transpose_last2()).unwrap();
                reduce_to_shape(&full, a.shape())
            });
            let gb = p[1].requires_grad().then(|| {
                let (full, _) = matmul_forward(&a.transpose_last2(), g).unwrap();
                reduce_to_shape(&full, b.shape())
            });
            vec![ga, gb]
        })
    }

    // ---- data movement -----------------------------------------------------

    /// `out[i] = in[map[i]]`, or zero where `map[i] == ZERO_FILL`.
    fn gather(&self, op: &'static str, out_shape: Vec<usize>, map: Vec<usize>) -> Result<Self> {
        let x = self.value().data();
        let data = map
            .iter()
            .map(|&i| if i == ZERO_FILL { T::zero() } else { x[i] })
            .collect();
        let value = Tensor::from_parts(out_shape, data);
        let map = Rc::new(map);
        Var::custom(op, vec![self.clone()], value, move |g, p, _| {
            let mut dx = vec![T::zero(); p[0].value().len()];
            for (&gi, &i) in g.data().iter().zip(map.iter()) {
                if i != ZERO_FILL {
                    dx[i] += gi;
                }
            }
            vec![Some(Tensor::from_parts(p[0].shape().to_vec(), dx))]
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let value = self.value().reshape(shape)?;
        Var::custom("reshape", vec![self.clone()], value, |g, p, _| {
            vec![Some(g.reshape(p[0].shape().to_vec()).unwrap())]
        })
    }

    pub fn transpose(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.shape().len();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..rank).collect::<Vec<_>>() {
            return Err(Error::arg(format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let (out_shape, map) = permute_map(self.shape(), perm);
        self.gather("transpose", out_shape, map)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let (outer, extent, inner) = split_axis(self.shape(), axis)?;
        if len == 0 || start + len > extent {
            return Err(Error::arg(format!(
                "narrow [{start}, {}) outside extent {extent}",
                start + len
            )));
        }
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            map.extend(base..base + len * inner);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        self.gather("narrow", shape, map)
    }

    /// Pad the last two axes.
    pub fn pad2d(&self, top: usize, bottom: usize, left: usize, right: usize, reflect_mode: bool) -> Result<Self> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::shape("pad2d needs rank >= 2"));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        if reflect_mode && (top >= h || bottom >= h || left >= w || right >= w) {
            return Err(Error::shape(format!(
                "reflect padding ({top},{bottom},{left},{right}) too large for {h}x{w}"
            )));
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let planes: usize = shape[..r - 2].iter().product();
        let mut map = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            for y in 0..oh {
                let sy = y as isize - top as isize;
                for x in 0..ow {
                    let sx = x as isize - left as isize;
                    let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                    map.push(if inside {
                        pl * h * w + sy as usize * w + sx as usize
                    } else if reflect_mode {
                        pl * h * w + reflect(sy, h) * w + reflect(sx, w)
                    } else {
                        ZERO_FILL
                    });
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        self.gather("pad2d", out_shape, map)
    }

    /// Window `[top, top+h) x [left, left+w)` of the last two axes.
    pub fn crop2d(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("crop2d needs rank >= 2"));
        }
        self.narrow(r - 2, top, h)?.narrow(r - 1, left, w)
    }

    /// `[.., c, h, w] -> [.., c*r*r, h/r, w/r]`.
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Self> {
        let shape = self.shape();
        let rank = shape.len();
        if rank < 3 || r == 0 || !shape[rank - 2].is_multiple_of(r) || !shape[rank - 1].is_multiple_of(r) {
            return Err(Error::shape(format!("pixel_unshuffle({r}) on {shape:?}")));
        }
        let (c, h, w) = (shape[rank - 3], shape[rank - 2], shape[rank - 1]);
        let (oh, ow) = (h / r, w / r);
        let lead: usize = shape[..rank - 3].iter().product();
        let mut map = Vec::with_capacity(self.value().len());
        for b in 0..lead {
            for ci in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        for y in 0..oh {
                            for x in 0..ow {
                                map.push(((b * c + ci) * h + y * r + i) * w + x * r + j);
                            }
                        }
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[rank - 3] = c * r * r;
        out_shape[rank - 2] = oh;
        out_shape[rank - 1] = ow;
        self.gather("pixel_unshuffle", out_shape, map)
    }

    /// `[.., c*r*r, h, w] -> [.., c, h*r, w*r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Self> {
        let shape = self.shape();
        let rank = shape.len();
        if rank < 3 || r == 0 || !shape[rank - 3].is_multiple_of(r * r) {
            return Err(Error::shape(format!("pixel_shuffle({r}) on {shape:?}")));
        }
        let (cr, h, w) = (shape[rank - 3], shape[rank - 2], shape[rank - 1]);
        let c = cr / (r * r);
        let (oh, ow) = (h * r, w * r);
        let lead: usize = shape[..rank - 3].iter().product();
        let mut map = Vec::with_capacity(self.value().len());
        for b in 0..lead {
            for ci in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let src_c = ci * r * r + (y % r) * r + x % r;
                        map.push(((b * cr + src_c) * h + y / r) * w + x / r);
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[rank - 3] = c;
        out_shape[rank - 2] = oh;
        out_shape[rank - 1] = ow;
        self.gather("pixel_shuffle", out_shape, map)
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let rank = first.shape().len();
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == rank
                && (0..rank).all(|i| i == axis || s[i] == first.shape()[i]);
            if !compatible || axis >= rank {
                return Err(Error::shape(format!(
                    "concat on axis {axis}: {:?} vs {s:?}",
                    first.shape()
                )));
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(first.shape(), axis)?;
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&p.value().data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        Var::custom("concat", parts.to_vec(), value, move |g, p, _| {
            let mut out = Vec::with_capacity(p.len());
            let mut offset = 0;
            for (part, &e) in p.iter().zip(&extents) {
                if part.requires_grad() {
                    let mut d = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + e * inner]);
                    }
                    out.push(Some(Tensor::from_parts(part.shape().to_vec(), d)));
                } else {
                    out.push(None);
                }
                offset += e;
            }
            out
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let lifted = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend_from_slice(p.shape());
                p.reshape(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::concat(&lifted, 0)
    }

    // ---- normalization and attention ----------------------------------------

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        let x = self.value().data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(x[idx(j)]));
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::from_parts(self.shape().to_vec(), y);
        Var::custom("softmax", vec![self.clone()], value, move |g, p, y| {
            let (g, y) = (g.data(), y.data());
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(p[0].shape().to_vec(), dx))]
        })
    }

    /// Keep the `k` largest entries of every lane along `axis`, replacing the rest
    /// with [`Scalar::NEG_INF`]. Ties go to the lower index.
    pub fn topk_mask(&self, k: usize, axis: usize) -> Result<Self> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        if k == 0 || k > len {
            return Err(Error::arg(format!("top-k with k={k} on an axis of extent {len}")));
        }
        if k == len {
            let value = self.value().clone();
            return Var::custom("topk_mask", vec![self.clone()], value, |g, _, _| {
                vec![Some(g.clone())]
            });
        }
        let x = self.value().data();
        let mut keep = vec![false; x.len()];
        let mut order: Vec<usize> = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                order.clear();
                order.extend(0..len);
                order.sort_by(|&a, &b| {
                    x[idx(b)]
                        .partial_cmp(&x[idx(a)])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                for &j in &order[..k] {
                    keep[idx(j)] = true;
                }
            }
        }
        let data = x
            .iter()
            .zip(&keep)
            .map(|(&v, &kept)| if kept { v } else { T::NEG_INF })
            .collect();
        let value = Tensor::from_parts(self.shape().to_vec(), data);
        let keep = Rc::new(keep);
        Var::custom("topk_mask", vec![self.clone()], value, move |g, _, _| {
            let data = g
                .data()
                .iter()
                .zip(keep.iter())
                .map(|(&gi, &kept)| if kept { gi } else { T::zero() })
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    /// Normalize every lane along `axis` to zero mean and unit variance, then apply
    /// per-position `gain` and `bias` (both shaped `[extent(axis)]`).
    pub fn layer_norm(&self, gain: &Self, bias: &Self, axis: usize, eps: f64) -> Result<Self> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        same_shape(gain.shape(), &[len], "layer_norm gain")?;
        same_shape(bias.shape(), &[len], "layer_norm bias")?;
        let eps = T::lit(eps);
        let n = T::lit(len as f64);
        let x = self.value().data();
        let (gv, bv) = (gain.value().data(), bias.value().data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| x[idx(j)]).sum::<T>() / n;
                let var = (0..len).map(|j| (x[idx(j)] - mean).powi(2)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..len {
                    let xh = (x[idx(j)] - mean) * r;
                    xhat[idx(j)] = xh;
                    y[idx(j)] = xh * gv[j] + bv[j];
                }
            }
        }
        let value = Tensor::from_parts(self.shape().to_vec(), y);
        let (xhat, rstd) = (Rc::new(xhat), Rc::new(rstd));
        Var::custom(
            "layer_norm",
            vec![self.clone(), gain.clone(), bias.clone()],
            value,
            move |g, p, _| {
                let g = g.data();
                let gv = p[1].value().data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dg = vec![T::zero(); len];
                let mut db = vec![T::zero(); len];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..len {
                            let d = g[idx(j)] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[idx(j)];
                            dg[j] += g[idx(j)] * xhat[idx(j)];
                            db[j] += g[idx(j)];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let r = rstd[o * inner + i];
                        for j in 0..len {
                            let d = g[idx(j)] * gv[j];
                            dx[idx(j)] = r * (d - mean_d - xhat[idx(j)] * mean_dx);
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(p[0].shape().to_vec(), dx)),
                    Some(Tensor::from_parts(vec![len], dg)),
                    Some(Tensor::from_parts(vec![len], db)),
                ]
            },
        )
    }

    /// Scale every lane along `axis` to unit Euclidean norm (`x / sqrt(|x|^2 + eps)`).
    pub fn l2_normalize(&self, axis: usize, eps: f64) -> Result<Self> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        let eps = T::lit(eps);
        let x = self.value().data();
        let mut norms = vec![T::zero(); outer * inner];
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let norm = ((0..len).map(|j| x[idx(j)] * x[idx(j)]).sum::<T>() + eps).sqrt();
                norms[o * inner + i] = norm;
                for j in 0..len {
                    y[idx(j)] = x[idx(j)] / norm;
                }
            }
        }
        let value = Tensor::from_parts(self.shape().to_vec(), y);
        let norms = Rc::new(norms);
        Var::custom("l2_normalize", vec![self.clone()], value, move |g, p, y| {
            let (g, y) = (g.data(), y.data());
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    let norm = norms[o * inner + i];
                    for j in 0..len {
                        dx[idx(j)] = (g[idx(j)] - y[idx(j)] * dot) / norm;
                    }
                }
            }
            vec![Some(Tensor::from_parts(p[0].shape().to_vec(), dx))]
        })
    }

    // ---- convolution ---------------------------------------------------------

    /// 2-D cross-correlation. `self` is `[c_in, h, w]` or `[n, c_in, h, w]`,
    /// `weight` is `[c_out, c_in / groups, kh, kw]`, `bias` is `[c_out]`.
    pub fn conv2d(
        &self,
        weight: &Self,
        bias: Option<&Self>,
        stride: usize,
        padding: Padding,
        groups: usize,
    ) -> Result<Self> {
        match padding {
            Padding::Reflect(p) if p > 0 => {
                let padded = self.pad2d(p, p, p, p, true)?;
                padded.conv2d_zero_pad(weight, bias, stride, 0, groups)
            }
            _ => self.conv2d_zero_pad(weight, bias, stride, padding.amount(), groups),
        }
    }

    fn conv2d_zero_pad(
        &self,
        weight: &Self,
        bias: Option<&Self>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let geo = ConvGeometry::new(self.shape(), weight.shape(), stride, pad, groups)?;
        if let Some(b) = bias {
            same_shape(b.shape(), &[geo.c_out], "conv2d bias")?;
        }
        let x = self.value().data();
        let w = weight.value().data();
        let mut out = vec![T::zero(); geo.batch * geo.c_out * geo.plane_out()];
        for nb in 0..geo.batch {
            for gi in 0..groups {
                let cols = geo.im2col(geo.group_input(x, nb, gi));
                let out_g = geo.group_output_mut(&mut out, nb, gi);
                gemm(geo.group_weight(w, gi), &cols, out_g, geo.cog, geo.k(), geo.plane_out());
            }
        }
        if let Some(b) = bias {
            let b = b.value().data();
            for (ch, plane) in out.chunks_mut(geo.plane_out()).enumerate() {
                let bv = b[ch % geo.c_out];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        count_macs((geo.batch * geo.c_out * geo.plane_out() * geo.k()) as u64);
        let value = Tensor::from_parts(geo.out_shape(self.shape().len()), out);
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Var::custom("conv2d", parents, value, move |g, p, _| {
            let x = p[0].value().data();
            let w = p[1].value().data();
            let g = g.data();
            let want_x = p[0].requires_grad();
            let want_w = p[1].requires_grad();
            let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
            let mut dw = want_w.then(|| vec![T::zero(); w.len()]);
            let plane = geo.plane_out();
            for nb in 0..geo.batch {
                for gi in 0..groups {
                    let start = (nb * geo.c_out + gi * geo.cog) * plane;
                    let g_g = &g[start..start + geo.cog * plane];
                    if let Some(dw) = dw.as_mut() {
                        let cols = geo.im2col(geo.group_input(x, nb, gi));
                        let cols_t = transpose(&cols, geo.k(), plane);
                        let k = geo.k();
                        gemm(g_g, &cols_t, &mut dw[gi * geo.cog * k..(gi + 1) * geo.cog * k], geo.cog, plane, k);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let w_t = transpose(geo.group_weight(w, gi), geo.cog, geo.k());
                        let mut dcols = vec![T::zero(); geo.k() * plane];
                        gemm(&w_t, g_g, &mut dcols, geo.k(), geo.cog, plane);
                        geo.col2im(&dcols, geo.group_input_mut(dx, nb, gi));
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(p[0].shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(p[1].shape().to_vec(), d)),
            ];
            if p.len() == 3 {
                let mut db = vec![T::zero(); geo.c_out];
                for (ch, plane_g) in g.chunks(plane).enumerate() {
                    db[ch % geo.c_out] += plane_g.iter().copied().sum::<T>();
                }
                grads.push(Some(Tensor::from_parts(vec![geo.c_out], db)));
            }
            grads
        })
    }
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cg: usize,
    cog: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        let (batch, c_in, h, wd) = match *x {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(format!("conv2d input must be rank 3 or 4, got {x:?}"))),
        };
        let [c_out, cg, kh, kw] = *w else {
            return Err(Error::shape(format!("conv2d weight must be rank 4, got {w:?}")));
        };
        if groups == 0 || stride == 0 || c_in % groups != 0 || c_out % groups != 0 || cg != c_in / groups {
            return Err(Error::shape(format!(
                "conv2d channels: input {c_in}, weight {w:?}, groups {groups}, stride {stride}"
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        Ok(Self { batch, c_in, h, w: wd, c_out, cg, cog: c_out / groups, kh, kw, stride, pad, oh, ow })
    }

    fn k(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.oh * self.ow
    }

    fn out_shape(&self, rank: usize) -> Vec<usize> {
        if rank == 3 {
            vec![self.c_out, self.oh, self.ow]
        } else {
            vec![self.batch, self.c_out, self.oh, self.ow]
        }
    }

    fn group_range(&self, nb: usize, gi: usize) -> std::ops::Range<usize> {
        let start = (nb * self.c_in + gi * self.cg) * self.h * self.w;
        start..start + self.cg * self.h * self.w
    }

    fn group_input<'a, T>(&self, x: &'a [T], nb: usize, gi: usize) -> &'a [T] {
        &x[self.group_range(nb, gi)]
    }

    fn group_input_mut<'a, T>(&self, x: &'a mut [T], nb: usize, gi: usize) -> &'a mut [T] {
        let r = self.group_range(nb, gi);
        &mut x[r]
    }

    fn group_weight<'a, T>(&self, w: &'a [T], gi: usize) -> &'a [T] {
        let k = self.k();
        &w[gi * self.cog * k..(gi + 1) * self.cog * k]
    }

    fn group_output_mut<'a, T>(&self, out: &'a mut [T], nb: usize, gi: usize) -> &'a mut [T] {
        let plane = self.plane_out();
        let start = (nb * self.c_out + gi * self.cog) * plane;
        &mut out[start..start + self.cog * plane]
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// `[cg, h, w] -> [cg*kh*kw, oh*ow]`.
    fn im2col<'a, T: Scalar>(&self, x: &'a [T]) -> Cow<'a, [T]> {
        if self.is_pointwise() {
            return Cow::Borrowed(x);
        }
        let plane = self.plane_out();
        let mut cols = vec![T::zero(); self.k() * plane];
        for c in 0..self.cg {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Cow::Owned(cols)
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        if self.is_pointwise() {
            for (d, &c) in dx.iter_mut().zip(cols) {
                *d += c;
            }
            return;
        }
        let plane = self.plane_out();
        for c in 0..self.cg {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dx[(c * self.h + iy as usize) * self.w + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
