//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: a shape and a contiguous buffer. Differentiation
//! lives in [`crate::autodiff`], which wraps tensors in graph nodes.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floating point element type of a tensor (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Finite stand-in for negative infinity in masked attention scores.
    /// `exp(NEG_INF - max)` underflows to exactly zero.
    const NEG_INF: Self;
    /// Byte width, also used as the precision code of the `TTEN` format.
    const PRECISION_CODE: u8;

    fn lit(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    const NEG_INF: Self = -1e9;
    const PRECISION_CODE: u8 = 4;

    fn lit(v: f64) -> Self {
        v as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const NEG_INF: Self = -1e30;
    const PRECISION_CODE: u8 = 8;

    fn lit(v: f64) -> Self {
        v
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Initial contents for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[low, high)` from a ChaCha8 stream seeded with `seed`.
    Uniform { low: f64, high: f64, seed: u64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

pub(crate) fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensor needs at least one dimension"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_extents(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn create(shape: impl Into<Vec<usize>>, init: Init) -> Result<Self> {
        let shape = shape.into();
        check_extents(&shape)?;
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Constant(v) => vec![T::lit(v); n],
            Init::Uniform { low, high, seed } => {
                if !(low < high) {
                    return Err(Error::arg(format!("empty uniform range [{low}, {high})")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::lit(rng.random_range(low..high))).collect()
            }
        };
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::create(shape, Init::Zeros)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        check_extents(&shape)?;
        let n = shape.iter().product();
        Ok(Self { shape, data: vec![value; n] })
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        check_extents(&shape)?;
        let n = shape.iter().product();
        Ok(Self { shape, data: (0..n).map(&mut f).collect() })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let i = flat_index(&self.shape, index);
        self.data[i] = value;
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.to_f64().unwrap())).collect(),
        }
    }

    /// Bit-for-bit equality of shape and contents.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.bits() == b.bits())
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Self {
        let r = self.rank();
        assert!(r >= 2, "transpose_last2 needs rank >= 2");
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.data.len() / (m * n);
        let mut out = Vec::with_capacity(self.data.len());
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            for j in 0..n {
                for i in 0..m {
                    out.push(src[i * n + j]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Self { shape, data: out }
    }

    /// Batched matrix product with broadcast leading dimensions.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (out, _) = matmul_forward(self, other)?;
        Ok(out)
    }
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut flat = 0;
    for (&d, &i) in shape.iter().zip(index) {
        assert!(i < d, "index {index:?} out of bounds for {shape:?}");
        flat = flat * d + i;
    }
    flat
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// NumPy-style broadcast of two shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of `src_shape`
/// broadcast to it.
pub(crate) fn broadcast_index_map(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - src_shape.len();
    let src_strides = strides(src_shape);
    let mut bstrides = vec![0; rank];
    for i in 0..src_shape.len() {
        if src_shape[i] != 1 {
            bstrides[i + offset] = src_strides[i];
        }
    }
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            flat += bstrides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            flat -= bstrides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

/// Sum `grad` (shaped like a broadcast result) back down to `shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let map = broadcast_index_map(shape, grad.shape());
    let mut out = vec![T::zero(); shape.iter().product()];
    for (g, &i) in grad.data().iter().zip(&map) {
        out[i] += *g;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m,n] (+)= a[m,k] * b[k,n]`, row-parallel for large products. Each output row
/// is produced by one thread in a fixed order, so results do not depend on the
/// thread count.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        // four rank-1 updates per pass over the output row; the additions stay in
        // the same left-to-right order as one update at a time
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        for (q, &av) in a_row.iter().enumerate().skip(p) {
            let b_row = &b[q * n..(q + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

pub(crate) struct MatmulLayout {
    pub batch_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_forward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, MatmulLayout)> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape(format!(
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch_shape = broadcast_shapes(&a.shape()[..ra - 2], &b.shape()[..rb - 2])?;
    let batch: usize = batch_shape.iter().product();
    let a_map = broadcast_index_map(&a.shape()[..ra - 2], &batch_shape);
    let b_map = broadcast_index_map(&b.shape()[..rb - 2], &batch_shape);
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch.max(1) {
        let (ai, bj) = if batch_shape.is_empty() { (0, 0) } else { (a_map[bi], b_map[bi]) };
        gemm(
            &a.data()[ai * m * k..(ai + 1) * m * k],
            &b.data()[bj * k * n..(bj + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = batch_shape.clone();
    shape.extend([m, n]);
    Ok((Tensor::from_parts(shape, out), MatmulLayout { batch_shape, m, k, n }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_zero_and_constant() {
        let z = Tensor::<f64>::create([2, 2], Init::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::<f64>::create([3], Init::Constant(1.0)).unwrap();
        assert_eq!(c.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_is_seed_deterministic() {
        let init = Init::Uniform { low: -1.0, high: 1.0, seed: 7 };
        let a = Tensor::<f32>::create([4], init).unwrap();
        let b = Tensor::<f32>::create([4], init).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = Tensor::<f32>::create([4], Init::Uniform { low: -1.0, high: 1.0, seed: 8 }).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn rejects_bad_extents() {
        assert!(Tensor::<f32>::zeros([2, 0]).is_err());
        assert!(Tensor::<f32>::zeros(Vec::new()).is_err());
        assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn matmul_identity_and_sum() {
        let a = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&i).unwrap().data(), a.data());
        let r = Tensor::<f64>::full([1, 2], 1.0).unwrap();
        let c = Tensor::<f64>::full([2, 1], 1.0).unwrap();
        let p = r.matmul(&c).unwrap();
        assert_eq!(p.shape(), &[1, 1]);
        assert_eq!(p.data(), &[2.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros([2, 3]).unwrap();
        let b = Tensor::<f64>::zeros([2, 3]).unwrap();
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn broadcast_map_repeats_rows() {
        let map = broadcast_index_map(&[1, 3], &[2, 3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
        let map = broadcast_index_map(&[2, 1], &[2, 3]);
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert!(broadcast_shapes(&[2, 3], &[4, 3]).is_err());
    }
}
