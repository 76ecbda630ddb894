#![allow(dead_code)]

use turtle_core::chm::chm_specs;
use turtle_core::nn::{ParamStore, PatchGrid};
use turtle_core::{Init, Tensor};

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape.to_vec(), Init::Uniform { low: -1.0, high: 1.0, seed }).unwrap()
}

pub fn identity(d: usize) -> Tensor<f64> {
    Tensor::from_fn([d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }).unwrap()
}

/// A `[c, nh*p1, nw*p2]` frame whose patches are distinct random unit vectors,
/// so that under identity projections each patch scores highest against itself.
pub fn unit_patch_frame(c: usize, nh: usize, nw: usize, grid: PatchGrid, seed: u64) -> Tensor<f64> {
    let (h, w) = (nh * grid.p1, nw * grid.p2);
    let raw = uniform(&[c, h, w], seed);
    let mut out = raw.clone();
    for i in 0..nh {
        for j in 0..nw {
            let cells: Vec<[usize; 3]> = (0..c)
                .flat_map(|ch| (0..grid.p1).flat_map(move |u| (0..grid.p2).map(move |v| [ch, i * grid.p1 + u, j * grid.p2 + v])))
                .collect();
            let norm = cells.iter().map(|ix| raw.get(ix).powi(2)).sum::<f64>().sqrt();
            for ix in &cells {
                out.set(ix, raw.get(ix) / norm);
            }
        }
    }
    out
}

/// Circular shift of a `[c, h, w]` map so that row `y` takes row `y + dy`.
pub fn roll_up(f: &Tensor<f64>, dy: usize) -> Tensor<f64> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        f.get(&[ch, (y + dy) % h, x])
    })
    .unwrap()
}

/// Parameters of one history block with identity alignment projections.
pub fn identity_alignment_params(c: usize, grid: PatchGrid, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::<f64>::init(&chm_specs("chm", c, grid), seed).unwrap();
    let d = grid.patch_dim(c);
    for name in ["w_q", "w_k", "w_v", "w_o"] {
        store.set(&format!("chm.sab.{name}"), identity(d)).unwrap();
    }
    store
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}
