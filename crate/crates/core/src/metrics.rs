//! PSNR and SSIM on `[0, 1]` images.

use std::fmt;

use crate::data::Clip;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// PSNR reported when the inputs are identical (and upper bound otherwise).
pub const PSNR_CAP_DB: f64 = 99.0;

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorMode {
    Rgb,
    /// BT.601 luma of a 3-channel input.
    YChannel,
}

impl ColorMode {
    pub fn name(self) -> &'static str {
        match self {
            ColorMode::Rgb => "rgb",
            ColorMode::YChannel => "y_channel",
        }
    }
}

/// Luma planes `[.., 1, h, w]` of a `[.., 3, h, w]` tensor.
pub fn to_luma<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<f64>> {
    let r = x.rank();
    if r < 3 || x.shape()[r - 3] != 3 {
        return Err(Error::shape(format!("luma needs 3 channels, got {:?}", x.shape())));
    }
    let plane = x.shape()[r - 2] * x.shape()[r - 1];
    let frames = x.len() / (3 * plane);
    let d = x.data();
    let mut out = Vec::with_capacity(frames * plane);
    for f in 0..frames {
        let base = f * 3 * plane;
        for i in 0..plane {
            out.push(
                (0..3)
                    .map(|c| LUMA_WEIGHTS[c] * d[base + c * plane + i].to_f64().unwrap())
                    .sum(),
            );
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 3] = 1;
    Tensor::new(shape, out)
}

fn prepare<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: ColorMode) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("metric inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(match mode {
        ColorMode::Rgb => (a.cast(), b.cast()),
        ColorMode::YChannel => (to_luma(a)?, to_luma(b)?),
    })
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("mse inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    // running mean: a constant squared error is reproduced exactly
    let mut mean = 0.0;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let e = (x.to_f64().unwrap() - y.to_f64().unwrap()).powi(2);
        mean += (e - mean) / (i + 1) as f64;
    }
    Ok(mean)
}

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: ColorMode) -> Result<f64> {
    let (a, b) = prepare(a, b, mode)?;
    Ok(psnr_from_mse(mse(&a, &b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Separable "valid" Gaussian filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Gaussian-windowed SSIM averaged over all valid windows of every plane
/// (leading axes are treated as independent planes). Dynamic range is 1.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, params: SsimParams) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("ssim inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    let r = a.rank();
    if r < 2 {
        return Err(Error::shape("ssim needs at least [h, w]"));
    }
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    if params.window == 0 || h < params.window || w < params.window {
        return Err(Error::shape(format!(
            "frame {h}x{w} smaller than the {} pixel SSIM window",
            params.window
        )));
    }
    let taps = params.taps();
    let c1 = params.k1 * params.k1;
    let c2 = params.k2 * params.k2;
    let a: Tensor<f64> = a.cast();
    let b: Tensor<f64> = b.cast();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.data().chunks(plane).zip(b.data().chunks(plane)) {
        let xx: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_x = filter_valid(pa, h, w, &taps);
        let mu_y = filter_valid(pb, h, w, &taps);
        let e_xx = filter_valid(&xx, h, w, &taps);
        let e_yy = filter_valid(&yy, h, w, &taps);
        let e_xy = filter_valid(&xy, h, w, &taps);
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim_mode<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: ColorMode, params: SsimParams) -> Result<f64> {
    let (a, b) = prepare(a, b, mode)?;
    ssim(&a, &b, params)
}

/// Per-frame and clip-mean quality of a restored clip against ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mode: ColorMode,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl MetricsReport {
    pub fn compute(restored: &Clip, truth: &Clip, mode: ColorMode) -> Result<Self> {
        if restored.tensor().shape() != truth.tensor().shape() {
            return Err(Error::shape(format!(
                "restored {:?} vs ground truth {:?}",
                restored.tensor().shape(),
                truth.tensor().shape()
            )));
        }
        let mut psnrs = Vec::with_capacity(restored.len());
        let mut ssims = Vec::with_capacity(restored.len());
        for (r, t) in restored.frames().zip(truth.frames()) {
            psnrs.push(psnr(&r, &t, mode)?);
            ssims.push(ssim_mode(&r, &t, mode, SsimParams::default())?);
        }
        Ok(Self { mode, psnr: psnrs, ssim: ssims })
    }

    pub fn mean_psnr(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.ssim.iter().sum::<f64>() / self.ssim.len().max(1) as f64
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("color_mode={}\n", self.mode.name()));
        s.push_str(&format!("frames={}\n", self.psnr.len()));
        s.push_str(&format!("psnr_mean={:.6}\n", self.mean_psnr()));
        s.push_str(&format!("ssim_mean={:.6}\n", self.mean_ssim()));
        for (i, (p, q)) in self.psnr.iter().zip(&self.ssim).enumerate() {
            s.push_str(&format!("frame.{i}.psnr={p:.6}\nframe.{i}.ssim={q:.6}\n"));
        }
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frame  psnr(dB)  ssim     [{}]", self.mode.name())?;
        for (i, (p, q)) in self.psnr.iter().zip(&self.ssim).enumerate() {
            writeln!(f, "{i:>5}  {p:>8.3}  {q:.5}")?;
        }
        write!(f, " mean  {:>8.3}  {:.5}", self.mean_psnr(), self.mean_ssim())
    }
}
