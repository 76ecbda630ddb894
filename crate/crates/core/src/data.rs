//! Clips, augmentation, synthetic degradations and the L1 objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Derive an independent seed for stream `stream` of a run seeded with `master`
/// (one SplitMix64 step over the mixed pair).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A frame sequence `[t, c, h, w]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    frames: Tensor<f32>,
    pub fps: Option<f32>,
}

impl Clip {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::shape(format!("clip must be [t,c,h,w], got {:?}", frames.shape())));
        }
        Ok(Self { frames, fps: None })
    }

    pub fn from_frames(frames: &[Tensor<f32>]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::arg("clip needs at least one frame"))?;
        if first.rank() != 3 {
            return Err(Error::shape(format!("frame must be [c,h,w], got {:?}", first.shape())));
        }
        let mut data = Vec::with_capacity(first.len() * frames.len());
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != first.shape() {
                return Err(Error::shape(format!(
                    "frame {i} is {:?}, expected {:?}",
                    f.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(f.data());
        }
        let mut shape = vec![frames.len()];
        shape.extend_from_slice(first.shape());
        Self::new(Tensor::new(shape, data)?)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(c, h, w)` of every frame.
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn frame(&self, t: usize) -> Tensor<f32> {
        let (c, h, w) = self.frame_shape();
        let n = c * h * w;
        Tensor::from_parts(vec![c, h, w], self.frames.data()[t * n..(t + 1) * n].to_vec())
    }

    pub fn frames(&self) -> impl Iterator<Item = Tensor<f32>> + '_ {
        (0..self.len()).map(|t| self.frame(t))
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::arg(format!("frames [{start}, {}) of a {}-frame clip", start + len, self.len())));
        }
        let frames: Vec<_> = (start..start + len).map(|t| self.frame(t)).collect();
        let mut out = Self::from_frames(&frames)?;
        out.fps = self.fps;
        Ok(out)
    }

    pub fn clamped(&self) -> Self {
        Self { frames: self.frames.map(|v| v.clamp(0.0, 1.0)), fps: self.fps }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        self.frames.cast()
    }
}

/// Consecutive non-overlapping clips of `gamma` frames; a shorter trailing clip
/// keeps any remainder.
pub fn sample_clips(video: &Clip, gamma: usize) -> Result<Vec<Clip>> {
    if gamma == 0 {
        return Err(Error::arg("clip length must be at least 1"));
    }
    if video.is_empty() {
        return Err(Error::arg("empty video"));
    }
    (0..video.len())
        .step_by(gamma)
        .map(|start| video.slice(start, gamma.min(video.len() - start)))
        .collect()
}

/// One of the eight flips/rotations of the square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral(pub u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    fn transposes(self) -> bool {
        self.0 & 4 != 0
    }

    /// Source pixel for output pixel `(y, x)` of an output frame `oh x ow`.
    fn source(self, y: usize, x: usize, oh: usize, ow: usize) -> (usize, usize) {
        let y = if self.0 & 2 != 0 { oh - 1 - y } else { y };
        let x = if self.0 & 1 != 0 { ow - 1 - x } else { x };
        if self.transposes() {
            (x, y)
        } else {
            (y, x)
        }
    }
}

/// Random `size x size` crop plus a random flip/rotation, identical for every
/// frame of the clip. Deterministic in `seed`.
pub fn crop_augment(clip: &Clip, size: usize, seed: u64, augment: bool) -> Result<Clip> {
    let (_, h, w) = clip.frame_shape();
    if size == 0 || size > h || size > w {
        return Err(Error::arg(format!("crop {size} does not fit {h}x{w} frames")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let t = if augment { Dihedral(rng.random_range(0..8)) } else { Dihedral::IDENTITY };
    Ok(transform_clip(clip, top, left, size, t))
}

pub(crate) fn transform_clip(clip: &Clip, top: usize, left: usize, size: usize, t: Dihedral) -> Clip {
    let (c, h, w) = clip.frame_shape();
    let src = clip.tensor().data();
    let mut data = Vec::with_capacity(clip.len() * c * size * size);
    for f in 0..clip.len() {
        for ch in 0..c {
            let plane = &src[(f * c + ch) * h * w..][..h * w];
            for y in 0..size {
                for x in 0..size {
                    let (sy, sx) = t.source(y, x, size, size);
                    data.push(plane[(top + sy) * w + left + sx]);
                }
            }
        }
    }
    Clip {
        frames: Tensor::from_parts(vec![clip.len(), c, size, size], data),
        fps: clip.fps,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// White Gaussian noise with standard deviation drawn once per video from
    /// `U[sigma_min, sigma_max]`, in 8-bit units.
    GaussianNoise { sigma_min: f64, sigma_max: f64 },
    /// Every frame replaced by the mean of `window` frames centered on it.
    AverageBlur { window: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn noise(sigma_min: f64, sigma_max: f64, seed: u64) -> Self {
        Self { kind: Degradation::GaussianNoise { sigma_min, sigma_max }, seed }
    }

    pub fn blur(window: usize, seed: u64) -> Self {
        Self { kind: Degradation::AverageBlur { window }, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            Degradation::GaussianNoise { sigma_min, sigma_max } => {
                if !(0.0..=255.0).contains(&sigma_min)
                    || !(0.0..=255.0).contains(&sigma_max)
                    || sigma_min > sigma_max
                {
                    return Err(Error::arg(format!(
                        "noise range [{sigma_min}, {sigma_max}] must lie within [0, 255]"
                    )));
                }
            }
            Degradation::AverageBlur { window } => {
                if window < 3 || window % 2 == 0 {
                    return Err(Error::arg(format!("blur window must be odd and >= 3, got {window}")));
                }
            }
        }
        Ok(())
    }
}

/// Apply a synthetic degradation. For noise, returns the sigma that was drawn.
pub fn degrade_with_sigma(clip: &Clip, spec: &DegradationSpec) -> Result<(Clip, Option<f64>)> {
    spec.validate()?;
    match spec.kind {
        Degradation::GaussianNoise { sigma_min, sigma_max } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let sigma = if sigma_min == sigma_max {
                sigma_min
            } else {
                rng.random_range(sigma_min..sigma_max)
            };
            let std = sigma / 255.0;
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let src = clip.tensor();
            let data = src
                .data()
                .iter()
                .map(|&v| (v as f64 + std * normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                .collect();
            let frames = Tensor::from_parts(src.shape().to_vec(), data);
            Ok((Clip { frames, fps: clip.fps }, Some(sigma)))
        }
        Degradation::AverageBlur { window } => {
            let r = (window / 2) as isize;
            let n = clip.len() as isize;
            let frames: Vec<Tensor<f32>> = clip.frames().collect();
            let out: Vec<Tensor<f32>> = (0..n)
                .map(|t| {
                    let mut acc = vec![0.0f64; frames[0].len()];
                    for o in -r..=r {
                        let src = &frames[(t + o).clamp(0, n - 1) as usize];
                        for (a, &v) in acc.iter_mut().zip(src.data()) {
                            *a += v as f64;
                        }
                    }
                    let data = acc.into_iter().map(|a| (a / window as f64) as f32).collect();
                    Tensor::from_parts(frames[0].shape().to_vec(), data)
                })
                .collect();
            let mut blurred = Clip::from_frames(&out)?;
            blurred.fps = clip.fps;
            Ok((blurred, None))
        }
    }
}

pub fn degrade(clip: &Clip, spec: &DegradationSpec) -> Result<Clip> {
    Ok(degrade_with_sigma(clip, spec)?.0)
}

/// Mean absolute error over all elements.
pub fn l1_loss<T: Scalar>(pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "l1 loss between {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    pred.sub(target)?.abs()?.mean()
}

/// Smooth synthetic video: drifting Gaussian blobs over a moving sinusoidal
/// background, values within `[0.1, 0.9]`.
pub fn synthetic_video(frames: usize, channels: usize, height: usize, width: usize, seed: u64) -> Result<Clip> {
    if frames == 0 {
        return Err(Error::arg("synthetic video needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Blob {
        y: f64,
        x: f64,
        vy: f64,
        vx: f64,
        radius: f64,
        color: Vec<f64>,
    }
    let blobs: Vec<Blob> = (0..3)
        .map(|_| Blob {
            y: rng.random_range(0.0..height as f64),
            x: rng.random_range(0.0..width as f64),
            vy: rng.random_range(-1.5..1.5),
            vx: rng.random_range(-1.5..1.5),
            radius: rng.random_range(0.12..0.3) * height.min(width) as f64,
            color: (0..channels).map(|_| rng.random_range(-0.35..0.35)).collect(),
        })
        .collect();
    let freq_y = rng.random_range(0.5..2.0) * std::f64::consts::TAU / height as f64;
    let freq_x = rng.random_range(0.5..2.0) * std::f64::consts::TAU / width as f64;
    let drift = rng.random_range(-0.3..0.3);
    let base: Vec<f64> = (0..channels).map(|_| rng.random_range(0.35..0.65)).collect();
    let phase: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();

    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let tf = t as f64;
        let frame = Tensor::from_fn(vec![channels, height, width], |i| {
            let c = i / (height * width);
            let y = ((i / width) % height) as f64;
            let x = (i % width) as f64;
            let mut v = base[c] + 0.12 * (freq_y * y + freq_x * x + phase[c] + drift * tf).sin();
            for b in &blobs {
                let dy = y - (b.y + b.vy * tf);
                let dx = x - (b.x + b.vx * tf);
                v += b.color[c] * (-(dy * dy + dx * dx) / (2.0 * b.radius * b.radius)).exp();
            }
            v.clamp(0.1, 0.9) as f32
        })?;
        out.push(frame);
    }
    Clip::from_frames(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_clip(t: usize, c: usize, h: usize, w: usize) -> Clip {
        let n = t * c * h * w;
        Clip::new(Tensor::from_fn(vec![t, c, h, w], |i| i as f32 / n as f32).unwrap()).unwrap()
    }

    #[test]
    fn sample_clips_counts() {
        let v = ramp_clip(10, 1, 2, 2);
        assert_eq!(sample_clips(&v, 5).unwrap().len(), 2);
        let v7 = ramp_clip(7, 1, 2, 2);
        let clips = sample_clips(&v7, 5).unwrap();
        assert_eq!(clips.iter().map(Clip::len).collect::<Vec<_>>(), vec![5, 2]);
        assert_eq!(clips[1].frame(0), v7.frame(5));
        let v5 = ramp_clip(5, 1, 2, 2);
        let one = sample_clips(&v5, 5).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], v5);
        assert!(sample_clips(&v5, 0).is_err());
    }

    #[test]
    fn reshaped_video_covers_every_frame_once() {
        let v = ramp_clip(13, 1, 2, 2);
        let clips = sample_clips(&v, 5).unwrap();
        let joined: Vec<Tensor<f32>> = clips.iter().flat_map(|c| c.frames().collect::<Vec<_>>()).collect();
        assert_eq!(joined.len(), 13);
        for (t, f) in joined.iter().enumerate() {
            assert_eq!(*f, v.frame(t));
        }
    }

    #[test]
    fn crop_is_deterministic_and_identity_at_full_size() {
        let v = ramp_clip(3, 2, 8, 8);
        assert_eq!(crop_augment(&v, 5, 11, true).unwrap(), crop_augment(&v, 5, 11, true).unwrap());
        assert_eq!(crop_augment(&v, 8, 11, false).unwrap(), v);
        assert!(crop_augment(&v, 9, 1, false).is_err());
    }

    #[test]
    fn crop_offset_shared_across_frames() {
        // a marker pixel at the same spot in every frame must land at the same
        // output position in every frame
        let (t, h, w) = (4, 12, 12);
        let mut data = vec![0.0f32; t * h * w];
        for f in 0..t {
            data[f * h * w + 6 * w + 7] = 1.0;
        }
        let clip = Clip::new(Tensor::new([t, 1, h, w], data).unwrap()).unwrap();
        for seed in 0..20 {
            let out = crop_augment(&clip, 8, seed, true).unwrap();
            let pos: Vec<Option<usize>> = out
                .frames()
                .map(|f| f.data().iter().position(|&v| v == 1.0))
                .collect();
            assert!(pos.windows(2).all(|p| p[0] == p[1]), "seed {seed}: {pos:?}");
        }
    }

    #[test]
    fn all_dihedral_transforms_are_distinct_permutations() {
        let v = ramp_clip(1, 1, 4, 4);
        let outs: Vec<Clip> = (0..8).map(|i| transform_clip(&v, 0, 0, 4, Dihedral(i))).collect();
        for i in 0..8 {
            let mut sorted: Vec<f32> = outs[i].tensor().data().to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(sorted, v.tensor().data());
            for j in 0..i {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }

    #[test]
    fn noise_std_matches_sigma() {
        let clip = Clip::new(Tensor::full([1, 1, 256, 256], 0.5f32).unwrap()).unwrap();
        let (noisy, sigma) = degrade_with_sigma(&clip, &DegradationSpec::noise(30.0, 30.0, 4)).unwrap();
        assert_eq!(sigma, Some(30.0));
        let d: Vec<f64> = noisy.tensor().data().iter().map(|&v| v as f64 - 0.5).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        let target = 30.0 / 255.0;
        assert!((std - target).abs() / target < 0.02, "std {std} vs {target}");
    }

    #[test]
    fn noise_sigma_drawn_in_range_and_deterministic() {
        let clip = ramp_clip(2, 1, 4, 4);
        let spec = DegradationSpec::noise(30.0, 50.0, 9);
        let (a, s) = degrade_with_sigma(&clip, &spec).unwrap();
        let (b, _) = degrade_with_sigma(&clip, &spec).unwrap();
        assert_eq!(a, b);
        let s = s.unwrap();
        assert!((30.0..50.0).contains(&s));
        assert!(a.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_window_arithmetic() {
        let constant = Clip::new(Tensor::full([5, 1, 2, 2], 0.3f32).unwrap()).unwrap();
        let b = degrade(&constant, &DegradationSpec::blur(3, 0)).unwrap();
        assert!(b.tensor().data().iter().all(|&v| (v - 0.3).abs() < 1e-7));

        let frames = [0.0f32, 1.0, 0.0].map(|v| Tensor::full([1, 1, 1], v).unwrap());
        let impulse = Clip::from_frames(&frames).unwrap();
        let b = degrade(&impulse, &DegradationSpec::blur(3, 0)).unwrap();
        assert!((b.frame(1).item() - 1.0 / 3.0).abs() < 1e-7);
        // edges replicate the boundary frame
        assert!((b.frame(0).item() - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn invalid_specs_rejected() {
        let clip = ramp_clip(3, 1, 2, 2);
        assert!(degrade(&clip, &DegradationSpec::blur(4, 0)).is_err());
        assert!(degrade(&clip, &DegradationSpec::blur(1, 0)).is_err());
        assert!(degrade(&clip, &DegradationSpec::noise(50.0, 30.0, 0)).is_err());
        assert!(degrade(&clip, &DegradationSpec::noise(-1.0, 30.0, 0)).is_err());
        assert!(degrade(&clip, &DegradationSpec::noise(10.0, 300.0, 0)).is_err());
    }

    #[test]
    fn l1_values() {
        let a = Var::constant(Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64 * 0.25).unwrap());
        assert_eq!(l1_loss(&a, &a).unwrap().value().item(), 0.0);
        let b = a.add_scalar(0.1).unwrap();
        assert!((l1_loss(&b, &a).unwrap().value().item() - 0.1).abs() < 1e-15);
        let c = Var::constant(Tensor::<f64>::zeros([3, 2]).unwrap());
        assert!(l1_loss(&a, &c).is_err());
    }

    #[test]
    fn l1_gradient_is_sign_over_n() {
        let p = Var::param(Tensor::new([4], vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        let g = Var::constant(Tensor::new([4], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let grads = l1_loss(&p, &g).unwrap().backward().unwrap();
        assert_eq!(grads.wrt(&p).data(), &[0.25, -0.25, -0.25, 0.25]);
    }

    #[test]
    fn synthetic_video_is_bounded_and_moving() {
        let v = synthetic_video(5, 3, 32, 32, 1).unwrap();
        assert_eq!(v.tensor().shape(), &[5, 3, 32, 32]);
        assert!(v.tensor().data().iter().all(|&x| (0.1..=0.9).contains(&x)));
        assert_ne!(v.frame(0), v.frame(4));
        assert_eq!(v, synthetic_video(5, 3, 32, 32, 1).unwrap());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|i| derive_seed(42, i)).collect();
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), s.len());
    }
}
