//! Clips on disk: a directory of numbered 8-bit PNG frames or one TTEN file.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use super::tten::{read_tensor, write_tensor};
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn is_tten(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tten"))
}

/// PNG files of `dir` ordered by the integer value of their stem.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let listing = std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
    let mut numbered = Vec::new();
    for entry in listing {
        let path = entry.map_err(|e| Error::file(dir, e))?.path();
        if !path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let index: u64 = stem
            .parse()
            .map_err(|_| Error::file(&path, "frame file name must be a number"))?;
        numbered.push((index, path));
    }
    if numbered.is_empty() {
        return Err(Error::file(dir, "no PNG frames found"));
    }
    numbered.sort();
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::file(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = if img.color().has_color() {
        (3, img.to_rgb8().into_raw())
    } else {
        (1, img.to_luma8().into_raw())
    };
    // interleaved HWC bytes to planar CHW floats
    Tensor::from_fn([c, h, w], |i| {
        let (ch, px) = (i / (h * w), i % (h * w));
        raw[px * c + ch] as f32 / 255.0
    })
}

/// Load a clip from a frame directory or a `.tten` file.
pub fn load_frames(path: &Path) -> Result<Clip> {
    if is_tten(path) {
        let t = read_tensor::<f32>(path)?;
        return Clip::new(t).map_err(|e| Error::file(path, e));
    }
    let mut frames = Vec::new();
    for p in frame_paths(path)? {
        let f = load_png(&p)?;
        if let Some(first) = frames.first() {
            let first: &Tensor<f32> = first;
            if first.shape() != f.shape() {
                return Err(Error::file(
                    &p,
                    format!("frame is {:?}, earlier frames are {:?}", f.shape(), first.shape()),
                ));
            }
        }
        frames.push(f);
    }
    Clip::from_frames(&frames)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a clip as `00000.png`, `00001.png`, ... into `path`, or as one TTEN
/// file when `path` ends in `.tten`.
pub fn save_frames(clip: &Clip, path: &Path) -> Result<()> {
    if is_tten(path) {
        return write_tensor(path, clip.tensor());
    }
    std::fs::create_dir_all(path).map_err(|e| Error::file(path, e))?;
    let (c, h, w) = clip.frame_shape();
    for (t, frame) in clip.frames().enumerate() {
        let out = path.join(format!("{t:05}.png"));
        let d = frame.data();
        let saved = match c {
            1 => ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
                Luma([quantize(d[y as usize * w + x as usize])])
            })
            .save(&out),
            3 => ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
            })
            .save(&out),
            _ => return Err(Error::shape(format!("cannot write {c}-channel frames as PNG"))),
        };
        saved.map_err(|e| Error::file(&out, e))?;
    }
    Ok(())
}
