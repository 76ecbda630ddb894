//! The restoration U-Net and its per-clip recurrence.

use std::collections::BTreeMap;

use super::config::{ChmPlacement, ModelConfig};
use crate::autodiff::{Padding, Var};
use crate::chm::{chm_forward, chm_specs, HistoryQueue};
use crate::error::{Error, Result};
use crate::nn::{ffn_specs, historyless_ffn, join, pad_to_grid, BoundParams, ParamInit, ParamSpec, ParamStore, PatchGrid};
use crate::tensor::{Scalar, Tensor};

fn conv_specs(prefix: &str, c_out: usize, c_in: usize, kernel: usize, zero: bool) -> Vec<ParamSpec> {
    let init = if zero { ParamInit::Zeros } else { ParamInit::FanIn(c_in * kernel * kernel) };
    vec![
        ParamSpec::new(join(prefix, "w"), [c_out, c_in, kernel, kernel], init),
        ParamSpec::new(join(prefix, "b"), [c_out], ParamInit::Zeros),
    ]
}

/// Names and stages of every history block, in execution order.
pub fn history_blocks(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let latent = cfg.stages - 1;
    let mut out: Vec<(String, usize)> = (0..cfg.chm_blocks).map(|b| (format!("latent.chm{b}"), latent)).collect();
    if cfg.placement == ChmPlacement::LatentAndDecoder {
        for l in (0..latent).rev() {
            out.extend((0..cfg.chm_blocks).map(|b| (format!("dec{l}.chm{b}"), l)));
        }
    }
    out
}

/// Every parameter of the model. Shapes depend on the configuration only.
pub fn model_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let latent = cfg.stages - 1;
    let mut specs = conv_specs("intro", cfg.channels(0), cfg.in_channels, 3, false);
    for l in 0..latent {
        let c = cfg.channels(l);
        for b in 0..cfg.ffn_blocks {
            specs.extend(ffn_specs(&format!("enc{l}.ffn{b}"), c));
        }
        specs.extend(conv_specs(&format!("down{l}"), cfg.channels(l + 1), 4 * c, 1, false));
        specs.extend(conv_specs(&format!("up{l}"), 4 * c, cfg.channels(l + 1), 1, false));
        specs.extend(conv_specs(&format!("merge{l}"), c, 2 * c, 1, false));
        if cfg.placement == ChmPlacement::LatentOnly {
            for b in 0..cfg.chm_blocks {
                specs.extend(ffn_specs(&format!("dec{l}.ffn{b}"), c));
            }
        }
    }
    for (name, stage) in history_blocks(cfg) {
        let c = cfg.channels(stage);
        specs.extend(chm_specs(&name, c, cfg.grid(stage)));
        specs.extend(ffn_specs(&join(&name, "ffn"), c));
    }
    specs.extend(conv_specs("head", cfg.in_channels, cfg.channels(0), 3, true));
    specs
}

/// Per-clip recurrent state: one history queue per history block.
pub struct ClipState<T: Scalar> {
    queues: BTreeMap<String, HistoryQueue<Var<T>>>,
}

impl<T: Scalar> ClipState<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut queues = BTreeMap::new();
        for (name, stage) in history_blocks(cfg) {
            queues.insert(name, HistoryQueue::new(cfg.gamma, stage)?);
        }
        Ok(Self { queues })
    }

    pub fn queue(&self, name: &str) -> Option<&HistoryQueue<Var<T>>> {
        self.queues.get(name)
    }

    pub fn queues(&self) -> impl Iterator<Item = (&str, &HistoryQueue<Var<T>>)> {
        self.queues.iter().map(|(k, v)| (k.as_str(), v))
    }
}

pub struct Encoded<T: Scalar> {
    /// Features before each downsample, full resolution first.
    pub skips: Vec<Var<T>>,
    pub latent: Var<T>,
}

fn conv<T: Scalar>(x: &Var<T>, p: &BoundParams<T>, name: &str, pad: usize) -> Result<Var<T>> {
    let s = p.scope(name);
    x.conv2d(&s.get("w")?, Some(&s.get("b")?), 1, Padding::Zeros(pad), 1)
}

/// Historyless encoder on one frame whose extents are divisible by
/// [`ModelConfig::divisor`].
pub fn encode<T: Scalar>(frame: &Var<T>, p: &BoundParams<T>, cfg: &ModelConfig) -> Result<Encoded<T>> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != cfg.in_channels || !s[1].is_multiple_of(cfg.divisor()) || !s[2].is_multiple_of(cfg.divisor()) {
        return Err(Error::shape(format!(
            "encoder expects [{}, h, w] with h and w divisible by {}, got {s:?}",
            cfg.in_channels,
            cfg.divisor()
        )));
    }
    let mut x = conv(frame, p, "intro", 1)?;
    let mut skips = Vec::with_capacity(cfg.stages - 1);
    for l in 0..cfg.stages - 1 {
        for b in 0..cfg.ffn_blocks {
            x = historyless_ffn(&x, &p.scope(&format!("enc{l}.ffn{b}")))?;
        }
        skips.push(x.clone());
        x = conv(&x.pixel_unshuffle(2)?, p, &format!("down{l}"), 0)?;
    }
    Ok(Encoded { skips, latent: x })
}

fn history_block<T: Scalar>(
    x: &Var<T>,
    name: &str,
    stage: usize,
    state: &mut ClipState<T>,
    p: &BoundParams<T>,
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    let queue = state
        .queues
        .get_mut(name)
        .ok_or_else(|| Error::arg(format!("no history queue for {name}")))?;
    let settings = cfg.chm_settings(stage, x.shape()[1], x.shape()[2]);
    let scope = p.scope(name);
    let y = chm_forward(x, queue, &scope, &settings)?;
    historyless_ffn(&y, &scope.child("ffn"))
}

/// History-conditioned decoder. Returns the residual to add to the padded input.
pub fn decode<T: Scalar>(
    enc: &Encoded<T>,
    state: &mut ClipState<T>,
    p: &BoundParams<T>,
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    let latent = cfg.stages - 1;
    if enc.skips.len() != latent {
        return Err(Error::shape(format!("expected {latent} skip features, got {}", enc.skips.len())));
    }
    let mut x = enc.latent.clone();
    for b in 0..cfg.chm_blocks {
        x = history_block(&x, &format!("latent.chm{b}"), latent, state, p, cfg)?;
    }
    for l in (0..latent).rev() {
        x = conv(&x, p, &format!("up{l}"), 0)?.pixel_shuffle(2)?;
        x = Var::concat(&[x, enc.skips[l].clone()], 0)?;
        x = conv(&x, p, &format!("merge{l}"), 0)?;
        for b in 0..cfg.chm_blocks {
            x = match cfg.placement {
                ChmPlacement::LatentAndDecoder => history_block(&x, &format!("dec{l}.chm{b}"), l, state, p, cfg)?,
                ChmPlacement::LatentOnly => historyless_ffn(&x, &p.scope(&format!("dec{l}.ffn{b}")))?,
            };
        }
    }
    conv(&x, p, "head", 1)
}

/// Restore one `[c, h, w]` frame, advancing the clip state.
pub fn restore_frame<T: Scalar>(
    frame: &Var<T>,
    state: &mut ClipState<T>,
    p: &BoundParams<T>,
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    if frame.shape().len() != 3 {
        return Err(Error::shape(format!("expected a [c, h, w] frame, got {:?}", frame.shape())));
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let padded = pad_to_grid(frame, PatchGrid::square(cfg.divisor())?)?;
    let enc = encode(&padded, p, cfg)?;
    let residual = decode(&enc, state, p, cfg)?;
    padded.add(&residual)?.crop2d(0, 0, h, w)
}

/// Restore a clip in temporal order from a fresh state.
pub fn restore_frames<T: Scalar>(frames: &[Var<T>], p: &BoundParams<T>, cfg: &ModelConfig) -> Result<Vec<Var<T>>> {
    if frames.is_empty() {
        return Err(Error::arg("cannot restore an empty clip"));
    }
    let mut state = ClipState::new(cfg)?;
    frames.iter().map(|f| restore_frame(f, &mut state, p, cfg)).collect()
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Turtle<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Turtle<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&model_specs(&config), seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check_specs(&model_specs(&config))?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Restore a `[t, c, h, w]` clip with fresh history. No graph is recorded.
    pub fn restore_clip(&self, clip: &Tensor<T>) -> Result<Tensor<T>> {
        if clip.rank() != 4 || clip.shape()[0] == 0 {
            return Err(Error::shape(format!("expected a non-empty [t, c, h, w] clip, got {:?}", clip.shape())));
        }
        let bound = self.params.bind(false);
        let mut state = ClipState::new(&self.config)?;
        let frames = Var::constant(clip.clone());
        let mut out = Vec::with_capacity(clip.shape()[0]);
        for t in 0..clip.shape()[0] {
            let f = frames.narrow(0, t, 1)?.reshape(clip.shape()[1..].to_vec())?;
            out.push(restore_frame(&f, &mut state, &bound, &self.config)?);
        }
        Ok(Var::stack(&out)?.value().clone())
    }

    /// Restore a long `[t, c, h, w]` sequence clip by clip, `gamma` frames at a
    /// time, each clip starting from fresh history.
    pub fn restore_video(&self, video: &Tensor<T>) -> Result<Tensor<T>> {
        if video.rank() != 4 || video.shape()[0] == 0 {
            return Err(Error::shape(format!("expected a non-empty [t, c, h, w] video, got {:?}", video.shape())));
        }
        let t = video.shape()[0];
        let v = Var::constant(video.clone());
        let mut parts = Vec::new();
        for start in (0..t).step_by(self.config.gamma) {
            let len = self.config.gamma.min(t - start);
            parts.push(Var::constant(self.restore_clip(v.narrow(0, start, len)?.value())?));
        }
        Ok(Var::concat(&parts, 0)?.value().clone())
    }
}
