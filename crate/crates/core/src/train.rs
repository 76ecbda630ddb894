//! Supervised training on (degraded, clean) clip pairs.

use std::fmt;
use std::path::Path;

use crate::autodiff::Var;
use crate::data::{crop_augment, degrade, derive_seed, l1_loss, synthetic_video, Clip, DegradationSpec};
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::kv::KeyValues;
use crate::metrics::{psnr, ColorMode};
use crate::model::{restore_frames, ModelConfig, Turtle};
use crate::nn::ParamStore;
use crate::optim::{adam_step, AdamMoments, AdamState, OptimizerConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub lq: Clip,
    pub gt: Clip,
}

/// `clips` synthetic videos of `frames` frames, each degraded with its own
/// stream of the degradation seed.
pub fn synthetic_pairs(
    clips: usize,
    frames: usize,
    size: usize,
    channels: usize,
    degradation: &DegradationSpec,
    seed: u64,
) -> Result<Vec<TrainPair>> {
    if clips == 0 {
        return Err(Error::config("need at least one training clip"));
    }
    (0..clips as u64)
        .map(|i| {
            let gt = synthetic_video(frames, channels, size, size, derive_seed(seed, i))?;
            let spec = DegradationSpec { seed: derive_seed(degradation.seed, i), ..*degradation };
            Ok(TrainPair { lq: degrade(&gt, &spec)?, gt })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:e} {:e}", self.iter, self.loss, self.lr)
    }
}

/// Mean PSNR of the degraded input and of the restoration against the ground
/// truth, averaged over clips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub input_psnr: f64,
    pub output_psnr: f64,
}

impl EvalReport {
    pub fn gain(&self) -> f64 {
        self.output_psnr - self.input_psnr
    }
}

pub fn evaluate(model: &Turtle<f32>, data: &[TrainPair]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::arg("nothing to evaluate"));
    }
    let (mut inp, mut out) = (0.0, 0.0);
    for pair in data {
        let restored = model.restore_clip(pair.lq.tensor())?.map(|v| v.clamp(0.0, 1.0));
        inp += psnr(pair.lq.tensor(), pair.gt.tensor(), ColorMode::Rgb)?;
        out += psnr(&restored, pair.gt.tensor(), ColorMode::Rgb)?;
    }
    let n = data.len() as f64;
    Ok(EvalReport { input_psnr: inp / n, output_psnr: out / n })
}

const PARAM_PREFIX: &str = "param.";
const ADAM_M_PREFIX: &str = "adam.m.";
const ADAM_V_PREFIX: &str = "adam.v.";

pub struct Trainer {
    model: Turtle<f32>,
    adam: AdamState<f32>,
    optim: OptimizerConfig,
    iter: usize,
}

impl Trainer {
    pub fn new(model: Turtle<f32>, optim: OptimizerConfig) -> Result<Self> {
        optim.validate()?;
        let adam = AdamState::new(&model.params().iter().map(|(_, t)| t).collect::<Vec<_>>());
        Ok(Self { model, adam, optim, iter: 0 })
    }

    pub fn model(&self) -> &Turtle<f32> {
        &self.model
    }

    pub fn into_model(self) -> Turtle<f32> {
        self.model
    }

    /// Completed iterations.
    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn optim(&self) -> &OptimizerConfig {
        &self.optim
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.optim.total_iters
    }

    /// One optimizer step on a clip chosen and augmented from the iteration's
    /// seed, so any iteration can be replayed from a checkpoint.
    pub fn step(&mut self, data: &[TrainPair]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::arg("empty training set"));
        }
        if self.is_done() {
            return Err(Error::arg(format!("schedule of {} iterations is complete", self.optim.total_iters)));
        }
        let seed = derive_seed(self.optim.seed, self.iter as u64);
        let pair = &data[(seed % data.len() as u64) as usize];
        let crop_seed = derive_seed(seed, 1);
        let lq = crop_augment(&pair.lq, self.optim.crop_size, crop_seed, self.optim.augment)?;
        let gt = crop_augment(&pair.gt, self.optim.crop_size, crop_seed, self.optim.augment)?;

        let cfg = self.model.config().clone();
        let bound = self.model.params().bind(true);
        let frames: Vec<Var<f32>> = lq.frames().map(Var::constant).collect();
        let restored = Var::stack(&restore_frames(&frames, &bound, &cfg)?)?;
        let loss = l1_loss(&restored, &Var::constant(gt.tensor().clone()))?;
        let loss_value = loss.value().item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let grads = bound.gradients(&loss.backward()?);
        drop(bound);
        let lr = adam_step(&mut self.model.params_mut().tensors_mut(), &grads, &mut self.adam, &self.optim, self.iter)?;
        let log = StepLog { iter: self.iter, loss: loss_value, lr };
        self.iter += 1;
        Ok(log)
    }

    /// Step until `until` iterations are complete (capped by the schedule).
    pub fn run(&mut self, data: &[TrainPair], until: usize, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while self.iter < until.min(self.optim.total_iters) {
            let log = self.step(data)?;
            on_step(&log);
        }
        Ok(())
    }

    pub fn header(&self) -> KeyValues {
        let mut kv = self.model.config().to_kv();
        kv.extend(&optim_to_kv(&self.optim));
        kv.set("train.iter", self.iter);
        kv.set("train.adam_steps", self.adam.step);
        kv
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = self.header();
        let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
        for ((name, p), mom) in self.model.params().iter().zip(&self.adam.moments) {
            named.push((format!("{PARAM_PREFIX}{name}"), p));
            named.push((format!("{ADAM_M_PREFIX}{name}"), &mom.m));
            named.push((format!("{ADAM_V_PREFIX}{name}"), &mom.v));
        }
        save_checkpoint(path, &header, named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Resume from a checkpoint written by [`Trainer::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint::<f32>(path)?;
        let model = model_from_checkpoint(&ck)?;
        let optim = optim_from_kv(&ck.header)?;
        let iter = ck.header.require("train.iter")?;
        let step = ck.header.require("train.adam_steps")?;
        let moments = model
            .params()
            .names()
            .map(|name| {
                let get = |prefix: &str| {
                    ck.tensors
                        .get(&format!("{prefix}{name}"))
                        .cloned()
                        .ok_or_else(|| Error::file(path, format!("missing optimizer state for {name}")))
                };
                Ok(AdamMoments { m: get(ADAM_M_PREFIX)?, v: get(ADAM_V_PREFIX)? })
            })
            .collect::<Result<Vec<_>>>()?;
        optim.validate()?;
        Ok(Self { model, adam: AdamState { moments, step }, optim, iter })
    }
}

/// Model weights from any checkpoint carrying `param.*` tensors and the model
/// configuration in its header.
pub fn model_from_checkpoint(ck: &Checkpoint<f32>) -> Result<Turtle<f32>> {
    let cfg = ModelConfig::from_kv(&ck.header)?;
    let params = ck
        .tensors
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(PARAM_PREFIX).map(|n| (n.to_string(), t.clone())))
        .collect();
    Turtle::from_parts(cfg, ParamStore::from_map(params))
}

pub fn load_model(path: &Path) -> Result<Turtle<f32>> {
    model_from_checkpoint(&load_checkpoint(path)?).map_err(|e| match e {
        e @ Error::File { .. } => e,
        other => Error::file(path, other),
    })
}

/// Write model weights only.
pub fn save_model(model: &Turtle<f32>, path: &Path) -> Result<()> {
    let named: Vec<(String, &Tensor<f32>)> =
        model.params().iter().map(|(n, t)| (format!("{PARAM_PREFIX}{n}"), t)).collect();
    save_checkpoint(path, &model.config().to_kv(), named.iter().map(|(n, t)| (n.as_str(), *t)))
}

pub const OPTIM_KEYS: &[&str] = &[
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.lr_initial",
    "optim.lr_final",
    "optim.iters",
    "optim.crop",
    "optim.augment",
    "optim.seed",
];

pub fn optim_to_kv(o: &OptimizerConfig) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("optim.beta1", o.beta1);
    kv.set("optim.beta2", o.beta2);
    kv.set("optim.eps", o.eps);
    kv.set("optim.lr_initial", o.lr_initial);
    kv.set("optim.lr_final", o.lr_final);
    kv.set("optim.iters", o.total_iters);
    kv.set("optim.crop", o.crop_size);
    kv.set("optim.augment", o.augment);
    kv.set("optim.seed", o.seed);
    kv
}

pub fn optim_from_kv(kv: &KeyValues) -> Result<OptimizerConfig> {
    let d = OptimizerConfig::default();
    let o = OptimizerConfig {
        beta1: kv.get_or("optim.beta1", d.beta1)?,
        beta2: kv.get_or("optim.beta2", d.beta2)?,
        eps: kv.get_or("optim.eps", d.eps)?,
        lr_initial: kv.get_or("optim.lr_initial", d.lr_initial)?,
        lr_final: kv.get_or("optim.lr_final", d.lr_final)?,
        total_iters: kv.get_or("optim.iters", d.total_iters)?,
        crop_size: kv.get_or("optim.crop", d.crop_size)?,
        augment: kv.get_or("optim.augment", d.augment)?,
        seed: kv.get_or("optim.seed", d.seed)?,
    };
    o.validate()?;
    Ok(o)
}
