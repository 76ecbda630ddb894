use crate::autodiff::TopkMode;
use crate::chm::ChmSettings;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::nn::PatchGrid;

/// Where history blocks are used. With `LatentOnly` the decoder stages use
/// historyless blocks instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChmPlacement {
    LatentOnly,
    LatentAndDecoder,
}

impl ChmPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            ChmPlacement::LatentOnly => "latent_only",
            ChmPlacement::LatentAndDecoder => "latent_and_decoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "latent_only" => Ok(Self::LatentOnly),
            "latent_and_decoder" => Ok(Self::LatentAndDecoder),
            _ => Err(Error::config(format!("unknown chm placement {s:?}"))),
        }
    }
}

pub fn topk_mode_str(mode: TopkMode) -> &'static str {
    match mode {
        TopkMode::Topk => "topk",
        TopkMode::DenseSoftmax => "dense_softmax",
    }
}

pub fn parse_topk_mode(s: &str) -> Result<TopkMode> {
    match s {
        "topk" => Ok(TopkMode::Topk),
        "dense_softmax" => Ok(TopkMode::DenseSoftmax),
        _ => Err(Error::config(format!("unknown top-k mode {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Resolution levels; `stages - 1` downsamples by two.
    pub stages: usize,
    /// Channels at full resolution, doubled at every downsample.
    pub base_channels: usize,
    /// Historyless blocks per encoder stage.
    pub ffn_blocks: usize,
    /// History blocks at the latent stage and at every decoder stage.
    pub chm_blocks: usize,
    pub tau: usize,
    pub topk: usize,
    pub gamma: usize,
    /// Square patch extent per stage, full resolution first.
    pub patch_sizes: Vec<usize>,
    pub heads: usize,
    pub placement: ChmPlacement,
    pub topk_mode: TopkMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "model.in_channels",
    "model.stages",
    "model.base_channels",
    "model.ffn_blocks",
    "model.chm_blocks",
    "model.tau",
    "model.topk",
    "model.gamma",
    "model.patch_sizes",
    "model.heads",
    "model.chm_placement",
    "model.topk_mode",
];

impl ModelConfig {
    /// The small configuration used for training and evaluation on a desk machine.
    pub fn reference() -> Self {
        Self {
            in_channels: 3,
            stages: 3,
            base_channels: 16,
            ffn_blocks: 2,
            chm_blocks: 1,
            tau: 3,
            topk: 5,
            gamma: 5,
            patch_sizes: vec![4, 2, 2],
            heads: 1,
            placement: ChmPlacement::LatentAndDecoder,
            topk_mode: TopkMode::Topk,
        }
    }

    /// A larger configuration, only used to report operation counts.
    pub fn full_size() -> Self {
        Self {
            stages: 4,
            base_channels: 32,
            ffn_blocks: 2,
            chm_blocks: 1,
            patch_sizes: vec![8, 4, 2, 2],
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("stages", self.stages),
            ("base_channels", self.base_channels),
            ("tau", self.tau),
            ("topk", self.topk),
            ("gamma", self.gamma),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if self.tau > self.gamma {
            return Err(Error::config(format!("tau {} exceeds history capacity gamma {}", self.tau, self.gamma)));
        }
        if self.heads != 1 {
            return Err(Error::config(format!("only single-head attention is supported, got {}", self.heads)));
        }
        if self.patch_sizes.len() != self.stages || self.patch_sizes.contains(&0) {
            return Err(Error::config(format!(
                "need {} positive patch sizes, got {:?}",
                self.stages, self.patch_sizes
            )));
        }
        if self.stages > 12 {
            return Err(Error::config("too many stages"));
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn grid(&self, stage: usize) -> PatchGrid {
        PatchGrid { p1: self.patch_sizes[stage], p2: self.patch_sizes[stage] }
    }

    /// Frame extents are padded to a multiple of this before encoding.
    pub fn divisor(&self) -> usize {
        1 << (self.stages - 1)
    }

    /// History settings for a stage whose feature map is `h x w`. The top-k count
    /// is limited to the number of patches available.
    pub fn chm_settings(&self, stage: usize, h: usize, w: usize) -> ChmSettings {
        let grid = self.grid(stage);
        let (hp, wp) = grid.padded(h, w);
        let n = (hp / grid.p1) * (wp / grid.p2);
        ChmSettings { grid, tau: self.tau, k: self.topk.min(n), mode: self.topk_mode }
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::reference();
        let stages = kv.get_or("model.stages", d.stages)?;
        let default_patches = if stages == d.stages { d.patch_sizes.clone() } else { vec![2; stages] };
        let cfg = Self {
            in_channels: kv.get_or("model.in_channels", d.in_channels)?,
            stages,
            base_channels: kv.get_or("model.base_channels", d.base_channels)?,
            ffn_blocks: kv.get_or("model.ffn_blocks", d.ffn_blocks)?,
            chm_blocks: kv.get_or("model.chm_blocks", d.chm_blocks)?,
            tau: kv.get_or("model.tau", d.tau)?,
            topk: kv.get_or("model.topk", d.topk)?,
            gamma: kv.get_or("model.gamma", d.gamma)?,
            patch_sizes: kv.get_list("model.patch_sizes", default_patches)?,
            heads: kv.get_or("model.heads", d.heads)?,
            placement: match kv.get_str("model.chm_placement") {
                Some(s) => ChmPlacement::parse(s)?,
                None => d.placement,
            },
            topk_mode: match kv.get_str("model.topk_mode") {
                Some(s) => parse_topk_mode(s)?,
                None => d.topk_mode,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model.in_channels", self.in_channels);
        kv.set("model.stages", self.stages);
        kv.set("model.base_channels", self.base_channels);
        kv.set("model.ffn_blocks", self.ffn_blocks);
        kv.set("model.chm_blocks", self.chm_blocks);
        kv.set("model.tau", self.tau);
        kv.set("model.topk", self.topk);
        kv.set("model.gamma", self.gamma);
        let patches: Vec<String> = self.patch_sizes.iter().map(usize::to_string).collect();
        kv.set("model.patch_sizes", patches.join(","));
        kv.set("model.heads", self.heads);
        kv.set("model.chm_placement", self.placement.as_str());
        kv.set("model.topk_mode", topk_mode_str(self.topk_mode));
        kv
    }
}
