//! Analytic multiply-accumulate counts for one restored frame.

use std::fmt;

use super::config::{ChmPlacement, ModelConfig};
use super::unet::history_blocks;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacEntry {
    pub layer: String,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacReport {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<MacEntry>,
}

impl MacReport {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn gmacs(&self) -> f64 {
        self.total() as f64 / 1e9
    }

    /// Sum over layers whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> u64 {
        self.entries.iter().filter(|e| e.layer.starts_with(prefix)).map(|e| e.macs).sum()
    }
}

impl fmt::Display for MacReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{:<32} {:>16}", e.layer, e.macs)?;
        }
        write!(f, "total {}x{}: {} MACs ({:.3} G)", self.height, self.width, self.total(), self.gmacs())
    }
}

/// MACs of a 2-D convolution producing `h_out x w_out` outputs.
pub fn conv_macs(h_out: usize, w_out: usize, c_in: usize, c_out: usize, kernel: usize, groups: usize) -> u64 {
    (h_out * w_out * c_out * (c_in / groups) * kernel * kernel) as u64
}

struct Walker {
    entries: Vec<MacEntry>,
}

impl Walker {
    fn add(&mut self, layer: String, macs: u64) {
        self.entries.push(MacEntry { layer, macs });
    }

    fn ffn(&mut self, name: &str, c: usize, h: usize, w: usize) {
        self.add(format!("{name}.conv1"), conv_macs(h, w, c, 2 * c, 1, 1));
        self.add(format!("{name}.dw"), conv_macs(h, w, 2 * c, 2 * c, 3, 2 * c));
        self.add(format!("{name}.conv2"), conv_macs(h, w, c, c, 1, 1));
        self.add(format!("{name}.conv3"), conv_macs(h, w, c, 2 * c, 1, 1));
        self.add(format!("{name}.conv4"), conv_macs(h, w, c, c, 1, 1));
    }

    fn history(&mut self, name: &str, cfg: &ModelConfig, stage: usize, h: usize, w: usize) {
        let c = cfg.channels(stage);
        let grid = cfg.grid(stage);
        let (hp, wp) = grid.padded(h, w);
        let n = (hp / grid.p1) * (wp / grid.p2);
        let d = grid.patch_dim(c);
        let (n, d, tau) = (n as u64, d as u64, cfg.tau as u64);
        self.add(format!("{name}.sab.query"), n * d * d);
        self.add(format!("{name}.sab.key_value"), 2 * tau * n * d * d);
        self.add(format!("{name}.sab.scores"), tau * n * n * d);
        self.add(format!("{name}.sab.aggregate"), tau * n * n * d);
        self.add(format!("{name}.sab.output"), tau * n * d * d);
        self.add(format!("{name}.bt.qkv"), 3 * n * d * d);
        self.add(format!("{name}.bt.scores"), n * n * d);
        self.add(format!("{name}.bt.aggregate"), n * n * d);
        self.add(format!("{name}.bt.output"), n * d * d);
        let (c, hw, slots) = (c as u64, (h * w) as u64, tau + 1);
        self.add(format!("{name}.router.query"), c * c * hw);
        self.add(format!("{name}.router.key_value"), 2 * slots * c * c * hw);
        self.add(format!("{name}.router.scores"), c * hw * slots * c);
        self.add(format!("{name}.router.aggregate"), c * slots * c * hw);
        self.add(format!("{name}.router.output"), c * c * hw);
        self.ffn(&format!("{name}.ffn"), cfg.channels(stage), h, w);
    }
}

/// Count the MACs of restoring one `height x width` frame with a full history.
/// Only shapes matter; parameter values do not.
pub fn count_macs(cfg: &ModelConfig, height: usize, width: usize) -> Result<MacReport> {
    cfg.validate()?;
    let div = cfg.divisor();
    let (hh, ww) = (height.div_ceil(div) * div, width.div_ceil(div) * div);
    let mut wk = Walker { entries: Vec::new() };
    let latent = cfg.stages - 1;
    let dims = |l: usize| (hh >> l, ww >> l);
    wk.add("intro".into(), conv_macs(hh, ww, cfg.in_channels, cfg.channels(0), 3, 1));
    for l in 0..latent {
        let (h, w) = dims(l);
        let c = cfg.channels(l);
        for b in 0..cfg.ffn_blocks {
            wk.ffn(&format!("enc{l}.ffn{b}"), c, h, w);
        }
        wk.add(format!("down{l}"), conv_macs(h / 2, w / 2, 4 * c, cfg.channels(l + 1), 1, 1));
    }
    let blocks = history_blocks(cfg);
    let run_history = |wk: &mut Walker, stage: usize| {
        for (name, s) in blocks.iter().filter(|(_, s)| *s == stage) {
            let (h, w) = dims(*s);
            wk.history(name, cfg, *s, h, w);
        }
    };
    run_history(&mut wk, latent);
    for l in (0..latent).rev() {
        let (h, w) = dims(l);
        let c = cfg.channels(l);
        wk.add(format!("up{l}"), conv_macs(h / 2, w / 2, cfg.channels(l + 1), 4 * c, 1, 1));
        wk.add(format!("merge{l}"), conv_macs(h, w, 2 * c, c, 1, 1));
        match cfg.placement {
            ChmPlacement::LatentAndDecoder => run_history(&mut wk, l),
            ChmPlacement::LatentOnly => {
                for b in 0..cfg.chm_blocks {
                    wk.ffn(&format!("dec{l}.ffn{b}"), c, h, w);
                }
            }
        }
    }
    wk.add("head".into(), conv_macs(hh, ww, cfg.channels(0), cfg.in_channels, 3, 1));
    Ok(MacReport { height, width, entries: wk.entries })
}
