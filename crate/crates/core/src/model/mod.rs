//! The full restoration network, the reference state-space recurrence and
//! operation counting.

mod config;
mod macs;
mod ssm;
mod unet;

pub use config::{parse_topk_mode, topk_mode_str, ChmPlacement, ModelConfig};
pub use config::MODEL_KEYS;
pub use macs::{conv_macs, count_macs, MacEntry, MacReport};
pub use ssm::{ssm_step, ssm_unroll, SsmParams};
pub use unet::{
    decode, encode, history_blocks, model_specs, restore_frame, restore_frames, ClipState, Encoded, Turtle,
};
