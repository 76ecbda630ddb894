//! Network building blocks shared by the encoder, decoder and history model.

mod attention;
mod ffn;
mod params;
mod patch;

pub use attention::{attention_specs, qkv_project, spatial_self_attention};
pub use ffn::{ffn_specs, historyless_ffn};
pub use params::{BoundParams, ParamInit, ParamSpec, ParamStore, Scope};
pub(crate) use params::join;
pub use patch::{pad_to_grid, patchify, unpatchify, PatchGrid};
