//! Causal history model: align a short history of feature maps to the current
//! frame, then mix it in by channel attention.

mod align;
mod queue;
mod router;

pub use align::{state_align, Alignment};
pub use queue::{history_view, HistoryQueue, HistoryView, Shaped};
pub use router::{frame_history_router, route, Routed};

use crate::autodiff::{TopkMode, Var};
use crate::error::Result;
use crate::nn::{attention_specs, join, ParamInit, ParamSpec, PatchGrid, Scope};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChmSettings {
    pub grid: PatchGrid,
    pub tau: usize,
    pub k: usize,
    pub mode: TopkMode,
}

/// Parameters of one block with `c` channels: alignment (`sab`), spatial
/// self-attention (`bt`) and the router (`router`, output projection zeroed).
pub fn chm_specs(prefix: &str, c: usize, grid: PatchGrid) -> Vec<ParamSpec> {
    let d = grid.patch_dim(c);
    let mut specs = attention_specs(&join(prefix, "sab"), d);
    specs.extend(attention_specs(&join(prefix, "bt"), d));
    let r = join(prefix, "router");
    for n in ["w_q", "w_k", "w_v"] {
        specs.push(ParamSpec::new(join(&r, n), [c, c], ParamInit::FanIn(c)));
    }
    specs.push(ParamSpec::new(join(&r, "w_o"), [c, c], ParamInit::Zeros));
    specs.push(ParamSpec::new(join(&r, "alpha"), [1], ParamInit::Constant(1.0)));
    specs
}

/// One causal history step: read the queue (or replicate `f` when it is empty),
/// align, route, then enqueue `f`.
pub fn chm_forward<T: Scalar>(
    f: &Var<T>,
    queue: &mut HistoryQueue<Var<T>>,
    params: &Scope<'_, T>,
    settings: &ChmSettings,
) -> Result<Var<T>> {
    let view = if queue.is_empty() {
        HistoryView::replicate(f, settings.tau)?
    } else {
        history_view(queue, settings.tau)?
    };
    let al = state_align(f, &view, params, settings.grid, settings.k, settings.mode)?;
    let y = frame_history_router(f, &al.aligned, &params.child("router"))?;
    queue.push(f.clone())?;
    Ok(y)
}
