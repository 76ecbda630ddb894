//! Central finite-difference verification of tape gradients.
//!
//! Each case maps a list of `f64` input tensors to an output of any shape. The
//! scalar checked is `sum(output * r)` for a fixed random `r`, so every output
//! element contributes with a distinct weight.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{BoundParams, ParamSpec, ParamStore};
use crate::tensor::{Init, Tensor};

/// Step of the central difference.
pub const FD_EPSILON: f64 = 1e-4;
/// Maximum accepted relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Lower bound on the denominator of the relative error; gradients below this
/// magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

pub type CaseFn = Box<dyn Fn(&[Var<f64>]) -> Result<Var<f64>>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub func: CaseFn,
    /// Entries perturbed per input; all entries when the input is smaller.
    pub samples_per_input: usize,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        func: impl Fn(&[Var<f64>]) -> Result<Var<f64>> + 'static,
    ) -> Self {
        Self { name: name.into(), inputs, func: Box::new(func), samples_per_input: 24 }
    }

    pub fn samples(mut self, n: usize) -> Self {
        self.samples_per_input = n;
        self
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    pub elapsed: Duration,
    pub error: Option<String>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error < FD_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn weighted_loss(out: &Var<f64>, weights: &Var<f64>) -> Result<Var<f64>> {
    out.mul(weights)?.sum()
}

pub fn run_case(case: &GradCase, seed: u64) -> CaseReport {
    let start = Instant::now();
    let mut report = CaseReport {
        name: case.name.clone(),
        max_rel_error: 0.0,
        entries_checked: 0,
        elapsed: Duration::ZERO,
        error: None,
    };
    if let Err(e) = check_case(case, seed, &mut report) {
        report.error = Some(e.to_string());
    }
    report.elapsed = start.elapsed();
    report
}

fn check_case(case: &GradCase, seed: u64, report: &mut CaseReport) -> Result<()> {
    let params: Vec<Var<f64>> = case.inputs.iter().cloned().map(Var::param).collect();
    let out = (case.func)(&params)?;
    let weights = Var::constant(Tensor::create(
        out.shape().to_vec(),
        Init::Uniform { low: 0.5, high: 1.5, seed: seed ^ 0x5eed },
    )?);
    let grads = weighted_loss(&out, &weights)?.backward()?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let consts: Vec<Var<f64>> = inputs.iter().cloned().map(Var::constant).collect();
        Ok(weighted_loss(&(case.func)(&consts)?, &weights)?.value().item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = case.inputs.clone();
    for (slot, param) in params.iter().enumerate() {
        let analytic = grads.wrt(param);
        let n = inputs[slot].len();
        let picks: Vec<usize> = if n <= case.samples_per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, case.samples_per_input).into_vec()
        };
        for i in picks {
            let orig = inputs[slot].data()[i];
            inputs[slot].data_mut()[i] = orig + FD_EPSILON;
            let plus = eval(&inputs)?;
            inputs[slot].data_mut()[i] = orig - FD_EPSILON;
            let minus = eval(&inputs)?;
            inputs[slot].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPSILON);
            let err = relative_error(analytic.data()[i], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.entries_checked += 1;
        }
    }
    Ok(())
}

pub(crate) fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape.to_vec(), Init::Uniform { low: -1.0, high: 1.0, seed }).unwrap()
}

pub(crate) fn random_in(shape: &[usize], low: f64, high: f64, seed: u64) -> Tensor<f64> {
    Tensor::create(shape.to_vec(), Init::Uniform { low, high, seed }).unwrap()
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub(crate) fn random_away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
    .unwrap()
}

/// One case per differentiable tensor operation.
pub fn op_cases() -> Vec<GradCase> {
    use crate::autodiff::Padding;
    let mut cases = vec![
        GradCase::new("add (broadcast)", vec![random(&[3, 4], 1), random(&[4], 2)], |v| v[0].add(&v[1])),
        GradCase::new("sub (broadcast)", vec![random(&[2, 3, 4], 3), random(&[3, 1], 4)], |v| v[0].sub(&v[1])),
        GradCase::new("mul", vec![random(&[3, 4], 5), random(&[3, 4], 6)], |v| v[0].mul(&v[1])),
        GradCase::new("div (scalar divisor)", vec![random(&[3, 4], 7), random_in(&[1], 0.5, 2.0, 8)], |v| {
            v[0].div(&v[1])
        }),
        GradCase::new("scale", vec![random(&[5], 9)], |v| v[0].scale(-2.5)),
        GradCase::new("abs", vec![random_away_from_zero(&[6], 10)], |v| v[0].abs()),
        GradCase::new("gelu", vec![random_in(&[8], -3.0, 3.0, 11)], |v| v[0].gelu()),
        GradCase::new("gate", vec![random(&[4, 3, 3], 12)], |v| v[0].gate(0)),
        GradCase::new("sum", vec![random(&[3, 3], 13)], |v| v[0].sum()),
        GradCase::new("mean", vec![random(&[3, 3], 14)], |v| v[0].mean()),
        GradCase::new("matmul", vec![random(&[3, 4], 15), random(&[4, 2], 16)], |v| v[0].matmul(&v[1])),
        GradCase::new("matmul (batched, broadcast)", vec![random(&[2, 3, 4], 17), random(&[4, 5], 18)], |v| {
            v[0].matmul(&v[1])
        }),
        GradCase::new("transpose", vec![random(&[2, 3, 4], 19)], |v| v[0].transpose(&[2, 0, 1])),
        GradCase::new("reshape", vec![random(&[2, 6], 20)], |v| v[0].reshape([3, 4])?.gelu()),
        GradCase::new("concat", vec![random(&[2, 3], 21), random(&[1, 3], 22)], |v| {
            Var::concat(&[v[0].clone(), v[1].clone()], 0)?.gelu()
        }),
        GradCase::new("narrow", vec![random(&[3, 5], 23)], |v| v[0].narrow(1, 1, 3)),
        GradCase::new("pad2d (reflect)", vec![random(&[2, 4, 4], 24)], |v| v[0].pad2d(1, 2, 2, 1, true)),
        GradCase::new("pad2d (zeros)", vec![random(&[2, 3, 3], 25)], |v| v[0].pad2d(1, 1, 1, 1, false)),
        GradCase::new("pixel_unshuffle", vec![random(&[2, 4, 4], 26)], |v| v[0].pixel_unshuffle(2)),
        GradCase::new("pixel_shuffle", vec![random(&[8, 2, 2], 27)], |v| v[0].pixel_shuffle(2)),
        GradCase::new("softmax", vec![random(&[3, 5], 28)], |v| v[0].softmax(1)),
        GradCase::new("softmax (axis 0)", vec![random(&[4, 3], 29)], |v| v[0].softmax(0)),
        GradCase::new("topk_mask + softmax", vec![random(&[4, 6], 30)], |v| v[0].topk_mask(2, 1)?.softmax(1)),
        GradCase::new(
            "layer_norm",
            vec![random(&[4, 3, 3], 31), random_in(&[4], 0.5, 1.5, 32), random(&[4], 33)],
            |v| v[0].layer_norm(&v[1], &v[2], 0, 1e-6),
        ),
        GradCase::new("l2_normalize", vec![random(&[3, 6], 34)], |v| v[0].l2_normalize(1, 1e-12)),
        GradCase::new(
            "conv2d 3x3 (zeros, bias)",
            vec![random(&[2, 5, 5], 35), random(&[3, 2, 3, 3], 36), random(&[3], 37)],
            |v| v[0].conv2d(&v[1], Some(&v[2]), 1, Padding::Zeros(1), 1),
        ),
        GradCase::new(
            "conv2d 3x3 (reflect, stride 2)",
            vec![random(&[2, 6, 6], 38), random(&[2, 2, 3, 3], 39)],
            |v| v[0].conv2d(&v[1], None, 2, Padding::Reflect(1), 1),
        ),
        GradCase::new(
            "conv2d depthwise",
            vec![random(&[4, 5, 5], 40), random(&[4, 1, 3, 3], 41), random(&[4], 42)],
            |v| v[0].conv2d(&v[1], Some(&v[2]), 1, Padding::Zeros(1), 4),
        ),
        GradCase::new(
            "conv2d 1x1 (batched)",
            vec![random(&[2, 3, 4, 4], 43), random(&[5, 3, 1, 1], 44), random(&[5], 45)],
            |v| v[0].conv2d(&v[1], Some(&v[2]), 1, Padding::Zeros(0), 1),
        ),
    ];
    cases.push(GradCase::new(
        "l1 loss",
        vec![random(&[2, 3, 4], 46), random(&[2, 3, 4], 47)],
        |v| crate::data::l1_loss(&v[0], &v[1]),
    ));
    cases
}

/// A case whose inputs are `data` followed by every tensor of `store`, so both
/// activations and parameters are checked.
fn block_case(
    name: &str,
    data: Vec<Tensor<f64>>,
    store: ParamStore<f64>,
    samples: usize,
    f: impl Fn(&[Var<f64>], &BoundParams<f64>) -> Result<Var<f64>> + 'static,
) -> GradCase {
    let n_data = data.len();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs = data;
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    GradCase::new(name, inputs, move |v| {
        let bound = BoundParams::from_vars(names.iter().cloned().zip(v[n_data..].iter().cloned()));
        f(&v[..n_data], &bound)
    })
    .samples(samples)
}

fn block_params(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    ParamStore::init(specs, seed).unwrap().perturbed(seed + 1, 0.3)
}

/// One case per network block and one for the whole model on a two-frame clip.
pub fn block_cases() -> Vec<GradCase> {
    use crate::autodiff::TopkMode;
    use crate::chm::{chm_forward, chm_specs, frame_history_router, state_align, ChmSettings, HistoryQueue, HistoryView};
    use crate::model::{model_specs, restore_frames, ModelConfig};
    use crate::nn::{attention_specs, ffn_specs, historyless_ffn, join, spatial_self_attention, ParamInit, PatchGrid};

    let grid = PatchGrid { p1: 2, p2: 2 };
    let router_specs = |c: usize| -> Vec<ParamSpec> {
        let mut s: Vec<ParamSpec> = ["w_q", "w_k", "w_v", "w_o"]
            .iter()
            .map(|n| ParamSpec::new(join("router", n), [c, c], ParamInit::FanIn(c)))
            .collect();
        s.push(ParamSpec::new("router.alpha", [1], ParamInit::Constant(1.0)));
        s
    };
    let model_cfg = ModelConfig { base_channels: 4, ffn_blocks: 1, ..ModelConfig::reference() };
    let model_store = block_params(&model_specs(&model_cfg), 60);
    vec![
        block_case("historyless FFN", vec![random(&[4, 5, 5], 50)], block_params(&ffn_specs("ffn", 4), 51), 8, |v, p| {
            historyless_ffn(&v[0], &p.scope("ffn"))
        }),
        block_case(
            "spatial self-attention",
            vec![random(&[2, 4, 6], 52)],
            block_params(&attention_specs("bt", 8), 53),
            8,
            move |v, p| spatial_self_attention(&v[0], &p.scope("bt"), grid),
        ),
        block_case(
            "state align",
            vec![random(&[2, 4, 4], 54), random(&[3, 2, 4, 4], 55)],
            block_params(&chm_specs("", 2, grid), 56),
            6,
            move |v, p| {
                let view = HistoryView { h: v[1].clone() };
                Ok(state_align(&v[0], &view, &p.scope(""), grid, 2, TopkMode::Topk)?.aligned)
            },
        ),
        block_case(
            "frame history router",
            vec![random(&[3, 4, 4], 57), random(&[4, 3, 4, 4], 58)],
            block_params(&router_specs(3), 59),
            8,
            |v, p| frame_history_router(&v[0], &v[1], &p.scope("router")),
        ),
        block_case(
            "causal history block (3 steps)",
            vec![random(&[2, 4, 4], 61), random(&[2, 4, 4], 62), random(&[2, 4, 4], 63)],
            block_params(&chm_specs("", 2, grid), 64),
            4,
            move |v, p| {
                let settings = ChmSettings { grid, tau: 2, k: 3, mode: TopkMode::Topk };
                let mut q = HistoryQueue::new(3, 0)?;
                let ys = v
                    .iter()
                    .map(|f| chm_forward(f, &mut q, &p.scope(""), &settings))
                    .collect::<Result<Vec<_>>>()?;
                Var::stack(&ys)
            },
        ),
        block_case(
            "full model (2 frames, 16x16)",
            vec![random_in(&[3, 16, 16], 0.0, 1.0, 65), random_in(&[3, 16, 16], 0.0, 1.0, 66)],
            model_store,
            2,
            move |v, p| Var::stack(&restore_frames(v, p, &model_cfg)?),
        ),
    ]
}

pub fn all_cases() -> Vec<GradCase> {
    let mut cases = op_cases();
    cases.extend(block_cases());
    cases
}

/// Run every case; the suite passes when every report passes.
pub fn run_suite(seed: u64) -> Vec<CaseReport> {
    all_cases().iter().map(|c| run_case(c, seed)).collect()
}

/// A deliberately wrong backward rule; the suite must report it.
pub fn corrupted_case() -> GradCase {
    GradCase::new("corrupted gradient (test hook)", vec![random(&[4], 99)], |v| {
        let value = v[0].value().map(|x| 2.0 * x);
        Var::custom("bad_scale", vec![v[0].clone()], value, |g, _, _| {
            vec![Some(g.map(|x| 3.0 * x))]
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_gradient_is_detected() {
        let report = run_case(&corrupted_case(), 1);
        assert!(!report.passed());
        assert!(report.max_rel_error > 0.3);
    }

    #[test]
    fn every_op_passes() {
        for case in op_cases() {
            let r = run_case(&case, 7);
            assert!(r.passed(), "{}: {:?} err {}", r.name, r.error, r.max_rel_error);
        }
    }

    #[test]
    fn every_block_passes() {
        for case in block_cases() {
            let r = run_case(&case, 11);
            assert!(r.passed(), "{}: {:?} err {}", r.name, r.error, r.max_rel_error);
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        assert!(relative_error(0.0, 1e-9) < 1e-5);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }
}
