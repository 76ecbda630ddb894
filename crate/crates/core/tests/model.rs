use std::time::Instant;

use turtle_core::autodiff::measure_macs;
use turtle_core::data::l1_loss;
use turtle_core::model::{
    count_macs, encode, model_specs, restore_frames, ssm_step, ssm_unroll, ChmPlacement, ClipState, ModelConfig,
    SsmParams, Turtle, conv_macs, restore_frame,
};
use turtle_core::nn::ParamStore;
use turtle_core::{Init, Tensor, TopkMode, Var};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape.to_vec(), Init::Uniform { low: 0.0, high: 1.0, seed }).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig { base_channels: 4, ffn_blocks: 1, ..ModelConfig::reference() }
}

fn perturbed(cfg: &ModelConfig, seed: u64) -> Turtle<f64> {
    let params = ParamStore::init(&model_specs(cfg), seed).unwrap().perturbed(seed + 1, 0.2);
    Turtle::from_parts(cfg.clone(), params).unwrap()
}

#[test]
fn encoder_doubles_channels_per_stage() {
    let cfg = ModelConfig { base_channels: 8, ..ModelConfig::reference() };
    let m = Turtle::<f64>::new(cfg.clone(), 0).unwrap();
    let enc = encode(&Var::constant(random(&[3, 64, 64], 1)), &m.params().bind(false), &cfg).unwrap();
    assert_eq!(enc.latent.shape(), [32, 16, 16]);
    assert_eq!(enc.skips[0].shape(), [8, 64, 64]);
    assert_eq!(enc.skips[1].shape(), [16, 32, 32]);
}

#[test]
fn encoder_of_zero_frame_is_zero() {
    let cfg = small();
    let m = Turtle::<f64>::new(cfg.clone(), 3).unwrap();
    let enc = encode(&Var::constant(Tensor::zeros([3, 16, 16]).unwrap()), &m.params().bind(false), &cfg).unwrap();
    assert_eq!(enc.latent.value().max_abs(), 0.0);
}

#[test]
fn encoder_is_per_frame() {
    let cfg = small();
    let m = perturbed(&cfg, 4);
    let b = m.params().bind(false);
    let a = encode(&Var::constant(random(&[3, 16, 16], 5)), &b, &cfg).unwrap();
    let _ = encode(&Var::constant(random(&[3, 16, 16], 6)), &b, &cfg).unwrap();
    let again = encode(&Var::constant(random(&[3, 16, 16], 5)), &b, &cfg).unwrap();
    assert!(a.latent.value().bitwise_eq(again.latent.value()));
}

#[test]
fn fresh_model_is_identity() {
    let m = Turtle::<f64>::new(small(), 7).unwrap();
    let clip = random(&[3, 3, 20, 13], 8);
    let out = m.restore_clip(&clip).unwrap();
    assert!(out.bitwise_eq(&clip));
}

#[test]
fn output_matches_input_extents() {
    let m = perturbed(&small(), 9);
    let out = m.restore_clip(&random(&[2, 3, 18, 22], 10)).unwrap();
    assert_eq!(out.shape(), [2, 3, 18, 22]);
}

#[test]
fn restoration_is_causal() {
    let m = perturbed(&small(), 11);
    let clip = random(&[5, 3, 16, 16], 12);
    let base = m.restore_clip(&clip).unwrap();
    let mut changed = clip.clone();
    for i in 0..3 * 16 * 16 {
        changed.data_mut()[3 * 3 * 256 + i] += 0.5;
    }
    let out = m.restore_clip(&changed).unwrap();
    let frame = 3 * 256;
    for t in 0..5 {
        let same = base.data()[t * frame..(t + 1) * frame] == out.data()[t * frame..(t + 1) * frame];
        assert_eq!(same, t < 3, "frame {t}");
    }
}

#[test]
fn identical_frames_give_identical_outputs() {
    let m = perturbed(&small(), 13);
    let f = random(&[1, 3, 16, 16], 14);
    let clip = Var::concat(&vec![Var::constant(f); 4], 0).unwrap().value().clone();
    let out = m.restore_clip(&clip).unwrap();
    let n = 3 * 256;
    for t in 1..4 {
        assert_eq!(out.data()[..n], out.data()[t * n..(t + 1) * n]);
    }
}

#[test]
fn full_topk_equals_dense() {
    let mut cfg = ModelConfig { topk: 10_000, ..small() };
    let a = perturbed(&cfg, 15);
    cfg.topk_mode = TopkMode::DenseSoftmax;
    let b = Turtle::from_parts(cfg, a.params().clone()).unwrap();
    let clip = random(&[3, 3, 16, 16], 16);
    assert!(a.restore_clip(&clip).unwrap().bitwise_eq(&b.restore_clip(&clip).unwrap()));
}

#[test]
fn latent_only_has_no_decoder_queues() {
    let cfg = ModelConfig { placement: ChmPlacement::LatentOnly, ..small() };
    let m = perturbed(&cfg, 17);
    let b = m.params().bind(false);
    let mut state = ClipState::new(&cfg).unwrap();
    restore_frame(&Var::constant(random(&[3, 16, 16], 18)), &mut state, &b, &cfg).unwrap();
    let names: Vec<&str> = state.queues().map(|(n, _)| n).collect();
    assert_eq!(names, ["latent.chm0"]);
    assert_eq!(state.queue("latent.chm0").unwrap().len(), 1);
}

#[test]
fn decoder_queues_fill_each_step() {
    let cfg = small();
    let m = perturbed(&cfg, 19);
    let b = m.params().bind(false);
    let mut state = ClipState::new(&cfg).unwrap();
    for _ in 0..7 {
        restore_frame(&Var::constant(random(&[3, 16, 16], 20)), &mut state, &b, &cfg).unwrap();
    }
    assert_eq!(state.queues().count(), 3);
    assert!(state.queues().all(|(_, q)| q.len() == cfg.gamma));
}

#[test]
fn gradient_reaches_every_parameter() {
    let cfg = small();
    let m = perturbed(&cfg, 21);
    let b = m.params().bind(true);
    let frames: Vec<Var<f64>> = (0..3).map(|i| Var::constant(random(&[3, 16, 16], 30 + i))).collect();
    let out = restore_frames(&frames, &b, &cfg).unwrap();
    let target = Var::constant(random(&[3, 3, 16, 16], 40));
    let loss = l1_loss(&Var::stack(&out).unwrap(), &target).unwrap();
    let grads = loss.backward().unwrap();
    for (name, v) in b.iter() {
        assert!(grads.wrt(v).max_abs() > 0.0, "{name} receives no gradient");
    }
}

#[test]
fn analytic_macs_match_instrumented_forward() {
    for cfg in [small(), ModelConfig { placement: ChmPlacement::LatentOnly, ..small() }, ModelConfig::reference()] {
        let m = Turtle::<f32>::new(cfg.clone(), 0).unwrap();
        let b = m.params().bind(false);
        let mut state = ClipState::new(&cfg).unwrap();
        let frame = Var::constant(Tensor::<f32>::zeros([3, 30, 20]).unwrap());
        for _ in 0..2 {
            let (_, measured) = measure_macs(|| restore_frame(&frame, &mut state, &b, &cfg).unwrap());
            assert_eq!(measured, count_macs(&cfg, 30, 20).unwrap().total());
        }
    }
}

#[test]
fn mac_counting_basics() {
    assert_eq!(conv_macs(32, 32, 8, 16, 1, 1), 131_072);
    let cfg = ModelConfig::reference();
    let r = count_macs(&cfg, 32, 32).unwrap();
    assert_eq!(r.total(), r.entries.iter().map(|e| e.macs).sum::<u64>());
    let r2 = count_macs(&cfg, 64, 32).unwrap();
    for (a, b) in r.entries.iter().zip(&r2.entries) {
        if a.layer.contains("conv") || a.layer.starts_with("intro") || a.layer.starts_with("head") {
            assert_eq!(2 * a.macs, b.macs, "{}", a.layer);
        }
    }
}

#[test]
fn ssm_first_step_and_running_sum() {
    let n = 3;
    let eye = Tensor::<f64>::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }).unwrap();
    let p = SsmParams { a: vec![eye.clone(); 4], b: vec![eye.clone(); 4], c: vec![eye.clone(); 4] };
    let frames: Vec<Tensor<f64>> = (0..4).map(|i| random(&[n], 50 + i)).collect();
    let ys = ssm_unroll(&frames, &p).unwrap();
    let mut acc = vec![0.0; n];
    for (f, y) in frames.iter().zip(&ys) {
        for (a, v) in acc.iter_mut().zip(f.data()) {
            *a += v;
        }
        for (a, v) in acc.iter().zip(y.data()) {
            assert!((a - v).abs() < 1e-12);
        }
    }
    let (h0, _) = ssm_step(&Tensor::zeros([n]).unwrap(), &frames[0], &p, 0).unwrap();
    assert_eq!(h0, frames[0]);
}

#[test]
#[ignore]
fn timing_probe() {
    let cfg = ModelConfig::reference();
    let m = Turtle::<f32>::new(cfg.clone(), 0).unwrap();
    let params = m.params().perturbed(1, 0.05);
    let frames: Vec<Var<f32>> =
        (0..5).map(|i| Var::constant(Tensor::create([3, 32, 32], Init::Uniform { low: 0.0, high: 1.0, seed: i }).unwrap())).collect();
    let t = Instant::now();
    let b = params.bind(true);
    let out = restore_frames(&frames, &b, &cfg).unwrap();
    let loss = l1_loss(&Var::stack(&out).unwrap(), &Var::stack(&frames).unwrap()).unwrap();
    let fwd = t.elapsed();
    let _g = loss.backward().unwrap();
    println!("fwd {:?} total {:?} macs/frame {}", fwd, t.elapsed(), count_macs(&cfg, 32, 32).unwrap().total());
}

#[test]
#[ignore]
fn mac_breakdown_probe() {
    let r = count_macs(&ModelConfig::reference(), 32, 32).unwrap();
    let mut groups = std::collections::BTreeMap::new();
    for e in &r.entries {
        let key: String = e.layer.split('.').filter(|s| !s.starts_with("enc") && !s.starts_with("dec") && !s.starts_with("latent") && !s.starts_with("ffn") && !s.starts_with("chm")).collect::<Vec<_>>().join(".");
        *groups.entry(format!("{}:{}", e.layer.split('.').next().unwrap(), key)).or_insert(0u64) += e.macs;
    }
    for (k, v) in groups { println!("{k:40} {v}"); }
}

#[test]
#[ignore]
fn overfit_probe() {
    use turtle_core::data::DegradationSpec;
    use turtle_core::optim::OptimizerConfig;
    use turtle_core::train::{evaluate, synthetic_pairs, Trainer};
    let iters: usize = std::env::var("ITERS").ok().and_then(|s| s.parse().ok()).unwrap_or(300);
    let data = synthetic_pairs(10, 5, 32, 3, &DegradationSpec::noise(30.0, 30.0, 7), 1).unwrap();
    let model = Turtle::<f32>::new(ModelConfig::reference(), 0).unwrap();
    let mut tr = Trainer::new(model, OptimizerConfig { total_iters: iters, ..Default::default() }).unwrap();
    let t = Instant::now();
    println!("before {:?}", evaluate(tr.model(), &data).unwrap());
    let mut acc = 0.0;
    tr.run(&data, iters, |l| {
        acc += l.loss;
        if (l.iter + 1) % 50 == 0 {
            println!("{} loss {:.5} lr {:.2e} {:?}", l.iter + 1, acc / 50.0, l.lr, t.elapsed());
            acc = 0.0;
        }
    })
    .unwrap();
    println!("after {:?} {:?}", evaluate(tr.model(), &data).unwrap(), t.elapsed());
}
