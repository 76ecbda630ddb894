mod common;

use common::{argmax, identity_alignment_params, roll_up, uniform, unit_patch_frame};
use turtle_core::chm::{chm_forward, chm_specs, route, state_align, HistoryQueue, HistoryView};
use turtle_core::chm::ChmSettings;
use turtle_core::nn::{ParamStore, PatchGrid};
use turtle_core::{Tensor, TopkMode, Var};

fn c(t: Tensor<f64>) -> Var<f64> {
    Var::constant(t)
}

#[test]
fn shifted_history_retrieves_shifted_patches() {
    let grid = PatchGrid::new(2, 2).unwrap();
    let (ch, nh, nw) = (2, 4, 5);
    let f = unit_patch_frame(ch, nh, nw, grid, 3);
    let hist = roll_up(&f, grid.p1);
    let store = identity_alignment_params(ch, grid, 4);
    let bound = store.bind(false);
    let view = HistoryView::from_frames(&[c(hist)]).unwrap();
    let al = state_align(&c(f), &view, &bound.scope("chm"), grid, 3, TopkMode::Topk).unwrap();
    let n = nh * nw;
    let scores = al.scores.value().data();
    for i in 0..nh {
        for j in 0..nw {
            let q = i * nw + j;
            let expected = ((i + nh - 1) % nh) * nw + j;
            assert_eq!(argmax(&scores[q * n..(q + 1) * n]), expected, "query patch ({i}, {j})");
        }
    }
}

#[test]
fn self_history_with_identity_projections_reproduces_frame() {
    let grid = PatchGrid::new(2, 2).unwrap();
    let f = unit_patch_frame(3, 3, 3, grid, 5);
    let store = identity_alignment_params(3, grid, 6);
    let bound = store.bind(false);
    let fv = c(f.clone());
    let view = HistoryView::replicate(&fv, 2).unwrap();
    let al = state_align(&fv, &view, &bound.scope("chm"), grid, 1, TopkMode::Topk).unwrap();
    assert_eq!(al.aligned.shape(), &[3, 3, 6, 6]);
    for slot in 0..2 {
        let got = al.aligned.narrow(0, slot, 1).unwrap();
        let diff = got.value().data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-15, "slot {slot} differs by {diff}");
    }
}

#[test]
fn masked_rows_keep_exactly_k_and_the_argmax() {
    let grid = PatchGrid::new(2, 2).unwrap();
    let store = ParamStore::<f64>::init(&chm_specs("chm", 2, grid), 7).unwrap();
    let bound = store.bind(false);
    let f = c(uniform(&[2, 6, 8], 8));
    let view = HistoryView::from_frames(&[c(uniform(&[2, 6, 8], 9)), c(uniform(&[2, 6, 8], 10))]).unwrap();
    let al = state_align(&f, &view, &bound.scope("chm"), grid, 4, TopkMode::Topk).unwrap();
    let n = 12;
    assert_eq!(al.masked.shape(), &[2, n, n]);
    for (masked, raw) in al.masked.value().data().chunks(n).zip(al.scores.value().data().chunks(n)) {
        assert_eq!(masked.iter().filter(|&&v| v > -1e29).count(), 4);
        assert_eq!(argmax(masked), argmax(raw));
    }
}

#[test]
fn full_topk_matches_dense_attention_bitwise() {
    let grid = PatchGrid::new(2, 2).unwrap();
    let store = ParamStore::<f64>::init(&chm_specs("chm", 2, grid), 11).unwrap();
    let bound = store.bind(false);
    let f = c(uniform(&[2, 5, 7], 12));
    let view = HistoryView::from_frames(&[c(uniform(&[2, 5, 7], 13))]).unwrap();
    let n = 3 * 4;
    let sparse = state_align(&f, &view, &bound.scope("chm"), grid, n, TopkMode::Topk).unwrap();
    let dense = state_align(&f, &view, &bound.scope("chm"), grid, n, TopkMode::DenseSoftmax).unwrap();
    assert!(sparse.aligned.value().bitwise_eq(dense.aligned.value()));
    assert!(state_align(&f, &view, &bound.scope("chm"), grid, n + 1, TopkMode::Topk).is_err());
}

fn router_store(ch: usize, seed: u64) -> ParamStore<f64> {
    let grid = PatchGrid::square(1).unwrap();
    let mut store = ParamStore::<f64>::init(&chm_specs("chm", ch, grid), seed).unwrap();
    store.set("chm.router.w_o", uniform(&[ch, ch], seed + 100)).unwrap();
    store.set("chm.router.alpha", Tensor::full([1], 0.7).unwrap()).unwrap();
    store
}

#[test]
fn router_with_zero_values_is_the_skip() {
    let mut store = router_store(3, 14);
    store.set("chm.router.w_v", Tensor::zeros([3, 3]).unwrap()).unwrap();
    let bound = store.bind(false);
    let f = c(uniform(&[3, 4, 4], 15));
    let aligned = c(uniform(&[4, 3, 4, 4], 16));
    let r = route(&f, &aligned, &bound.scope("chm.router")).unwrap();
    assert!(r.y.value().bitwise_eq(f.value()));
}

#[test]
fn router_weight_rows_sum_to_one() {
    let store = router_store(4, 17);
    let bound = store.bind(false);
    let f = c(uniform(&[4, 3, 5], 18));
    let aligned = c(uniform(&[3, 4, 3, 5], 19));
    let r = route(&f, &aligned, &bound.scope("chm.router")).unwrap();
    assert_eq!(r.weights.shape(), &[4, 12]);
    for row in r.weights.value().data().chunks(12) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

fn matvec_rows(w: &Tensor<f64>, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = w.shape()[0];
    (0..n)
        .map(|o| (0..x[0].len()).map(|p| (0..x.len()).map(|i| w.get(&[o, i]) * x[i][p]).sum()).collect())
        .collect()
}

fn unit(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

#[test]
fn single_slot_router_matches_channel_attention_oracle() {
    let (ch, h, w) = (3, 4, 5);
    let store = router_store(ch, 20);
    let bound = store.bind(false);
    let f = uniform(&[ch, h, w], 21);
    let b = uniform(&[ch, h, w], 22);
    let r = route(&c(f.clone()), &c(b.reshape([1, ch, h, w]).unwrap()), &bound.scope("chm.router")).unwrap();

    let planes = |t: &Tensor<f64>| -> Vec<Vec<f64>> { t.data().chunks(h * w).map(<[f64]>::to_vec).collect() };
    let p = |n: &str| store.get(&format!("chm.router.{n}")).unwrap().clone();
    let q = unit(matvec_rows(&p("w_q"), &planes(&f)));
    let k = unit(matvec_rows(&p("w_k"), &planes(&b)));
    let v = matvec_rows(&p("w_v"), &planes(&b));
    let alpha = p("alpha").item();
    let mut mixed = vec![vec![0.0; h * w]; ch];
    for o in 0..ch {
        let s: Vec<f64> = (0..ch).map(|j| q[o].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / alpha).collect();
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..ch {
            for px in 0..h * w {
                mixed[o][px] += e[j] / z * v[j][px];
            }
        }
    }
    let out = matvec_rows(&p("w_o"), &mixed);
    for o in 0..ch {
        for px in 0..h * w {
            let want = out[o][px] + f.data()[o * h * w + px];
            assert!((r.y.value().data()[o * h * w + px] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_warm_up_and_queue_contents() {
    let grid = PatchGrid::new(2, 2).unwrap();
    let store = ParamStore::<f64>::init(&chm_specs("chm", 2, grid), 23).unwrap();
    let bound = store.bind(false);
    let settings = ChmSettings { grid, tau: 3, k: 2, mode: TopkMode::Topk };
    let mut queue = HistoryQueue::new(5, 0).unwrap();
    let frames: Vec<Var<f64>> = (0..7).map(|i| c(uniform(&[2, 4, 6], 30 + i))).collect();
    for (t, f) in frames.iter().enumerate() {
        let y = chm_forward(f, &mut queue, &bound.scope("chm"), &settings).unwrap();
        assert_eq!(y.shape(), f.shape());
        assert_eq!(queue.len(), (t + 1).min(5));
    }
    let stored: Vec<&Var<f64>> = queue.iter().collect();
    for (s, f) in stored.iter().zip(&frames[2..]) {
        assert!(s.value().bitwise_eq(f.value()));
    }
}

#[test]
fn forward_is_causal_and_repeatable() {
    let grid = PatchGrid::new(2, 2).unwrap();
    let mut store = ParamStore::<f64>::init(&chm_specs("chm", 2, grid), 24).unwrap();
    store.set("chm.router.w_o", uniform(&[2, 2], 25)).unwrap();
    let bound = store.bind(false);
    let settings = ChmSettings { grid, tau: 2, k: 3, mode: TopkMode::Topk };
    let run = |frames: &[Tensor<f64>]| -> Vec<Tensor<f64>> {
        let mut q = HistoryQueue::new(5, 0).unwrap();
        frames
            .iter()
            .map(|f| chm_forward(&c(f.clone()), &mut q, &bound.scope("chm"), &settings).unwrap().value().clone())
            .collect()
    };
    let frames: Vec<Tensor<f64>> = (0..4).map(|i| uniform(&[2, 4, 4], 40 + i)).collect();
    let base = run(&frames);
    let again = run(&frames);
    assert!(base.iter().zip(&again).all(|(a, b)| a.bitwise_eq(b)));
    let mut changed = frames.clone();
    changed[2] = uniform(&[2, 4, 4], 99);
    let pert = run(&changed);
    assert!(base[..2].iter().zip(&pert[..2]).all(|(a, b)| a.bitwise_eq(b)));
    assert!(!base[2].bitwise_eq(&pert[2]) && !base[3].bitwise_eq(&pert[3]));
}
