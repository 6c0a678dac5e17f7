use super::*;
use crate::layers::ParamStore;
use crate::numcore::grad_check;
use ndarray::array;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn iv(s: f64, e: f64) -> Interval {
    Interval { start: s, end: e }
}

// Interval IoU restated for the tests, with point intervals handled the same way.
fn oracle_iou(a: Interval, b: Interval) -> f64 {
    if a == b {
        return 1.0;
    }
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = if hi > lo { hi - lo } else { 0.0 };
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn sl1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

#[test]
fn decode_examples() {
    assert_eq!(decode_box(5, 0.0, 0.0, 10), iv(5.0, 5.0));
    assert_eq!(decode_box(5, 2.0, 3.0, 10), iv(3.0, 8.0));
    assert_eq!(decode_box(1, 4.0, 30.0, 10), iv(0.0, 9.0));
}

#[test]
fn target_offsets_decode_to_ground_truth() {
    let t = FrameTargets::new(12, (3, 8)).unwrap();
    for f in 3..=8 {
        let (ds, de) = t.offsets[f];
        assert_eq!(decode_box(f, ds, de, 12), iv(3.0, 8.0));
    }
    assert_eq!(t.num_positive(), 6);
    assert!(FrameTargets::new(5, (3, 5)).is_err());
    assert!(FrameTargets::new(5, (3, 2)).is_err());
}

#[test]
fn heads_with_zero_weights_are_constant() {
    let mut store = ParamStore::new();
    let heads = HeadParams::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), 4, 5);
    store.values_mut().iter_mut().for_each(|m| m.fill(0.0));
    for len in [1, 7, 32] {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Mat::from_elem((len, 4), 0.3));
        let out = heads.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(out.offsets), (len, 2));
        assert_eq!(tape.shape(out.confidence_logits), (len, 1));
        assert_eq!(tape.shape(out.iou), (len, 1));
        let sp0 = 2f64.ln();
        assert!(tape.value(out.offsets).iter().all(|&d| (d - sp0).abs() < 1e-15));
        assert!(tape.value(out.confidence_logits).iter().all(|&c| sigmoid(c) == 0.5));
        assert!(tape.value(out.iou).iter().all(|&i| i.clamp(0.0, 1.0) == 0.0));
    }
}

#[test]
fn boundary_loss_examples() {
    let t = FrameTargets::new(10, (3, 8)).unwrap();
    let mut off = Mat::zeros((10, 2));
    for f in 3..=8 {
        off[[f, 0]] = t.offsets[f].0;
        off[[f, 1]] = t.offsets[f].1;
    }
    assert_eq!(boundary_loss_value(&off, &t).unwrap().0, 0.0);

    // One positive frame at t = 5 with offsets (2, 3), predicted (1, 3).
    let t = FrameTargets::new(10, (5, 5)).unwrap();
    let mut off = Mat::zeros((10, 2));
    off[[5, 0]] = 1.0;
    off[[5, 1]] = 3.0;
    let mut single = t.clone();
    single.offsets[5] = (2.0, 3.0);
    single.gt = (3, 8);
    let (loss, _) = boundary_loss_value(&off, &single).unwrap();
    let expected = sl1(1.0) - (oracle_iou(iv(3.0, 8.0), iv(4.0, 8.0))).ln();
    assert!((loss - expected).abs() < 1e-12);
    assert!((loss - 0.72314).abs() < 1e-5);
}

#[test]
fn boundary_loss_is_positive_off_target() {
    let t = FrameTargets::new(9, (4, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let mut off = Mat::zeros((9, 2));
        off[[4, 0]] = rng.random_range(0.0..4.0);
        off[[4, 1]] = rng.random_range(0.0..4.0);
        if off[[4, 0]] == 0.0 && off[[4, 1]] == 0.0 {
            continue;
        }
        assert!(boundary_loss_value(&off, &t).unwrap().0 > 0.0);
    }
}

#[test]
fn boundary_loss_needs_a_positive_frame() {
    let mut t = FrameTargets::new(4, (1, 2)).unwrap();
    t.positive = vec![false; 4];
    assert!(matches!(boundary_loss_value(&Mat::zeros((4, 2)), &t), Err(Error::Input(_))));
}

#[test]
fn confidence_loss_examples() {
    let t = FrameTargets::new(8, (2, 4)).unwrap();
    let sat = Mat::from_shape_fn((8, 1), |(f, _)| if t.positive[f] { 20.0 } else { -20.0 });
    assert!(confidence_loss_value(&sat, &t).unwrap().0 <= 1e-8 * 8.0 / 3.0);

    let zero = Mat::zeros((8, 1));
    let (l, _) = confidence_loss_value(&zero, &t).unwrap();
    assert!((l - 8.0 / 3.0 * 2f64.ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = Mat::from_shape_simple_fn((8, 1), || rng.random_range(-3.0..3.0));
    let oracle: f64 = (0..8)
        .map(|f| {
            let p = 1.0 / (1.0 + (-z[[f, 0]]).exp());
            if t.positive[f] {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / 3.0;
    assert!((confidence_loss_value(&z, &t).unwrap().0 - oracle).abs() < 1e-12);
}

#[test]
fn iou_loss_examples() {
    let t = FrameTargets::new(4, (1, 2)).unwrap();
    let off = array![[0.5, 0.5], [1.0, 0.0], [0.2, 0.7], [3.0, 0.0]];
    let labels = t.iou_labels(&off);
    let exact = Mat::from_shape_fn((4, 1), |(f, _)| labels[f]);
    assert_eq!(iou_loss_value(&exact, &off, &t).unwrap().0, 0.0);

    let gt = iv(1.0, 2.0);
    let boxes = [iv(0.0, 0.5), iv(0.0, 1.0), iv(1.8, 2.7), iv(0.0, 3.0)];
    let pred = array![[0.1], [0.9], [0.4], [-0.2]];
    let oracle: f64 = boxes.iter().enumerate().map(|(f, &b)| sl1(pred[[f, 0]] - oracle_iou(b, gt))).sum::<f64>() / 4.0;
    assert!((iou_loss_value(&pred, &off, &t).unwrap().0 - oracle).abs() < 1e-12);

    // Every box far from the ground truth and î = 0.
    let t = FrameTargets::new(12, (10, 11)).unwrap();
    let off = Mat::zeros((12, 2));
    let mut zero_iou = Mat::zeros((12, 1));
    let labels = t.iou_labels(&off);
    for f in 0..10 {
        assert_eq!(labels[f], 0.0);
    }
    zero_iou[[10, 0]] = labels[10];
    zero_iou[[11, 0]] = labels[11];
    assert_eq!(iou_loss_value(&zero_iou, &off, &t).unwrap().0, 0.0);
}

fn run_total(weights: LossWeights, seed: u64) -> (f64, f64, f64, f64) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = HeadParams::new(&mut store, &mut rng, 3, 4);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(Mat::from_shape_simple_fn((7, 3), || rng.random_range(-1.0..1.0)));
    let out = heads.forward(&mut tape, &p, x).unwrap();
    let t = FrameTargets::new(7, (2, 4)).unwrap();
    let l = total_loss(&mut tape, &out, &t, &weights).unwrap();
    (tape.scalar(l.total), tape.scalar(l.boundary), tape.scalar(l.confidence), tape.scalar(l.iou))
}

#[test]
fn total_loss_combines_components() {
    let (total, b, c, i) = run_total(LossWeights::default(), 5);
    assert!((total - (b + c + i)).abs() < 1e-12);
    let (total, b, _, _) = run_total(LossWeights { boundary: 1.0, confidence: 0.0, iou: 0.0 }, 5);
    assert_eq!(total, b);
    assert!(LossWeights { boundary: 1.0, confidence: -0.1, iou: 1.0 }.validate().is_err());
}

#[test]
fn total_loss_is_zero_on_a_perfect_prediction() {
    let t = FrameTargets::new(6, (1, 3)).unwrap();
    let mut tape = Tape::new();
    let off = tape.constant(Mat::from_shape_fn((6, 2), |(f, k)| if k == 0 { t.offsets[f].0 } else { t.offsets[f].1 }));
    let labels = t.iou_labels(tape.value(off));
    let iou = tape.constant(Mat::from_shape_fn((6, 1), |(f, _)| labels[f]));
    let conf = tape.constant(Mat::from_shape_fn((6, 1), |(f, _)| if t.positive[f] { 800.0 } else { -800.0 }));
    let heads = HeadOutputs { offsets: off, confidence_logits: conf, iou, pre_relu: Vec::new() };
    let l = total_loss(&mut tape, &heads, &t, &LossWeights::default()).unwrap();
    assert_eq!(tape.scalar(l.total), 0.0);
}

fn kink_free(off: &Mat, t: &FrameTargets) -> bool {
    let hi = (t.len - 1) as f64;
    (0..t.len).filter(|&f| t.positive[f]).all(|f| {
        let (ds, de) = t.offsets[f];
        let (ps, pe) = (off[[f, 0]], off[[f, 1]]);
        let b = decode_box(f, ps, pe, t.len);
        let raw_s = f as f64 - ps;
        let raw_e = f as f64 + pe;
        ((ps - ds).abs() - 1.0).abs() > 0.1
            && ((pe - de).abs() - 1.0).abs() > 0.1
            && oracle_iou(b, t.gt_interval()) > 0.05
            && (b.start - t.gt.0 as f64).abs() > 0.01
            && (b.end - t.gt.1 as f64).abs() > 0.01
            && raw_s.abs() > 0.01
            && (raw_e - hi).abs() > 0.01
    })
}

#[test]
fn boundary_loss_gradient() {
    let t = FrameTargets::new(9, (2, 6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    while checked < 20 {
        let off = Mat::from_shape_simple_fn((9, 2), || rng.random_range(0.05..4.0));
        if !kink_free(&off, &t) {
            continue;
        }
        let r = grad_check(|tape, v| boundary_loss(tape, v[0], &t), &[off], 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        checked += 1;
    }
}

#[test]
fn confidence_and_iou_loss_gradients() {
    let t = FrameTargets::new(8, (3, 5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let z = Mat::from_shape_simple_fn((8, 1), || rng.random_range(-3.0..3.0));
    let r = grad_check(|tape, v| confidence_loss(tape, v[0], &t), &[z], 1e-3).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");

    let off = Mat::from_shape_simple_fn((8, 2), || rng.random_range(0.0..3.0));
    let labels = t.iou_labels(&off);
    let mut i = Mat::zeros((8, 1));
    for f in 0..8 {
        // Residuals kept away from the SmoothL1 kink at ±1.
        i[[f, 0]] = labels[f] + rng.random_range(-0.8..0.8);
    }
    let r = grad_check(
        |tape, v| {
            let off = tape.constant(off.clone());
            iou_loss(tape, v[0], off, &t)
        },
        &[i],
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn heads_and_total_loss_gradient() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let heads = HeadParams::new(&mut store, &mut rng, 4, 5);
    let t = FrameTargets::new(6, (1, 3)).unwrap();
    let mut params = store.values().to_vec();
    let n = params.len();
    params.push(Mat::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0)));
    // The IoU labels are a stop-gradient quantity: freeze them at the base point.
    let labels = {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(params[n].clone());
        let out = heads.forward(&mut tape, &p, x).unwrap();
        t.iou_labels(tape.value(out.offsets))
    };
    let r = grad_check(
        |tape, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let out = heads.forward(tape, &p, v[n])?;
            Ok(total_loss_with_labels(tape, &out, &t, &labels, &LossWeights::default())?.total)
        },
        &params,
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

fn pred(s: f64, e: f64, score: f64, frame: usize) -> Prediction {
    Prediction { interval: iv(s, e), score, frame }
}

#[test]
fn nms_examples() {
    let logits = array![[0.3]];
    let p = infer_top_n(&array![[0.0, 0.0]], &logits, &array![[0.8]], 5).unwrap();
    assert_eq!(p.len(), 1);

    let kept = nms(vec![pred(1.0, 4.0, 0.7, 0), pred(1.0, 4.0, 0.7, 1)], 5);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept.0[0].frame, 0);
    assert!(infer_top_n(&array![[0.0, 0.0]], &logits, &array![[0.8]], 0).is_err());
}

/// Among all subsets of the candidates, the greedy keep-set is the only one
/// where each candidate is kept iff it clears every higher-ranked kept one.
fn exhaustive_nms(cands: &[Prediction], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].score.total_cmp(&cands[a].score).then(cands[a].frame.cmp(&cands[b].frame)));
    let mut consistent = Vec::new();
    for mask in 0u32..(1 << cands.len()) {
        let keep = |i: usize| mask & (1 << i) != 0;
        let ok = order.iter().enumerate().all(|(rank, &c)| {
            let clear = order[..rank].iter().filter(|&&k| keep(k)).all(|&k| oracle_iou(cands[k].interval, cands[c].interval) < NMS_IOU);
            clear == keep(c)
        });
        if ok {
            consistent.push(order.iter().copied().filter(|&i| keep(i)).collect::<Vec<_>>());
        }
    }
    assert_eq!(consistent.len(), 1);
    consistent.pop().unwrap().into_iter().take(n).collect()
}

fn random_candidates(rng: &mut ChaCha8Rng) -> Vec<Prediction> {
    (0..6)
        .map(|f| {
            let s = rng.random_range(0..8) as f64;
            let e = s + rng.random_range(0..5) as f64;
            // Coarse scores so that ties occur.
            pred(s, e, rng.random_range(0..4) as f64 / 4.0, f)
        })
        .collect()
}

#[test]
fn nms_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..300 {
        let cands = random_candidates(&mut rng);
        for n in [1, 3, 6] {
            let expected = exhaustive_nms(&cands, n);
            let got: Vec<usize> = nms(cands.clone(), n).iter().map(|p| p.frame).collect();
            assert_eq!(got, expected);
        }
    }
}

proptest! {
    #[test]
    fn inference_output_is_ranked_and_separated(seed in any::<u64>(), len in 1usize..20, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let off = Mat::from_shape_simple_fn((len, 2), || rng.random_range(0.0..6.0));
        let logits = Mat::from_shape_simple_fn((len, 1), || rng.random_range(-4.0..4.0));
        let iou = Mat::from_shape_simple_fn((len, 1), || rng.random_range(-0.5..1.5));
        let out = infer_top_n(&off, &logits, &iou, n).unwrap();
        prop_assert!(!out.is_empty() && out.len() <= n);
        for w in out.0.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for (i, a) in out.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&a.score));
            for b in &out.0[i + 1..] {
                prop_assert!(interval_iou(a.interval, b.interval).unwrap() < NMS_IOU);
            }
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(2..12);
        let s = rng.random_range(0..len);
        let e = rng.random_range(s..len);
        let t = FrameTargets::new(len, (s, e)).unwrap();
        let off = Mat::from_shape_simple_fn((len, 2), || rng.random_range(0.0..5.0));
        let z = Mat::from_shape_simple_fn((len, 1), || rng.random_range(-5.0..5.0));
        let i = Mat::from_shape_simple_fn((len, 1), || rng.random_range(-1.0..2.0));
        prop_assert!(boundary_loss_value(&off, &t).unwrap().0 >= 0.0);
        prop_assert!(confidence_loss_value(&z, &t).unwrap().0 >= 0.0);
        prop_assert!(iou_loss_value(&i, &off, &t).unwrap().0 >= 0.0);
    }
}
