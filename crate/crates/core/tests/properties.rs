//! Randomised structural properties of the operators, post-processing and
//! anchor fitting.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dhi_core::boxes::{iou, BBox};
use dhi_core::depth::{DepthMap, DepthWeighting, WeightingKind};
use dhi_core::detector::{kmeans_anchors, nms, Detection};
use dhi_core::operators::{depth_aware_hyper_involution_forward, GeneratorMode, GroupSpec, HyperNetwork};
use dhi_core::{BnMode, Graph, Padding, ParamStore, Tensor};

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.dot(b).unwrap()
}

/// Brute-force NMS: a detection survives iff no higher-ranked survivor of
/// its class overlaps it above the threshold.
fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let rank = |i: usize, j: usize| {
        dets[i].confidence > dets[j].confidence || (dets[i].confidence == dets[j].confidence && i < j)
    };
    let mut alive = vec![false; dets.len()];
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| if rank(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    for &i in &order {
        alive[i] = !(0..dets.len()).any(|j| {
            alive[j] && rank(j, i) && dets[j].class == dets[i].class && iou(&dets[j].bbox, &dets[i].bbox) > thr
        });
    }
    order.into_iter().filter(|&i| alive[i]).map(|i| dets[i].clone()).collect()
}

fn detection() -> impl Strategy<Value = Detection> {
    (0usize..2, 0u8..6, 0.2..0.8f64, 0.2..0.8f64, 0.05..0.4f64, 0.05..0.4f64).prop_map(|(class, c, cx, cy, w, h)| {
        Detection {
            class,
            // Coarse confidences so ties occur.
            confidence: f64::from(c) / 5.0,
            bbox: BBox::new(cx, cy, w, h),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nms_matches_brute_force_and_is_idempotent(
        dets in prop::collection::vec(detection(), 0..12),
        thr in 0.1..0.9f64,
    ) {
        let kept = nms(&dets, thr);
        prop_assert_eq!(&kept, &reference_nms(&dets, thr));
        prop_assert_eq!(nms(&kept, thr), kept);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv(
        seed in 0u64..1000,
        h in 1usize..7,
        w in 1usize..7,
        stride in 1usize..3,
        f in prop::sample::select(vec![1usize, 3, 5]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ci, co) = (2, 3);
        let x = Tensor::uniform(&[2, h, w, ci], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[co, ci, f, f], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k);
        let ax = g.conv2d(xv, kv, None, stride, Padding::Same).unwrap();
        let y = Tensor::uniform(g.value(ax).shape(), -1.0, 1.0, &mut rng);
        let yv = g.constant(y.clone());
        let aty = g.transposed_conv2d(yv, kv, stride, Some((h, w))).unwrap();
        let lhs = dot(g.value(ax), &y);
        let rhs = dot(&x, g.value(aty));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn weighting_is_symmetric_and_bounded(d1 in -5.0..5.0f64, d2 in -5.0..5.0f64, gamma in 0.1..20.0f64) {
        for kind in WeightingKind::ALL {
            let wt = DepthWeighting::new(kind, gamma).unwrap();
            let a = wt.weight(d1, d2).unwrap();
            prop_assert_eq!(a, wt.weight(d2, d1).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}

/// Permuting the channels within each group permutes the output the same
/// way: all channels of a group share one kernel.
#[test]
fn group_channels_share_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, c, f) = (5, 4, 4, 3);
    let spec = GroupSpec::new(2, c).unwrap();
    let mut store = ParamStore::new();
    let net = HyperNetwork::new(&mut store, "h", c, 2, f, GeneratorMode::CoordinateModulated, &mut rng);
    let depths = vec![DepthMap::new(h, w, (0..h * w).map(|i| 1.0 + 0.01 * i as f64).collect()).unwrap()];
    let weighting = DepthWeighting::default();
    let x = Tensor::uniform(&[1, h, w, c], -1.0, 1.0, &mut rng);
    // Swap channels 0 <-> 1 (group 0) and 2 <-> 3 (group 1).
    let perm = [1, 0, 3, 2];
    let permute = |t: &Tensor| Tensor::from_fn(t.shape(), |i| t.data()[i - i % c + perm[i % c]]);

    let run = |input: Tensor, store: &mut ParamStore| {
        let mut g = Graph::new();
        let xv = g.constant(input);
        let y = depth_aware_hyper_involution_forward(&mut g, store, &net, xv, &depths, &weighting, f, spec, BnMode::Eval)
            .unwrap();
        g.value(y).clone()
    };
    // The generator sees the permuted input, so compare against a generator
    // whose first layer is permuted to match.
    let mut permuted_store = store.clone();
    let id = permuted_store.find("h.n1.0.weight").unwrap();
    let wt = permuted_store.get(id).clone();
    *permuted_store.get_mut(id) = Tensor::from_fn(wt.shape(), |i| wt.data()[i - i % c + perm[i % c]]);

    let y = run(x.clone(), &mut store);
    let yp = run(permute(&x), &mut permuted_store);
    assert!(permute(&y).max_abs_diff(&yp) < 1e-13);
}

#[test]
fn detector_output_is_deterministic() {
    use dhi_core::detector::{Detector, ModelConfig};
    let cfg = ModelConfig {
        input_size: 32,
        ..ModelConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = cfg.input_size;
    let rgb = Tensor::uniform(&[1, n, n, 3], 0.0, 1.0, &mut rng);
    let depths = vec![DepthMap::constant(n, n, 1.2).unwrap()];
    let run = || {
        let mut model = Detector::new(cfg.clone(), 4).unwrap();
        let mut g = Graph::new();
        let y = model.forward(&mut g, &rgb, &depths, BnMode::Eval).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn kmeans_separates_two_clusters() {
    let mut boxes = Vec::new();
    for i in 0..20 {
        let j = f64::from(i) * 0.001;
        boxes.push((0.05 + j, 0.06 + j));
        boxes.push((0.6 - j, 0.7 - j));
    }
    let anchors = kmeans_anchors(&boxes, 2, 1).unwrap();
    let shapes = anchors.shapes();
    assert_eq!(shapes.len(), 2);
    let (small, large) = if shapes[0].0 < shapes[1].0 { (shapes[0], shapes[1]) } else { (shapes[1], shapes[0]) };
    assert!(small.0 < 0.1 && small.1 < 0.1, "{shapes:?}");
    assert!(large.0 > 0.5 && large.1 > 0.6, "{shapes:?}");
}
