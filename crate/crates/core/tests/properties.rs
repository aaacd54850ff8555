//! Property tests for the invariants each module promises.

use proptest::prelude::*;

use r2o::augment::{color_jitter, gaussian_blur, grayscale, make_views, solarize, AugmentationConfig, ViewGeometry};
use r2o::encoder::{EncoderConfig, FeatureMap, HeadConfig, Mode, NetworkPair};
use r2o::eval::{abo, iou, unsup_fg_segment, BinaryMask};
use r2o::imaging::{resize_bilinear, rgb_to_lab, CropRect, ImageTensor, LabelMap};
use r2o::optim::{lr_at, step, tau_at, LrSchedule, OptimConfig, OptimizerState, TauConfig};
use r2o::pipeline::Checkpoint;
use r2o::refine::{
    align_mask, k_at, kmeans, normalized_objective, refine_batch, ClusterScope, CurriculumConfig, KMeansOptions, RefinedMask, ScheduleKind,
};
use r2o::slic::{slic_segment, SlicConfig};

fn image_strategy(min_side: usize, max_side: usize) -> impl Strategy<Value = ImageTensor<f64>> {
    (min_side..=max_side, min_side..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..=1.0, h * w * 3).prop_map(move |d| ImageTensor::new(h, w, d).unwrap())
    })
}

fn in_unit(img: &ImageTensor<f64>) -> bool {
    img.data().iter().all(|v| (0.0..=1.0).contains(v))
}

fn crop_strategy() -> impl Strategy<Value = CropRect> {
    (0.0f64..0.8, 0.0f64..0.8, 0.05f64..1.0, 0.05f64..1.0).prop_map(|(y0, x0, fh, fw)| CropRect {
        y0,
        x0,
        y1: (y0 + fh * (1.0 - y0)).min(1.0),
        x1: (x0 + fw * (1.0 - x0)).min(1.0),
    })
}

fn mask_strategy() -> impl Strategy<Value = RefinedMask> {
    (1usize..7, 1usize..7).prop_flat_map(|(h, w)| {
        prop::collection::vec(0u32..5, h * w).prop_map(move |ids| RefinedMask::new(h, w, ids).unwrap())
    })
}

fn binary_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |b| BinaryMask::new(h, w, b).unwrap())
}

fn tiny_net(seed: u64) -> NetworkPair<f64> {
    let enc = EncoderConfig {
        input_side: 8,
        stem_channels: 3,
        stem_stride: 1,
        stage_widths: vec![4, 4],
        convs_per_stage: 1,
        mid_stage: 0,
        final_stage: 1,
    };
    let heads = HeadConfig {
        projector_hidden: 6,
        projector_out: 4,
        predictor_hidden: 5,
    };
    NetworkPair::new(&enc, &heads, seed).unwrap()
}

/// Whether two labelings induce the same partition of their cells.
fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut fwd = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    a.iter().zip(b).all(|(x, y)| *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // --- imaging

    #[test]
    fn neutral_gray_has_zero_chroma(v in 0.0f64..=1.0) {
        let lab = rgb_to_lab(&ImageTensor::filled(1, 1, [v, v, v]));
        let [_, a, b] = lab.pixel(0, 0);
        prop_assert_eq!((a, b), (0.0, 0.0));
    }

    #[test]
    fn resize_is_convex_and_identity_at_same_size(img in image_strategy(1, 9), oh in 1usize..12, ow in 1usize..12) {
        prop_assert_eq!(resize_bilinear(&img, img.height(), img.width()), img.clone());
        let (lo, hi) = img.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let out = resize_bilinear(&img, oh, ow);
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn label_map_bytes_round_trip(h in 1usize..48, w in 1usize..48, top in 0u32..=65535, seed in any::<u64>()) {
        let labels = (0..h * w).map(|i| ((i as u64).wrapping_mul(seed | 1) % (top as u64 + 1)) as u32).collect();
        let map = LabelMap::new(h, w, labels).unwrap();
        prop_assert_eq!(LabelMap::from_bytes(&map.to_bytes()).unwrap(), map);
    }

    // --- augment

    #[test]
    fn photometric_ops_stay_in_unit_range(
        img in image_strategy(1, 8),
        b in 0.0f64..1.0, c in 0.0f64..1.0, s in 0.0f64..1.0, hue in 0.0f64..0.5,
        t in 0.0f64..1.0, sigma in 0.1f64..3.0,
    ) {
        prop_assert!(in_unit(&color_jitter(&img, b, c, s, hue)));
        prop_assert!(in_unit(&solarize(&img, t)));
        prop_assert!(in_unit(&grayscale(&img)));
        prop_assert!(in_unit(&gaussian_blur(&img, sigma, 7)));
    }

    #[test]
    fn view_pairs_are_reproducible(img in image_strategy(2, 20), seed in any::<u64>()) {
        let cfg = AugmentationConfig { side: 12, blur_kernel: 5, ..Default::default() };
        let (a1, a2) = make_views(&img, &cfg, seed).unwrap();
        let (b1, b2) = make_views(&img, &cfg, seed).unwrap();
        prop_assert_eq!((a1.image, a1.geometry, a2.image, a2.geometry), (b1.image, b1.geometry, b2.image, b2.geometry));
    }

    // --- slic

    #[test]
    fn slic_covers_connects_and_repeats(img in image_strategy(1, 24), n in 1usize..40) {
        let cfg = SlicConfig { n_segments: n, ..Default::default() };
        let lab = rgb_to_lab(&img);
        let r = slic_segment(&lab, &cfg).unwrap();
        prop_assert_eq!(&r, &slic_segment(&lab, &cfg).unwrap());
        let (h, w) = (img.height(), img.width());
        prop_assert_eq!(r.labels.labels().len(), h * w);
        prop_assert!(r.n_regions >= 1 && r.n_regions <= n.max(1).min(h * w));
        // Each label forms exactly one 4-connected component.
        let mut seen = vec![false; h * w];
        let mut components = std::collections::HashMap::new();
        for start in 0..h * w {
            if seen[start] {
                continue;
            }
            let label = r.labels.labels()[start];
            *components.entry(label).or_insert(0) += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (y, x) = (p / w, p % w);
                let mut visit = |q: usize| {
                    if !seen[q] && r.labels.labels()[q] == label {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if y > 0 { visit(p - w); }
                if y + 1 < h { visit(p + w); }
                if x > 0 { visit(p - 1); }
                if x + 1 < w { visit(p + 1); }
            }
        }
        prop_assert!(components.values().all(|&c| c == 1));
        prop_assert_eq!(components.len(), r.n_regions);
    }

    // --- refine

    #[test]
    fn normalized_kmeans_is_a_single_move_local_optimum(
        pts in prop::collection::vec(-5.0f64..5.0, 2..=16), k in 1usize..=3, seed in any::<u64>(),
    ) {
        let dim = if pts.len() % 2 == 0 { 2 } else { 1 };
        let m = kmeans(&pts, dim, k, seed, &KMeansOptions::normalized()).unwrap();
        prop_assert!(m.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].max(1.0)));
        let base = normalized_objective(&pts, dim, &m.assignment, m.k);
        for i in 0..m.assignment.len() {
            let from = m.assignment[i];
            if m.assignment.iter().filter(|&&a| a == from).count() < 2 {
                continue;
            }
            for to in (0..m.k).filter(|&c| c != from) {
                let mut moved = m.assignment.clone();
                moved[i] = to;
                prop_assert!(normalized_objective(&pts, dim, &moved, m.k) >= base - 1e-9);
            }
        }
    }

    #[test]
    fn lloyd_sse_never_increases(pts in prop::collection::vec(-5.0f64..5.0, 3..=60), k in 1usize..6, seed in any::<u64>()) {
        let m = kmeans(&pts, 3, k, seed, &KMeansOptions::default());
        if pts.len() % 3 == 0 {
            let m = m.unwrap();
            prop_assert!(m.sse_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].max(1.0)));
        } else {
            prop_assert!(m.is_err());
        }
    }

    #[test]
    fn region_to_object_schedules_are_monotone(
        kf in 2usize..10, extra in 0usize..150, epochs in 1usize..400, kind in 0usize..3,
    ) {
        let cfg = CurriculumConfig {
            k0: kf + extra,
            k_final: kf,
            epochs,
            kind: [ScheduleKind::Cosine, ScheduleKind::Linear, ScheduleKind::Piecewise][kind],
            ..Default::default()
        };
        let ks: Vec<usize> = (0..=epochs).map(|t| k_at(&cfg, t).unwrap()).collect();
        prop_assert!(ks.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(ks[0], cfg.k0);
        if kind < 2 {
            prop_assert_eq!(ks[epochs], kf);
        }
    }

    #[test]
    fn alignment_commutes_with_relabeling(
        mask in mask_strategy(), crop in crop_strategy(), hflip in any::<bool>(),
        oh in 1usize..9, ow in 1usize..9, shift in 1u32..50,
    ) {
        let geom = ViewGeometry { crop, hflip };
        // An injective relabeling that also reverses the id order.
        let relabel = |id: u32| 1000 - id * shift;
        let a = align_mask(&mask.relabel(relabel), &geom, oh, ow).unwrap();
        let b = align_mask(&mask, &geom, oh, ow).unwrap().relabel(relabel);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn batch_refinement_ignores_image_order(seed in any::<u64>(), rot in 1usize..4) {
        // Regions carry one of three well-separated embeddings plus small noise.
        let centers = [[0.0, 0.0, 10.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]];
        let mut x = seed | 1;
        let mut noise = || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x % 1000) as f64 / 1000.0 - 0.5
        };
        let prior = LabelMap::grid(8, 8, 4);
        let feats: Vec<FeatureMap<f64>> = (0..4)
            .map(|img| {
                let mut data = Vec::new();
                for cell in 0..64 {
                    let region = prior.labels()[cell] as usize;
                    let c = centers[(region + img * 5 + (seed as usize % 3)) % 3];
                    data.extend(c.iter().map(|v| v + 0.1 * noise()));
                }
                FeatureMap { h: 8, w: 8, d: 3, data }
            })
            .collect();
        let priors = vec![prior; 4];
        let (a, _) = refine_batch(&feats, &priors, 3, ClusterScope::Batch, seed, &KMeansOptions::default()).unwrap();
        let mut order: Vec<usize> = (0..4).collect();
        order.rotate_left(rot);
        let permuted: Vec<_> = order.iter().map(|&i| feats[i].clone()).collect();
        let (b, _) = refine_batch(&permuted, &priors, 3, ClusterScope::Batch, seed, &KMeansOptions::default()).unwrap();
        let flat_a: Vec<u32> = order.iter().flat_map(|&i| a[i].ids.iter().copied()).collect();
        let flat_b: Vec<u32> = b.iter().flat_map(|m| m.ids.iter().copied()).collect();
        prop_assert!(same_partition(&flat_a, &flat_b));
    }

    // --- optim

    #[test]
    fn lr_rises_then_falls_and_tau_rises(total in 1u64..2000, batch in 1usize..512, epochs in 1usize..500) {
        let s = LrSchedule::new(&OptimConfig::default(), batch, total).unwrap();
        let lrs: Vec<f64> = (0..=total).map(|t| lr_at(&s, t).unwrap()).collect();
        let peak = lrs.iter().cloned().fold(0.0, f64::max);
        let top = lrs.iter().position(|&v| v == peak).unwrap();
        prop_assert!(lrs[..=top].windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(lrs[top..].windows(2).all(|w| w[1] <= w[0]));
        prop_assert!((peak - s.peak).abs() <= 1e-12);
        let taus: Vec<f64> = (0..=epochs).map(|e| tau_at(&TauConfig::default(), e, epochs).unwrap()).collect();
        prop_assert!(taus.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn zero_learning_rate_changes_nothing(seed in 0u64..1000, g in -5.0f64..5.0) {
        let mut net = tiny_net(seed);
        let before = net.clone();
        let grads: Vec<Vec<f64>> = net.online.params().iter().map(|p| vec![g; p.value.len()]).collect();
        let mut state = OptimizerState::new(&net.online.params());
        step(&mut net.online.params_mut(), &grads, &mut state, 0.0, &OptimConfig::default()).unwrap();
        prop_assert_eq!(net, before);
    }

    // --- eval

    #[test]
    fn iou_is_symmetric_and_bounded(a in binary_strategy(5, 6), b in binary_strategy(5, 6)) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.count() > 0 {
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn abo_never_drops_when_a_gt_region_is_proposed(
        gt in prop::collection::vec(binary_strategy(4, 4), 1..4),
        props in prop::collection::vec(binary_strategy(4, 4), 1..4),
        pick in any::<prop::sample::Index>(),
    ) {
        let before = abo(&gt, &props).unwrap().abo;
        let mut more = props.clone();
        more.push(gt[pick.index(gt.len())].clone());
        prop_assert!(abo(&gt, &more).unwrap().abo >= before);
    }

    #[test]
    fn fg_segmentation_is_seed_deterministic(data in prop::collection::vec(-1.0f64..1.0, 6 * 6 * 2), seed in any::<u64>()) {
        let f = FeatureMap { h: 6, w: 6, d: 2, data };
        let gt = BinaryMask::from_fn(12, 12, |y, x| y < 6 && x < 8);
        prop_assert_eq!(unsup_fg_segment(&f, &gt, 3, seed).unwrap(), unsup_fg_segment(&f, &gt, 3, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // --- encoder and persistence

    #[test]
    fn eval_forward_is_pure_and_backward_leaves_params(seed in 0u64..1000, pix in prop::collection::vec(0.0f64..1.0, 8 * 8 * 3)) {
        let net = tiny_net(seed);
        let img = vec![ImageTensor::new(8, 8, pix).unwrap(); 2];
        let snapshot = net.clone();
        let a = net.target.encoder.forward(&img, Mode::Eval).unwrap();
        let b = net.target.encoder.forward(&img, Mode::Eval).unwrap();
        prop_assert_eq!(&a.fin.data, &b.fin.data);
        let (feats, cache) = net.online.encoder.forward_train(&img).unwrap();
        let _ = net.online.encoder.backward(&cache, &feats.fin).unwrap();
        prop_assert_eq!(net, snapshot);
    }

    #[test]
    fn ema_keeps_shapes(seed in 0u64..1000, tau in 0.0f64..=1.0) {
        let mut net = tiny_net(seed);
        let shapes = |n: &NetworkPair<f64>| n.target.params().iter().map(|p| (p.name.clone(), p.value.len())).collect::<Vec<_>>();
        let before = shapes(&net);
        net.ema_update(tau).unwrap();
        prop_assert_eq!(shapes(&net), before);
    }

    #[test]
    fn checkpoints_round_trip_exactly(seed in 0u64..1000, epoch in 0u64..500) {
        let net = tiny_net(seed);
        let opt = OptimizerState::new(&net.online.params());
        let ck = Checkpoint::capture(&net, &opt, epoch, seed, seed ^ 0xabc);
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let mut restored = tiny_net(seed + 1);
        let mut opt2 = OptimizerState::new(&restored.online.params());
        back.restore(&mut restored, &mut opt2).unwrap();
        prop_assert_eq!(restored, net);
    }
}

#[test]
fn large_label_map_round_trips() {
    let (h, w) = (1024, 1024);
    let map = LabelMap::new(h, w, (0..h * w).map(|i| (i % 65535) as u32).collect()).unwrap();
    let bytes = map.to_bytes();
    assert_eq!(LabelMap::from_bytes(&bytes).unwrap(), map);
}
