//! Randomised invariants of the encoders, decoder, loss and metrics.

mod common;

use cmt_core::decoder::DecoderLayer;
use cmt_core::encoders::{pillar_input, ModalityMask};
use cmt_core::eval::{evaluate_detections, Detection};
use cmt_core::geometry::BevGridSpec;
use cmt_core::loss::{compute_loss, LossWeights};
use cmt_core::model::{CmtModel, ForwardOptions};
use cmt_core::scene::{generate_scene, GtBox};
use cmt_tensor::{ParamStore, Tape, Tensor};
use common::{scene_with_boxes, tiny};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn permute_rows(t: &Tensor<f32>, order: &[usize]) -> Tensor<f32> {
    let cols = t.shape()[1];
    let data = order
        .iter()
        .flat_map(|&r| t.data()[r * cols..(r + 1) * cols].iter().copied())
        .collect();
    Tensor::from_vec(t.shape(), data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    use rand::Rng;
    Tensor::from_vec(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Two stacked decoder layers over the given queries and tokens.
fn decode(seed: u64, x: &Tensor<f32>, pos: &Tensor<f32>, feat: &Tensor<f32>, tpe: &Tensor<f32>) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let layers: Vec<DecoderLayer> = (0..2)
        .map(|l| DecoderLayer::new(&mut store, &format!("l{l}"), 8, 2, 16, &mut rng).unwrap())
        .collect();
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, false);
    let mut h = tape.constant(x.clone());
    let pos = tape.constant(pos.clone());
    let values = tape.constant(feat.clone());
    let pe = tape.constant(tpe.clone());
    let keys = tape.add(values, pe).unwrap();
    for layer in &layers {
        h = layer
            .forward(&mut tape, &params, h, pos, keys, values, None, false)
            .unwrap()
            .0;
    }
    tape.value(h).clone()
}

fn max_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn loss_value(model: &CmtModel<f64>, scene: &cmt_core::scene::Scene, boxes: &[GtBox]) -> f64 {
    let cfg = tiny();
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape, false);
    let out = model
        .forward(&mut tape, &params, &scene.input(), &ForwardOptions::default())
        .unwrap();
    let (loss, _, _) = compute_loss(&mut tape, &out, boxes, &LossWeights::from(&cfg.train)).unwrap();
    tape.value(loss).data()[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn pillar_features_ignore_point_order(seed in 0u64..1000) {
        let cfg = tiny();
        let scene = generate_scene(seed, &cfg).unwrap();
        let mut shuffled = scene.clone();
        shuffled.points.points.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let roi = &cfg.model.roi;
        let spec = BevGridSpec::for_roi(roi, cfg.model.bev_cells.0, cfg.model.bev_cells.1).unwrap();
        let (a, b) = (pillar_input(&scene.points, &spec, roi), pillar_input(&shuffled.points, &spec, roi));
        prop_assert_eq!(&a.cells, &b.cells);
        prop_assert_eq!(a.features.data(), b.features.data());

        let model = CmtModel::<f32>::new(&cfg.model).unwrap();
        let lidar = ModalityMask::lidar_only();
        prop_assert!(
            model.predict(&scene.input(), &lidar).unwrap() == model.predict(&shuffled.input(), &lidar).unwrap()
        );
    }

    #[test]
    fn decoder_ignores_token_order_and_follows_query_order(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, t, d) = (6, 20, 8);
        let (x, pos) = (random(&mut rng, n, d), random(&mut rng, n, d));
        let (feat, tpe) = (random(&mut rng, t, d), random(&mut rng, t, d));
        let base = decode(seed, &x, &pos, &feat, &tpe);

        let mut tok: Vec<usize> = (0..t).collect();
        tok.shuffle(&mut rng);
        let moved = decode(seed, &x, &pos, &permute_rows(&feat, &tok), &permute_rows(&tpe, &tok));
        prop_assert!(max_diff(&base, &moved) <= 1e-5, "token order changed outputs by {}", max_diff(&base, &moved));

        let mut q: Vec<usize> = (0..n).collect();
        q.shuffle(&mut rng);
        let moved = decode(seed, &permute_rows(&x, &q), &permute_rows(&pos, &q), &feat, &tpe);
        let expect = permute_rows(&base, &q);
        prop_assert!(max_diff(&expect, &moved) <= 1e-5, "query order broke equivariance by {}", max_diff(&expect, &moved));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn loss_ignores_ground_truth_and_query_order(seed in 0u64..1000) {
        let cfg = tiny();
        let scene = scene_with_boxes(&cfg, 2);
        let mut model = CmtModel::<f64>::new(&cfg.model).unwrap();
        let base = loss_value(&model, &scene, &scene.boxes);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut boxes = scene.boxes.clone();
        boxes.reverse();
        let swapped = loss_value(&model, &scene, &boxes);
        prop_assert!((base - swapped).abs() <= 1e-9 * base.abs().max(1.0), "{} vs {}", base, swapped);

        let mut order: Vec<usize> = (0..cfg.model.num_queries).collect();
        order.shuffle(&mut rng);
        for id in [model.arch.anchors, model.arch.content] {
            let t = model.params.get(id);
            let cols = t.shape()[1];
            let data: Vec<f64> = order.iter().flat_map(|&r| t.data()[r * cols..(r + 1) * cols].to_vec()).collect();
            *model.params.get_mut(id) = Tensor::from_vec(t.shape(), data).unwrap();
        }
        let permuted = loss_value(&model, &scene, &scene.boxes);
        prop_assert!((base - permuted).abs() <= 1e-9 * base.abs().max(1.0), "{} vs {}", base, permuted);
    }

    #[test]
    fn generated_boxes_lie_inside_the_roi(seed in 0u64..10_000) {
        let cfg = tiny();
        let scene = generate_scene(seed, &cfg).unwrap();
        for b in &scene.boxes {
            prop_assert!(cfg.model.roi.contains(b.center), "{:?} outside the RoI", b.center);
            prop_assert!(b.class < 3);
        }
    }
}

fn detection() -> impl Strategy<Value = Detection> {
    (0u64..3, 0usize..3, 0.0f64..1.0, -6.0f64..6.0, -6.0f64..6.0).prop_map(|(scene, class, score, x, y)| Detection {
        scene,
        index: 0,
        class,
        score,
        center: [x, y, 0.0],
    })
}

fn gt_box() -> impl Strategy<Value = (u64, GtBox)> {
    (0u64..3, 0usize..3, -6.0f64..6.0, -6.0f64..6.0).prop_map(|(scene, class, x, y)| {
        (
            scene,
            GtBox {
                class,
                center: [x, y, 0.0],
                size: [1.0, 1.0, 1.0],
                yaw: 0.0,
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn metrics_stay_in_range(
        dets in prop::collection::vec(detection(), 0..30),
        gts in prop::collection::vec(gt_box(), 0..12),
    ) {
        let scenes: Vec<(u64, Vec<GtBox>)> = (0..3)
            .map(|s| (s, gts.iter().filter(|g| g.0 == s).map(|g| g.1.clone()).collect()))
            .collect();
        let report = evaluate_detections(&scenes, &dets, 3);
        for ap in report.ap.iter().flatten().flatten() {
            prop_assert!((0.0..=1.0).contains(ap));
        }
        prop_assert!((0.0..=1.0).contains(&report.map));
        prop_assert!(report.mate >= 0.0 && report.mate.is_finite());
        prop_assert_eq!(report.num_gt, gts.len());
    }

    #[test]
    fn bev_grid_tiles_the_roi(n_u in 1usize..80, n_v in 1usize..80, w in 1.0f64..200.0, h in 1.0f64..200.0) {
        let mut roi = tiny().model.roi;
        roi.x_max = roi.x_min + w;
        roi.y_max = roi.y_min + h;
        let spec = BevGridSpec::for_roi(&roi, n_u, n_v).unwrap();
        prop_assert!((spec.n_u as f64 * spec.cell_u - w).abs() <= 1e-9 * w);
        prop_assert!((spec.n_v as f64 * spec.cell_v - h).abs() <= 1e-9 * h);
    }

    #[test]
    fn mask_ratios_must_sum_to_at_most_one(a in -0.5f64..1.5, b in -0.5f64..1.5) {
        let mut cfg = tiny();
        cfg.train.eta_camera = a;
        cfg.train.eta_lidar = b;
        let valid = a >= 0.0 && b >= 0.0 && a + b <= 1.0;
        prop_assert_eq!(cfg.validate().is_ok(), valid);
    }
}
