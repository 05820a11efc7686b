#![allow(dead_code)]

use cmt_core::config::Config;
use cmt_core::decoder::generate_denoise_queries;
use cmt_core::encoders::{ImageSet, ModalityMask};
use cmt_core::loss::{compute_loss, LossWeights};
use cmt_core::model::{CmtModel, ForwardOptions};
use cmt_core::scene::{generate_scene, Scene};
use cmt_tensor::gradcheck::{check_gradients_at, relative_error};
use cmt_tensor::{Bound, Tape, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A configuration small enough for finite differences and quick training.
pub fn tiny() -> Config {
    let mut c = Config::desk();
    c.apply_text(
        "d_model = 8\nheads = 2\nmlp_hidden = 8\nffn_hidden = 8\ndecoder_layers = 2\n\
         num_queries = 12\nbev_cells = 8,8\npillar_channels = 4\ndepth_bins = 4\n\
         cameras = 2\nimage_width = 16\nimage_height = 16\nclutter_points = 100\n\
         min_boxes = 2\nmax_boxes = 2\ndn_groups = 2\n",
    )
    .expect("valid tiny config");
    c
}

/// First generated scene with `n` boxes, each close enough to carry points.
pub fn scene_with_boxes(config: &Config, n: usize) -> Scene {
    let mut c = config.clone();
    c.data.min_boxes = n;
    c.data.max_boxes = n;
    (0..)
        .map(|id| generate_scene(id, &c).expect("scene"))
        .find(|s| s.boxes.len() == n)
        .expect("scene with requested boxes")
}

fn to_tensor_err(e: cmt_core::CmtError) -> TensorError {
    TensorError::Domain {
        op: "model",
        detail: e.to_string(),
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Finite differences through the whole detector and loss on a 2-box scene
/// at 64-bit. Returns the worst per-parameter relative error and the number
/// of non-zero gradient entries compared.
pub fn pipeline_gradient_check() -> Result<(f64, usize), String> {
    let mut cfg = tiny();
    // Anchors also feed the stop-gradient image point set, so they stay fixed here.
    cfg.model.learnable_anchors = false;
    let scene = scene_with_boxes(&cfg, 2);
    let mut model = CmtModel::<f64>::new(&cfg.model).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Zero biases and zero query content sit on ReLU kinks and make every
    // query row identical; check at a generic point instead.
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        if name.ends_with(".bias") || name == "query.content" {
            for x in model.params.get_mut(id).data_mut() {
                *x += rng.gen_range(-0.1..0.1);
            }
        }
    }
    let centers: Vec<[f64; 3]> = scene.boxes.iter().map(|b| b.center).collect();
    let dn = generate_denoise_queries(&centers, 2, 1.0, true, &cfg.model.roi, &mut rng);
    let opts = ForwardOptions {
        denoise: Some(dn),
        ..Default::default()
    };
    let weights = LossWeights::from(&cfg.train);

    let inputs: Vec<_> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let coords: Vec<Vec<usize>> = model
        .params
        .iter()
        .map(|(name, t)| {
            if name == "query.anchors" {
                Vec::new()
            } else {
                let mut idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..t.numel())).collect();
                idx.sort_unstable();
                idx.dedup();
                idx
            }
        })
        .collect();
    let check = check_gradients_at(&inputs, &coords, 1e-6, |tape, vars| {
        let bound = Bound::from_vars(vars.to_vec());
        let out = model
            .forward(tape, &bound, &scene.input(), &opts)
            .map_err(to_tensor_err)?;
        let (loss, _, _) = compute_loss(tape, &out, &scene.boxes, &weights).map_err(to_tensor_err)?;
        Ok(loss)
    })
    .map_err(|e| e.to_string())?;
    // Key biases cancel inside the softmax, so their true gradient is zero and
    // only rounding noise is left to compare.
    let mut worst = 0.0f64;
    for (i, (name, _)) in model.params.iter().enumerate() {
        let (a, n) = (&check.analytic[i], &check.numeric[i]);
        let scale = a.iter().chain(n).fold(0.0f64, |m, x| m.max(x.abs()));
        if scale < 1e-9 {
            continue;
        }
        let err = relative_error(a, n);
        ensure(err <= 1e-4, || {
            format!("{name}: relative error {err:.3e}, {a:?} vs {n:?}")
        })?;
        worst = worst.max(err);
    }
    let touched = check.analytic.iter().flatten().filter(|g| **g != 0.0).count();
    Ok((worst, touched))
}

/// Matchable outputs pass no gradient to denoising queries, and denoising
/// groups pass none to each other.
pub fn denoise_leakage_check() -> Result<(), String> {
    let cfg = tiny();
    let scene = scene_with_boxes(&cfg, 2);
    let model = CmtModel::<f64>::new(&cfg.model).map_err(|e| e.to_string())?;
    let centers: Vec<[f64; 3]> = scene.boxes.iter().map(|b| b.center).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dn = generate_denoise_queries(&centers, 2, 1.0, true, &cfg.model.roi, &mut rng);
    let per_group = dn.len() / 2;
    let opts = ForwardOptions {
        denoise: Some(dn),
        ..Default::default()
    };
    let n = cfg.model.num_queries;
    let d = cfg.model.d_model;
    let run = |rows: (usize, usize), both_heads: bool| -> Result<(Vec<f64>, Vec<f64>), String> {
        let err = |e: TensorError| e.to_string();
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape, true);
        let out = model
            .forward(&mut tape, &params, &scene.input(), &opts)
            .map_err(|e| e.to_string())?;
        let last = *out.layers.last().ok_or("no decoder layers")?;
        let cls = tape.slice_rows(last.cls, rows.0, rows.1).map_err(err)?;
        let mut loss = tape.sum(cls).map_err(err)?;
        if both_heads {
            let reg = tape.slice_rows(last.reg, rows.0, rows.1).map_err(err)?;
            let r = tape.sum(reg).map_err(err)?;
            loss = tape.add(loss, r).map_err(err)?;
        }
        let grads = tape.backward(loss).map_err(err)?;
        let dn_grad = grads.get_or_zeros(out.denoise_content.ok_or("no denoising queries")?);
        Ok((dn_grad, grads.get_or_zeros(params.var(model.arch.content))))
    };

    let (g, _) = run((0, n), true)?;
    ensure(g.iter().all(|&x| x == 0.0), || {
        "matchable outputs reach denoising queries".into()
    })?;

    let (g, content) = run((n, n + per_group), false)?;
    ensure(g[per_group * d..].iter().all(|&x| x == 0.0), || {
        "denoising group 0 reaches group 1".into()
    })?;
    ensure(g[..per_group * d].iter().any(|&x| x != 0.0), || {
        "denoising group 0 has no gradient to itself".into()
    })?;
    ensure(content.iter().any(|&x| x != 0.0), || {
        "denoising queries do not see matchable queries".into()
    })
}

/// Outputs under a dropped modality are bit-identical however that
/// modality's input is perturbed.
pub fn modality_drop_check() -> Result<(), String> {
    let cfg = tiny();
    let scene = scene_with_boxes(&cfg, 2);
    let model = CmtModel::<f32>::new(&cfg.model).map_err(|e| e.to_string())?;
    let predict = |s: &Scene, m: &ModalityMask| model.predict(&s.input(), m).map_err(|e| e.to_string());

    let mut blank = scene.clone();
    blank.images = ImageSet::blank(scene.rig.len(), scene.images.width, scene.images.height);
    let mut noisy = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for img in &mut noisy.images.images {
        img.iter_mut().for_each(|p| *p = rng.gen());
    }
    let lidar = ModalityMask::lidar_only();
    let a = predict(&scene, &lidar)?;
    ensure(a == predict(&blank, &lidar)?, || {
        "LiDAR-only output depends on blanked images".into()
    })?;
    ensure(a == predict(&noisy, &lidar)?, || {
        "LiDAR-only output depends on image noise".into()
    })?;

    let mut empty = scene.clone();
    empty.points.points.clear();
    let mut moved = scene.clone();
    moved.points.points.iter_mut().for_each(|p| p[0] += 3.0);
    let cam = ModalityMask::camera_only();
    let b = predict(&scene, &cam)?;
    ensure(b == predict(&empty, &cam)?, || {
        "camera-only output depends on an empty cloud".into()
    })?;
    ensure(b == predict(&moved, &cam)?, || {
        "camera-only output depends on shifted points".into()
    })?;
    ensure(a != b, || "LiDAR-only and camera-only outputs coincide".into())
}
