//! Centre-distance mAP, sensor-failure masks and attention export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cmt_tensor::{Float, Tape};
use rayon::prelude::*;

use crate::decoder::BoxPrediction;
use crate::encoders::{ModalityMask, TokenSource};
use crate::error::{CmtError, Result};
use crate::model::{CmtModel, ForwardOptions};
use crate::scene::{GtBox, Scene};

pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const SCORE_THRESHOLD: f64 = 0.05;
/// Threshold at which translation errors are collected.
pub const TRANSLATION_THRESHOLD: f64 = 2.0;

/// One scored detection.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub scene: u64,
    /// Index of the query (and class) within its scene, for tie-breaking.
    pub index: usize,
    pub class: usize,
    pub score: f64,
    pub center: [f64; 3],
}

/// Detections of one scene: every (query, class) pair scoring above the
/// threshold.
pub fn detections_from(scene: u64, preds: &[BoxPrediction]) -> Vec<Detection> {
    let mut out = Vec::new();
    for (q, p) in preds.iter().enumerate() {
        let c = p.class_logits.len();
        for (class, s) in p.scores().into_iter().enumerate() {
            if s > SCORE_THRESHOLD {
                out.push(Detection {
                    scene,
                    index: q * c + class,
                    class,
                    score: s,
                    center: p.center,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `ap[class][threshold]`, `None` for classes without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    pub map: f64,
    /// mAP at each distance threshold.
    pub map_at: Vec<f64>,
    pub mate: f64,
    pub matches: usize,
    pub num_gt: usize,
}

impl EvalReport {
    pub fn map_at_threshold(&self, t: f64) -> f64 {
        DISTANCE_THRESHOLDS
            .iter()
            .position(|&x| x == t)
            .map_or(f64::NAN, |i| self.map_at[i])
    }

    pub const CSV_HEADER: &'static str = "class,ap_0.5,ap_1,ap_2,ap_4";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (c, row) in self.ap.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or_else(|| "nan".into(), |x| format!("{x:.6}")))
                .collect();
            let _ = writeln!(s, "{c},{}", cells.join(","));
        }
        let _ = writeln!(s, "mAP,{:.6}", self.map);
        let _ = writeln!(s, "mATE,{:.6}", self.mate);
        s
    }

    pub fn pretty(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mAP {:.4}  mATE {:.4}  ({} GT, {} matches @2m)",
            self.map, self.mate, self.num_gt, self.matches
        );
        for (i, t) in DISTANCE_THRESHOLDS.iter().enumerate() {
            let _ = writeln!(s, "  mAP@{t}m {:.4}", self.map_at[i]);
        }
        s
    }
}

fn bev_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// 101-point interpolated average precision of score-sorted true-positive
/// flags against `n_gt` ground truths.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    // Monotone envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Greedy matching, highest score first: each detection takes the nearest
/// unmatched ground truth of its class within `threshold`. Returns the TP
/// flags in processed order and the matched distances.
pub fn greedy_match(dets: &[&Detection], gts: &[(u64, &GtBox)], threshold: f64) -> (Vec<bool>, Vec<f64>) {
    let mut order: Vec<&Detection> = dets.to_vec();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.scene.cmp(&b.scene))
            .then(a.index.cmp(&b.index))
    });
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(order.len());
    let mut dists = Vec::new();
    for d in order {
        let mut best: Option<(f64, usize)> = None;
        for (j, (scene, g)) in gts.iter().enumerate() {
            if taken[j] || *scene != d.scene {
                continue;
            }
            let dist = bev_distance(d.center, g.center);
            if dist <= threshold && best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        match best {
            Some((dist, j)) => {
                taken[j] = true;
                tp.push(true);
                dists.push(dist);
            }
            None => tp.push(false),
        }
    }
    (tp, dists)
}

/// Aggregates per-scene detections into an [`EvalReport`].
pub fn evaluate_detections(scenes: &[(u64, Vec<GtBox>)], dets: &[Detection], num_classes: usize) -> EvalReport {
    let mut ap = vec![vec![None; DISTANCE_THRESHOLDS.len()]; num_classes];
    let mut errors = Vec::new();
    let mut num_gt = 0;
    for (class, row) in ap.iter_mut().enumerate() {
        let gts: Vec<(u64, &GtBox)> = scenes
            .iter()
            .flat_map(|(id, b)| b.iter().filter(|g| g.class == class).map(move |g| (*id, g)))
            .collect();
        num_gt += gts.len();
        if gts.is_empty() {
            continue;
        }
        let cd: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        for (ti, &t) in DISTANCE_THRESHOLDS.iter().enumerate() {
            let (tp, dists) = greedy_match(&cd, &gts, t);
            row[ti] = Some(average_precision(&tp, gts.len()));
            if t == TRANSLATION_THRESHOLD {
                errors.extend(dists);
            }
        }
    }
    let mut map_at = vec![0.0; DISTANCE_THRESHOLDS.len()];
    let valid: Vec<&Vec<Option<f64>>> = ap.iter().filter(|r| r[0].is_some()).collect();
    for (ti, m) in map_at.iter_mut().enumerate() {
        if !valid.is_empty() {
            *m = valid.iter().map(|r| r[ti].unwrap_or(0.0)).sum::<f64>() / valid.len() as f64;
        }
    }
    let map = map_at.iter().sum::<f64>() / map_at.len() as f64;
    let mate = if errors.is_empty() {
        TRANSLATION_THRESHOLD
    } else {
        // Sorted before summing so the result is independent of scene order.
        errors.sort_by(f64::total_cmp);
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    EvalReport {
        ap,
        map,
        map_at,
        mate,
        matches: errors.len(),
        num_gt,
    }
}

/// Runs the model on every scene under `mask` and scores the detections.
pub fn evaluate<T: Float>(model: &CmtModel<T>, scenes: &[Scene], mask: &ModalityMask) -> Result<EvalReport> {
    let dets: Vec<Vec<Detection>> = scenes
        .par_iter()
        .map(|s| Ok(detections_from(s.id, &model.predict(&s.input(), mask)?)))
        .collect::<Result<_>>()?;
    let gts: Vec<(u64, Vec<GtBox>)> = scenes.iter().map(|s| (s.id, s.boxes.clone())).collect();
    Ok(evaluate_detections(&gts, &dets.concat(), model.config.num_classes))
}

/// Evaluation-time sensor failures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureMode {
    None,
    SingleCamera(usize),
    AllCameras,
    Lidar,
}

impl FailureMode {
    pub fn label(&self) -> String {
        match self {
            FailureMode::None => "both".into(),
            FailureMode::SingleCamera(i) => format!("miss_camera_{i}"),
            FailureMode::AllCameras => "camera_miss".into(),
            FailureMode::Lidar => "lidar_miss".into(),
        }
    }
}

pub fn simulate_sensor_failure(mode: FailureMode) -> ModalityMask {
    match mode {
        FailureMode::None => ModalityMask::both(),
        FailureMode::SingleCamera(i) => ModalityMask::without_camera(i),
        FailureMode::AllCameras => ModalityMask::lidar_only(),
        FailureMode::Lidar => ModalityMask::camera_only(),
    }
}

/// The robustness sweep: both sensors, LiDAR only, cameras only, then each
/// single camera missing.
pub fn robustness_modes(cameras: usize) -> Vec<FailureMode> {
    let mut m = vec![FailureMode::None, FailureMode::AllCameras, FailureMode::Lidar];
    m.extend((0..cameras).map(FailureMode::SingleCamera));
    m
}

/// Writes one BEV map and one map per camera for each query: attention as
/// a greyscale PPM (max-normalised) and as CSV, plus a summary CSV with the
/// anchor and predicted centre of each query. Returns the written paths.
pub fn dump_attention<T: Float>(
    model: &CmtModel<T>,
    scene: &Scene,
    layer: usize,
    queries: &[usize],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if layer >= model.config.decoder_layers {
        return Err(CmtError::Config(format!("layer {layer} out of range")));
    }
    fs::create_dir_all(dir)?;
    let mut tape = Tape::new().with_finite_checks(false);
    let params = model.params.bind(&mut tape, false);
    let opts = ForwardOptions {
        keep_attention: Some(layer),
        ..Default::default()
    };
    let out = model.forward(&mut tape, &params, &scene.input(), &opts)?;
    let attn = out.attention.as_ref().expect("attention kept");
    let last = out.layers[layer];
    let boxes = crate::decoder::decode_boxes(tape.value(last.cls), tape.value(last.reg));
    let anchors = model.anchor_values();
    let roi = &model.config.roi;
    let mut written = Vec::new();
    let mut summary = String::from("query,anchor_x,anchor_y,anchor_z,pred_x,pred_y,pred_z,score\n");
    let cams = scene.rig.len();
    for &q in queries {
        if q >= out.n_match {
            return Err(CmtError::Config(format!("query {q} out of range")));
        }
        let row: Vec<f64> = attn.row(q).iter().map(|x| x.to_f64()).collect();
        let a = crate::geometry::denormalize_anchor(anchors[q].map(|x| x.clamp(0.0, 1.0)), roi)?;
        let b = &boxes[q];
        let score = b.scores().into_iter().fold(0.0, f64::max);
        let _ = writeln!(
            summary,
            "{q},{},{},{},{},{},{},{score}",
            a[0], a[1], a[2], b.center[0], b.center[1], b.center[2]
        );
        let (nu, nv) = (model.bev.n_u, model.bev.n_v);
        let mut grids: Vec<(String, usize, usize, Vec<f64>)> = vec![("bev".into(), nv, nu, vec![0.0; nu * nv])];
        for (i, cam) in scene.rig.cameras.iter().enumerate() {
            let (c, r) = cam.feature_grid();
            grids.push((format!("cam{i}"), c, r, vec![0.0; c * r]));
        }
        for (w, src) in row.iter().zip(&out.tokens.provenance) {
            match *src {
                TokenSource::Bev { cell } => grids[0].3[cell] = *w,
                TokenSource::Camera { camera, cell } => grids[1 + camera].3[cell] = *w,
            }
        }
        debug_assert_eq!(grids.len(), cams + 1);
        for (name, width, height, values) in grids {
            let stem = dir.join(format!("q{q}_{name}"));
            // BEV cells are stored x-major; write with x up the image rows.
            let (img, csv) = if name == "bev" {
                let mut t = vec![0.0; values.len()];
                for u in 0..height {
                    for v in 0..width {
                        t[(height - 1 - u) * width + (width - 1 - v)] = values[u * width + v];
                    }
                }
                (t, values.clone())
            } else {
                (values.clone(), values.clone())
            };
            let ppm = stem.with_extension("ppm");
            fs::write(&ppm, grey_ppm(&img, width, height))?;
            let mut text = String::new();
            for r in csv.chunks(width) {
                let cells: Vec<String> = r.iter().map(|x| format!("{x:e}")).collect();
                let _ = writeln!(text, "{}", cells.join(","));
            }
            let csv_path = stem.with_extension("csv");
            fs::write(&csv_path, text)?;
            written.push(ppm);
            written.push(csv_path);
        }
    }
    let summary_path = dir.join("queries.csv");
    fs::write(&summary_path, summary)?;
    written.push(summary_path);
    Ok(written)
}

fn grey_ppm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &v in values {
        let g = if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 };
        out.extend_from_slice(&[g, g, g]);
    }
    out
}

/// Share of a query's attention mass landing on tokens covered by ground
/// truth, and the share of such tokens; used to check response concentration.
pub fn foreground_mass(weights: &[f64], fg: &[bool]) -> (f64, f64) {
    let total: f64 = weights.iter().sum();
    let mass: f64 = weights.iter().zip(fg).filter(|(_, &f)| f).map(|(w, _)| w).sum();
    let frac = fg.iter().filter(|&&f| f).count() as f64 / fg.len().max(1) as f64;
    (if total > 0.0 { mass / total } else { 0.0 }, frac)
}
