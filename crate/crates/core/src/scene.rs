//! Procedural scenes, their file format and the dataset index.
//!
//! # Scene file layout
//!
//! A UTF-8 header of newline-terminated lines, then raw little-endian data:
//!
//! ```text
//! cmt-scene 1
//! id <u64>
//! cameras <n>
//! camera <width> <height> <stride> <K: 16 values> <T: 16 values>   (n lines, row-major)
//! boxes <b>
//! box <class> <cx> <cy> <cz> <w> <l> <h> <yaw>                     (b lines)
//! points <m>
//! images <n> <width> <height>
//! end
//! ```
//!
//! followed by `m * 4` `f32` values `(x, y, z, intensity)` and then
//! `n * height * width * 3` bytes, pixel value `k` meaning `k / 255`. Reals in
//! the header use the shortest representation that parses back exactly.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::Matrix4;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, DataConfig};
use crate::encoders::{ImageSet, PointCloud};
use crate::error::{CmtError, Result};
use crate::geometry::{CameraModel, CameraRig, Projection, Roi};

/// Length, width and height priors (metres) of the three object classes.
pub const CLASS_SIZES: [[f64; 3]; 3] = [[4.5, 1.9, 1.6], [0.6, 0.6, 1.7], [2.0, 0.5, 1.0]];
pub const CLASS_NAMES: [&str; 3] = ["car", "pedestrian", "barrier"];
const CLASS_COLORS: [[f32; 3]; 3] = [[0.85, 0.15, 0.1], [0.1, 0.8, 0.2], [0.15, 0.3, 0.9]];
const CLASS_INTENSITY: [f64; 3] = [0.8, 0.35, 0.6];

/// Ground-truth box. `size` is `(w, l, h)`: `l` along the heading, `w`
/// across it.
#[derive(Clone, Debug, PartialEq)]
pub struct GtBox {
    pub class: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl GtBox {
    /// The eight corners, bottom face first.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (s, c) = self.yaw.sin_cos();
        let [w, l, h] = self.size;
        std::array::from_fn(|i| {
            let dx = if i & 1 == 0 { -l / 2.0 } else { l / 2.0 };
            let dy = if i & 2 == 0 { -w / 2.0 } else { w / 2.0 };
            let dz = if i & 4 == 0 { -h / 2.0 } else { h / 2.0 };
            [
                self.center[0] + c * dx - s * dy,
                self.center[1] + s * dx + c * dy,
                self.center[2] + dz,
            ]
        })
    }

    fn radius(&self) -> f64 {
        0.5 * (self.size[0].powi(2) + self.size[1].powi(2)).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub boxes: Vec<GtBox>,
    pub points: PointCloud,
    pub images: ImageSet,
    pub rig: CameraRig,
}

impl Scene {
    pub fn input(&self) -> crate::model::SensorInput<'_> {
        crate::model::SensorInput {
            rig: &self.rig,
            points: &self.points,
            images: &self.images,
        }
    }
}

/// Seed of scene `id` under dataset seed `data_seed`.
pub fn scene_seed(data_seed: u64, id: u64) -> u64 {
    // SplitMix64 finaliser over the pair.
    let mut z = data_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ id.wrapping_add(0x632b_e59b_d9b3_e37f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// First id of the validation range; training ids start at 0.
pub const VAL_ID_OFFSET: u64 = 1 << 32;

/// Generates scene `id` deterministically from the configuration.
pub fn generate_scene(id: u64, config: &Config) -> Result<Scene> {
    let data = &config.data;
    let roi = config.model.roi;
    let rig = config.rig()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(data.data_seed, id));
    let boxes = sample_boxes(&mut rng, data, &roi, config.model.num_classes);
    let points = sample_points(&mut rng, data, &roi, &boxes);
    let images = render_images(&mut rng, data, &rig, &boxes);
    Ok(Scene {
        id,
        boxes,
        points,
        images,
        rig,
    })
}

fn sample_boxes(rng: &mut ChaCha8Rng, data: &DataConfig, roi: &Roi, classes: usize) -> Vec<GtBox> {
    let want = if data.max_boxes == 0 {
        0
    } else {
        rng.gen_range(data.min_boxes..=data.max_boxes)
    };
    let margin = 3.0;
    let mut boxes: Vec<GtBox> = Vec::with_capacity(want);
    let mut attempts = 0;
    while boxes.len() < want && attempts < 200 * want.max(1) {
        attempts += 1;
        let class = rng.gen_range(0..classes.min(CLASS_SIZES.len()));
        let prior = CLASS_SIZES[class];
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.9..1.1));
        let (l, w, h) = (prior[0] * jitter[0], prior[1] * jitter[1], prior[2] * jitter[2]);
        let x = rng.gen_range(roi.x_min + margin..roi.x_max - margin);
        let y = rng.gen_range(roi.y_min + margin..roi.y_max - margin);
        let yaw = rng.gen_range(-PI..PI);
        let b = GtBox {
            class,
            center: [x, y, data.ground_z + h / 2.0],
            size: [w, l, h],
            yaw,
        };
        if (x * x + y * y).sqrt() < 3.0 + b.radius() {
            continue;
        }
        let clear = boxes.iter().all(|o| {
            let d = ((o.center[0] - x).powi(2) + (o.center[1] - y).powi(2)).sqrt();
            d > o.radius() + b.radius() + 0.5
        });
        if clear {
            boxes.push(b);
        }
    }
    if boxes.len() < want {
        warn!("placed {} of {want} boxes without overlap", boxes.len());
    }
    boxes
}

/// Outward normals and centres of the five exposed faces (no bottom).
fn faces(b: &GtBox) -> [([f64; 3], [f64; 3], [f64; 2]); 5] {
    let (s, c) = b.yaw.sin_cos();
    let [w, l, h] = b.size;
    let fwd = [c, s, 0.0];
    let left = [-s, c, 0.0];
    let at = |k: [f64; 3]| -> [f64; 3] { std::array::from_fn(|i| b.center[i] + k[i]) };
    [
        (fwd, at([c * l / 2.0, s * l / 2.0, 0.0]), [w, h]),
        ([-c, -s, 0.0], at([-c * l / 2.0, -s * l / 2.0, 0.0]), [w, h]),
        (left, at([-s * w / 2.0, c * w / 2.0, 0.0]), [l, h]),
        ([s, -c, 0.0], at([s * w / 2.0, -c * w / 2.0, 0.0]), [l, h]),
        ([0.0, 0.0, 1.0], at([0.0, 0.0, h / 2.0]), [l, w]),
    ]
}

fn sample_points(rng: &mut ChaCha8Rng, data: &DataConfig, roi: &Roi, boxes: &[GtBox]) -> PointCloud {
    let mut points = Vec::new();
    for b in boxes {
        let range2 = b.center[0].powi(2) + b.center[1].powi(2);
        let n = ((data.point_density / range2.max(1.0)) as usize).max(data.min_box_points.max(1));
        let visible: Vec<_> = faces(b)
            .into_iter()
            .filter(|(nrm, ctr, _)| nrm.iter().zip(ctr).map(|(a, p)| a * (0.0 - p)).sum::<f64>() > 0.0)
            .collect();
        let areas: Vec<f64> = visible.iter().map(|f| f.2[0] * f.2[1]).collect();
        let total: f64 = areas.iter().sum();
        let (s, c) = b.yaw.sin_cos();
        for k in 0..n {
            let mut pick = rng.gen_range(0.0..total);
            let mut fi = 0;
            while fi + 1 < visible.len() && pick >= areas[fi] {
                pick -= areas[fi];
                fi += 1;
            }
            let (nrm, ctr, _) = visible[fi];
            let (a, bb) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            // In-face axes: top face spans heading and lateral directions,
            // side faces span their horizontal edge and the vertical.
            let p: [f64; 3] = if nrm[2] > 0.5 {
                let (l, w) = (b.size[1], b.size[0]);
                [ctr[0] + c * a * l - s * bb * w, ctr[1] + s * a * l + c * bb * w, ctr[2]]
            } else {
                let edge = [-nrm[1], nrm[0]];
                let len = if (nrm[0] * c + nrm[1] * s).abs() > 0.5 {
                    b.size[0]
                } else {
                    b.size[1]
                };
                [
                    ctr[0] + edge[0] * a * len,
                    ctr[1] + edge[1] * a * len,
                    ctr[2] + bb * b.size[2],
                ]
            };
            let noise: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.02..0.02));
            let intensity = (CLASS_INTENSITY[b.class] + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
            let dropped = rng.gen::<f64>() < data.point_dropout;
            if dropped && k > 0 {
                continue;
            }
            points.push([
                (p[0] + noise[0]) as f32,
                (p[1] + noise[1]) as f32,
                (p[2] + noise[2]) as f32,
                intensity as f32,
            ]);
        }
    }
    for _ in 0..data.clutter_points {
        let x = rng.gen_range(roi.x_min..roi.x_max);
        let y = rng.gen_range(roi.y_min..roi.y_max);
        let ground = rng.gen::<f64>() < 0.9;
        let z = if ground {
            data.ground_z + rng.gen_range(-0.05..0.05)
        } else {
            rng.gen_range(data.ground_z..roi.z_max)
        };
        let intensity = rng.gen_range(0.0..0.3);
        if rng.gen::<f64>() < data.point_dropout {
            continue;
        }
        points.push([x as f32, y as f32, z as f32, intensity as f32]);
    }
    PointCloud { points }
}

fn quantize(x: f32) -> f32 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render_images(rng: &mut ChaCha8Rng, data: &DataConfig, rig: &CameraRig, boxes: &[GtBox]) -> ImageSet {
    let (w, h) = (data.image_width, data.image_height);
    let mut images = Vec::with_capacity(rig.len());
    for cam in &rig.cameras {
        let mut img = vec![0.0f32; w * h * 3];
        // Background: sky above the horizon row, ground below, both textured.
        let horizon = h as f64 / 2.0;
        for y in 0..h {
            for x in 0..w {
                let t: f32 = rng.gen_range(-0.05..0.05);
                let px = if (y as f64) < horizon {
                    [0.55 + t, 0.7 + t, 0.9 + t]
                } else {
                    [0.4 + t, 0.36 + t, 0.3 + t]
                };
                img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&px);
            }
        }
        // Painter's order: farthest first.
        let mut order: Vec<(f64, usize)> = boxes
            .iter()
            .enumerate()
            .filter_map(|(i, b)| cam.project_unbounded(b.center).map(|(_, _, d)| (d, i)))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (depth, i) in order {
            let b = &boxes[i];
            let proj: Option<Vec<(f64, f64)>> = b
                .corners()
                .iter()
                .map(|&p| cam.project_unbounded(p).map(|(u, v, _)| (u, v)))
                .collect();
            let Some(proj) = proj else { continue };
            let (mut u0, mut v0, mut u1, mut v1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for (u, v) in proj {
                u0 = u0.min(u);
                v0 = v0.min(v);
                u1 = u1.max(u);
                v1 = v1.max(v);
            }
            let x0 = u0.floor().max(0.0) as i64;
            let y0 = v0.floor().max(0.0) as i64;
            let x1 = (u1.ceil() as i64).min(w as i64);
            let y1 = (v1.ceil() as i64).min(h as i64);
            let shade = (1.0 - (depth / 80.0).min(0.5)) as f32;
            let color = CLASS_COLORS[b.class];
            for y in y0.max(0)..y1 {
                for x in x0.max(0)..x1 {
                    let t: f32 = rng.gen_range(-0.04..0.04);
                    let o = (y as usize * w + x as usize) * 3;
                    for ch in 0..3 {
                        img[o + ch] = color[ch] * shade + t;
                    }
                }
            }
        }
        img.iter_mut().for_each(|p| *p = quantize(*p));
        images.push(img);
    }
    ImageSet {
        width: w,
        height: h,
        images,
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

fn corrupt(msg: impl Into<String>) -> CmtError {
    CmtError::Corrupt(msg.into())
}

/// Serialises a scene into the documented layout.
pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let mut head = String::new();
    let _ = writeln!(head, "cmt-scene 1");
    let _ = writeln!(head, "id {}", scene.id);
    let _ = writeln!(head, "cameras {}", scene.rig.len());
    for cam in &scene.rig.cameras {
        let (w, h) = cam.image_size();
        let k: Vec<String> = cam.intrinsics().transpose().iter().map(|&x| fmt_f(x)).collect();
        let t: Vec<String> = cam.extrinsics().transpose().iter().map(|&x| fmt_f(x)).collect();
        let _ = writeln!(head, "camera {w} {h} {} {} {}", cam.stride(), k.join(" "), t.join(" "));
    }
    let _ = writeln!(head, "boxes {}", scene.boxes.len());
    for b in &scene.boxes {
        let vals: Vec<String> = b
            .center
            .iter()
            .chain(&b.size)
            .chain([&b.yaw])
            .map(|&x| fmt_f(x))
            .collect();
        let _ = writeln!(head, "box {} {}", b.class, vals.join(" "));
    }
    let _ = writeln!(head, "points {}", scene.points.points.len());
    let _ = writeln!(
        head,
        "images {} {} {}",
        scene.images.images.len(),
        scene.images.width,
        scene.images.height
    );
    let _ = writeln!(head, "end");
    let mut out = head.into_bytes();
    for p in &scene.points.points {
        for x in p {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for img in &scene.images.images {
        out.extend(img.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    let end = find_header_end(bytes).ok_or_else(|| corrupt("scene header has no `end` line"))?;
    let head = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("scene header is not UTF-8"))?;
    let mut lines = head.lines();
    let mut next = |tag: &str| -> Result<Vec<&str>> {
        let line = lines.next().ok_or_else(|| corrupt(format!("missing `{tag}` line")))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.first() != Some(&tag) {
            return Err(corrupt(format!("expected `{tag}`, found `{line}`")));
        }
        Ok(parts[1..].to_vec())
    };
    let magic = next("cmt-scene")?;
    if magic != ["1"] {
        return Err(CmtError::Incompatible(format!("scene format version {magic:?}")));
    }
    let id: u64 = num(next("id")?.first().copied())?;
    let n_cams: usize = num(next("cameras")?.first().copied())?;
    let mut cameras = Vec::with_capacity(n_cams);
    for _ in 0..n_cams {
        let f = next("camera")?;
        if f.len() != 35 {
            return Err(corrupt("camera line needs 35 fields"));
        }
        let (w, h, s): (usize, usize, usize) = (num(Some(f[0]))?, num(Some(f[1]))?, num(Some(f[2]))?);
        let vals: Vec<f64> = f[3..].iter().map(|x| num(Some(x))).collect::<Result<_>>()?;
        let k = Matrix4::from_row_slice(&vals[..16]);
        let t = Matrix4::from_row_slice(&vals[16..]);
        cameras.push(CameraModel::new(k, t, w, h, s)?);
    }
    let n_boxes: usize = num(next("boxes")?.first().copied())?;
    let mut boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let f = next("box")?;
        if f.len() != 8 {
            return Err(corrupt("box line needs 8 fields"));
        }
        let v: Vec<f64> = f[1..].iter().map(|x| num(Some(x))).collect::<Result<_>>()?;
        boxes.push(GtBox {
            class: num(Some(f[0]))?,
            center: [v[0], v[1], v[2]],
            size: [v[3], v[4], v[5]],
            yaw: v[6],
        });
    }
    let m: usize = num(next("points")?.first().copied())?;
    let im = next("images")?;
    if im.len() != 3 {
        return Err(corrupt("images line needs 3 fields"));
    }
    let (n_img, w, h): (usize, usize, usize) = (num(Some(im[0]))?, num(Some(im[1]))?, num(Some(im[2]))?);
    next("end")?;
    let body = &bytes[end..];
    let pts_len = m * 16;
    let img_len = n_img * w * h * 3;
    if body.len() != pts_len + img_len {
        return Err(corrupt(format!(
            "body has {} bytes, expected {}",
            body.len(),
            pts_len + img_len
        )));
    }
    let points = body[..pts_len]
        .chunks_exact(16)
        .map(|c| std::array::from_fn(|i| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes"))))
        .collect();
    let images = body[pts_len..]
        .chunks_exact((w * h * 3).max(1))
        .take(n_img)
        .map(|c| c.iter().map(|&b| b as f32 / 255.0).collect())
        .collect();
    let scene = Scene {
        id,
        boxes,
        points: PointCloud { points },
        images: ImageSet {
            width: w,
            height: h,
            images,
        },
        rig: CameraRig { cameras },
    };
    scene.images.check(&scene.rig)?;
    Ok(scene)
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let pat = b"\nend\n";
    bytes.windows(pat.len()).position(|w| w == pat).map(|i| i + pat.len())
}

fn num<V: std::str::FromStr>(s: Option<&str>) -> Result<V> {
    let s = s.ok_or_else(|| corrupt("missing field"))?;
    s.parse().map_err(|_| corrupt(format!("cannot parse `{s}`")))
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, encode_scene(scene))?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    decode_scene(&fs::read(path)?)
}

pub const INDEX_FILE: &str = "index.txt";

/// Scene files of a dataset directory, split into training and validation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl DatasetIndex {
    pub fn read(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(INDEX_FILE))?;
        let mut idx = DatasetIndex {
            root: root.to_path_buf(),
            ..Default::default()
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match line.split_once(' ') {
                Some(("train", f)) => idx.train.push(f.to_string()),
                Some(("val", f)) => idx.val.push(f.to_string()),
                _ => return Err(corrupt(format!("bad index line `{line}`"))),
            }
        }
        Ok(idx)
    }

    pub fn write(&self) -> Result<()> {
        let mut text = String::new();
        for f in &self.train {
            let _ = writeln!(text, "train {f}");
        }
        for f in &self.val {
            let _ = writeln!(text, "val {f}");
        }
        fs::write(self.root.join(INDEX_FILE), text)?;
        Ok(())
    }

    pub fn load_train(&self) -> Result<Vec<Scene>> {
        self.train.iter().map(|f| read_scene(&self.root.join(f))).collect()
    }

    pub fn load_val(&self) -> Result<Vec<Scene>> {
        self.val.iter().map(|f| read_scene(&self.root.join(f))).collect()
    }
}

/// Generates `n_train` training and `n_val` validation scenes in memory.
/// Training ids are `0..n_train`, validation ids start at [`VAL_ID_OFFSET`].
pub fn generate_split(config: &Config) -> Result<(Vec<Scene>, Vec<Scene>)> {
    use rayon::prelude::*;
    let train = (0..config.data.n_train as u64)
        .into_par_iter()
        .map(|i| generate_scene(i, config))
        .collect::<Result<Vec<_>>>()?;
    let val = (0..config.data.n_val as u64)
        .into_par_iter()
        .map(|i| generate_scene(VAL_ID_OFFSET + i, config))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, val))
}

/// Writes a generated dataset plus its index into `root`.
pub fn write_dataset(root: &Path, config: &Config) -> Result<DatasetIndex> {
    fs::create_dir_all(root)?;
    let (train, val) = generate_split(config)?;
    let mut idx = DatasetIndex {
        root: root.to_path_buf(),
        ..Default::default()
    };
    for s in &train {
        let name = format!("train_{:05}.scene", s.id);
        write_scene(s, &root.join(&name))?;
        idx.train.push(name);
    }
    for s in &val {
        let name = format!("val_{:05}.scene", s.id - VAL_ID_OFFSET);
        write_scene(s, &root.join(&name))?;
        idx.val.push(name);
    }
    idx.write()?;
    Ok(idx)
}

/// Projects a box centre into every camera; used by tests and diagnostics.
pub fn visible_in(rig: &CameraRig, p: [f64; 3]) -> Vec<usize> {
    rig.cameras
        .iter()
        .enumerate()
        .filter(|(_, c)| matches!(c.project(p), Projection::Visible { .. }))
        .map(|(i, _)| i)
        .collect()
}
