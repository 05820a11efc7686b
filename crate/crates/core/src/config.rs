//! Run configuration and its flat `key = value` text form.
//!
//! Every key is listed in [`KEYS`] together with a one-line description;
//! `Config::to_text` writes them all in that order so a written file always
//! round-trips through `Config::from_text`.

use std::fmt::Write as _;

use crate::error::{CmtError, Result};
use crate::geometry::{BevGridSpec, CameraRig, Roi};

/// How a query's image-plane point set is built for its positional embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryImagePe {
    /// Frustum points along the ray through the anchor's projected pixel,
    /// the same construction image tokens use.
    RaySet,
    /// The anchor's own normalised position repeated once per depth bin.
    Replicated,
}

/// Which coordinate terms make up a query's positional embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryPe {
    Both,
    ImageOnly,
    BevOnly,
}

impl QueryPe {
    pub fn image(self) -> bool {
        self != QueryPe::BevOnly
    }

    pub fn bev(self) -> bool {
        self != QueryPe::ImageOnly
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Hidden width of the coordinate encoders and prediction heads.
    pub mlp_hidden: usize,
    pub ffn_hidden: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub depth_bins: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub roi: Roi,
    pub bev_cells: (usize, usize),
    pub bev_heights: Vec<f64>,
    pub pillar_channels: usize,
    pub image_stride: usize,
    pub dn_groups: usize,
    pub dn_noise: f64,
    pub dn_negatives: bool,
    pub learnable_anchors: bool,
    pub query_image_pe: QueryImagePe,
    pub query_pe: QueryPe,
    /// Sinusoidal frequencies per coordinate ahead of the encoders (0: raw).
    pub pe_frequencies: usize,
    pub use_image_pe: bool,
    pub use_bev_pe: bool,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub cameras: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub camera_fov_deg: f64,
    pub camera_height: f64,
    pub camera_radius: f64,
    pub ground_z: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub clutter_points: usize,
    /// Surface points of a box at 1 m range; falls off with range squared.
    pub point_density: f64,
    pub min_box_points: usize,
    pub point_dropout: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub data_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub eta_camera: f64,
    pub eta_lidar: f64,
    pub denoise: bool,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub w_cls: f64,
    pub w_reg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    /// Full-scale defaults: 256-wide features, six decoder layers, the
    /// +-54 m x/y and [-5, 3] m z RoI, masked-modal ratios of 0.25.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 256,
                heads: 8,
                mlp_hidden: 256,
                ffn_hidden: 1024,
                decoder_layers: 6,
                num_queries: 900,
                num_classes: 3,
                depth_bins: 16,
                depth_min: 1.0,
                depth_max: 60.0,
                roi: Roi {
                    x_min: -54.0,
                    x_max: 54.0,
                    y_min: -54.0,
                    y_max: 54.0,
                    z_min: -5.0,
                    z_max: 3.0,
                },
                bev_cells: (180, 180),
                bev_heights: vec![0.0],
                pillar_channels: 64,
                image_stride: 16,
                dn_groups: 3,
                dn_noise: 1.0,
                dn_negatives: true,
                learnable_anchors: true,
                query_image_pe: QueryImagePe::RaySet,
                query_pe: QueryPe::Both,
                pe_frequencies: 6,
                use_image_pe: true,
                use_bev_pe: true,
                init_seed: 0,
            },
            data: DataConfig {
                cameras: 6,
                image_width: 256,
                image_height: 256,
                camera_fov_deg: 70.0,
                camera_height: -0.2,
                camera_radius: 0.5,
                ground_z: -1.8,
                min_boxes: 1,
                max_boxes: 10,
                clutter_points: 3000,
                point_density: 4000.0,
                min_box_points: 8,
                point_dropout: 0.1,
                n_train: 200,
                n_val: 50,
                data_seed: 0,
            },
            train: TrainConfig {
                epochs: 20,
                batch_size: 1,
                lr: 1e-4,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                grad_clip: 35.0,
                eta_camera: 0.25,
                eta_lidar: 0.25,
                denoise: true,
                seed: 0,
                checkpoint_interval: 0,
                focal_alpha: 0.25,
                focal_gamma: 2.0,
                w_cls: 2.0,
                w_reg: 0.25,
            },
        }
    }
}

impl Config {
    /// Small configuration that trains on one CPU core in minutes: 300
    /// queries, 64x64 BEV cells, six 64x64 px cameras, three decoder layers.
    pub fn desk() -> Self {
        let mut c = Self::default();
        let m = &mut c.model;
        m.d_model = 32;
        m.heads = 4;
        m.mlp_hidden = 64;
        m.ffn_hidden = 64;
        m.decoder_layers = 3;
        m.num_queries = 300;
        m.depth_max = 45.0;
        m.roi = Roi {
            x_min: -32.0,
            x_max: 32.0,
            y_min: -32.0,
            y_max: 32.0,
            z_min: -5.0,
            z_max: 3.0,
        };
        m.bev_cells = (64, 64);
        m.pillar_channels = 16;
        m.image_stride = 8;
        let d = &mut c.data;
        d.image_width = 64;
        d.image_height = 64;
        d.clutter_points = 1500;
        d.point_density = 10000.0;
        let t = &mut c.train;
        t.lr = 1e-3;
        t.epochs = 12;
        t.eta_camera = 0.0;
        t.eta_lidar = 0.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.roi.validate()?;
        let bad = |msg: &str| Err(CmtError::Config(msg.to_string()));
        if m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if m.num_queries == 0 || m.num_classes == 0 || m.decoder_layers == 0 {
            return bad("num_queries, num_classes and decoder_layers must be positive");
        }
        if m.depth_bins == 0 || !(m.depth_min > 0.0) || (m.depth_bins > 1 && !(m.depth_max > m.depth_min)) {
            return bad("depth range must satisfy 0 < depth_min < depth_max");
        }
        if m.bev_heights.is_empty() {
            return bad("bev_heights needs at least one value");
        }
        if m.dn_groups == 0 || !(m.dn_noise >= 0.0) {
            return bad("dn_groups must be >= 1 and dn_noise >= 0");
        }
        let d = &self.data;
        if d.image_width % m.image_stride != 0 || d.image_height % m.image_stride != 0 {
            return bad("image_stride must divide the image size");
        }
        if d.min_boxes > d.max_boxes {
            return bad("min_boxes must not exceed max_boxes");
        }
        if d.max_boxes > m.num_queries {
            return bad("num_queries must be at least max_boxes");
        }
        if !(0.0..1.0).contains(&d.point_dropout) {
            return bad("point_dropout must lie in [0, 1)");
        }
        let t = &self.train;
        if !(t.lr >= 0.0) {
            return bad("lr must be non-negative");
        }
        if t.eta_camera < 0.0 || t.eta_lidar < 0.0 || t.eta_camera + t.eta_lidar > 1.0 {
            return bad("eta_camera + eta_lidar must lie in [0, 1]");
        }
        if t.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    pub fn bev_spec(&self) -> Result<BevGridSpec> {
        let mut spec = BevGridSpec::for_roi(&self.model.roi, self.model.bev_cells.0, self.model.bev_cells.1)?;
        spec.heights = self.model.bev_heights.clone();
        Ok(spec)
    }

    pub fn rig(&self) -> Result<CameraRig> {
        let d = &self.data;
        CameraRig::surround(
            d.cameras,
            d.image_width,
            d.image_height,
            self.model.image_stride,
            d.camera_fov_deg,
            d.camera_height,
            d.camera_radius,
        )
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "d_model" => m.d_model = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "mlp_hidden" => m.mlp_hidden = parse(key, value)?,
            "ffn_hidden" => m.ffn_hidden = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "num_queries" => m.num_queries = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "depth_bins" => m.depth_bins = parse(key, value)?,
            "depth_min" => m.depth_min = parse(key, value)?,
            "depth_max" => m.depth_max = parse(key, value)?,
            "roi" => {
                let v: Vec<f64> = parse_list(key, value)?;
                let [x0, x1, y0, y1, z0, z1] = v[..] else {
                    return Err(CmtError::Config("roi needs six values".into()));
                };
                m.roi = Roi::new((x0, x1), (y0, y1), (z0, z1))?;
            }
            "bev_cells" => {
                let v: Vec<usize> = parse_list(key, value)?;
                let [a, b] = v[..] else {
                    return Err(CmtError::Config("bev_cells needs two values".into()));
                };
                m.bev_cells = (a, b);
            }
            "bev_heights" => m.bev_heights = parse_list(key, value)?,
            "pillar_channels" => m.pillar_channels = parse(key, value)?,
            "image_stride" => m.image_stride = parse(key, value)?,
            "dn_groups" => m.dn_groups = parse(key, value)?,
            "dn_noise" => m.dn_noise = parse(key, value)?,
            "dn_negatives" => m.dn_negatives = parse(key, value)?,
            "learnable_anchors" => m.learnable_anchors = parse(key, value)?,
            "query_image_pe" => {
                m.query_image_pe = match value {
                    "ray_set" => QueryImagePe::RaySet,
                    "replicated" => QueryImagePe::Replicated,
                    _ => return Err(CmtError::Config(format!("query_image_pe: unknown `{value}`"))),
                }
            }
            "query_pe" => {
                m.query_pe = match value {
                    "both" => QueryPe::Both,
                    "image" => QueryPe::ImageOnly,
                    "bev" => QueryPe::BevOnly,
                    _ => return Err(CmtError::Config(format!("query_pe: unknown `{value}`"))),
                }
            }
            "pe_frequencies" => m.pe_frequencies = parse(key, value)?,
            "use_image_pe" => m.use_image_pe = parse(key, value)?,
            "use_bev_pe" => m.use_bev_pe = parse(key, value)?,
            "init_seed" => m.init_seed = parse(key, value)?,
            "cameras" => d.cameras = parse(key, value)?,
            "image_width" => d.image_width = parse(key, value)?,
            "image_height" => d.image_height = parse(key, value)?,
            "camera_fov_deg" => d.camera_fov_deg = parse(key, value)?,
            "camera_height" => d.camera_height = parse(key, value)?,
            "camera_radius" => d.camera_radius = parse(key, value)?,
            "ground_z" => d.ground_z = parse(key, value)?,
            "min_boxes" => d.min_boxes = parse(key, value)?,
            "max_boxes" => d.max_boxes = parse(key, value)?,
            "clutter_points" => d.clutter_points = parse(key, value)?,
            "point_density" => d.point_density = parse(key, value)?,
            "min_box_points" => d.min_box_points = parse(key, value)?,
            "point_dropout" => d.point_dropout = parse(key, value)?,
            "n_train" => d.n_train = parse(key, value)?,
            "n_val" => d.n_val = parse(key, value)?,
            "data_seed" => d.data_seed = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "eta_camera" => t.eta_camera = parse(key, value)?,
            "eta_lidar" => t.eta_lidar = parse(key, value)?,
            "denoise" => t.denoise = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = parse(key, value)?,
            "focal_alpha" => t.focal_alpha = parse(key, value)?,
            "focal_gamma" => t.focal_gamma = parse(key, value)?,
            "w_cls" => t.w_cls = parse(key, value)?,
            "w_reg" => t.w_reg = parse(key, value)?,
            _ => return Err(CmtError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Text value of `key`, in the form [`Config::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let (m, d, t) = (&self.model, &self.data, &self.train);
        let r = &m.roi;
        Some(match key {
            "d_model" => m.d_model.to_string(),
            "heads" => m.heads.to_string(),
            "mlp_hidden" => m.mlp_hidden.to_string(),
            "ffn_hidden" => m.ffn_hidden.to_string(),
            "decoder_layers" => m.decoder_layers.to_string(),
            "num_queries" => m.num_queries.to_string(),
            "num_classes" => m.num_classes.to_string(),
            "depth_bins" => m.depth_bins.to_string(),
            "depth_min" => fmt_f(m.depth_min),
            "depth_max" => fmt_f(m.depth_max),
            "roi" => [r.x_min, r.x_max, r.y_min, r.y_max, r.z_min, r.z_max]
                .map(fmt_f)
                .join(","),
            "bev_cells" => format!("{},{}", m.bev_cells.0, m.bev_cells.1),
            "bev_heights" => m.bev_heights.iter().map(|&h| fmt_f(h)).collect::<Vec<_>>().join(","),
            "pillar_channels" => m.pillar_channels.to_string(),
            "image_stride" => m.image_stride.to_string(),
            "dn_groups" => m.dn_groups.to_string(),
            "dn_noise" => fmt_f(m.dn_noise),
            "dn_negatives" => m.dn_negatives.to_string(),
            "learnable_anchors" => m.learnable_anchors.to_string(),
            "query_image_pe" => match m.query_image_pe {
                QueryImagePe::RaySet => "ray_set".into(),
                QueryImagePe::Replicated => "replicated".into(),
            },
            "query_pe" => match m.query_pe {
                QueryPe::Both => "both".into(),
                QueryPe::ImageOnly => "image".into(),
                QueryPe::BevOnly => "bev".into(),
            },
            "pe_frequencies" => m.pe_frequencies.to_string(),
            "use_image_pe" => m.use_image_pe.to_string(),
            "use_bev_pe" => m.use_bev_pe.to_string(),
            "init_seed" => m.init_seed.to_string(),
            "cameras" => d.cameras.to_string(),
            "image_width" => d.image_width.to_string(),
            "image_height" => d.image_height.to_string(),
            "camera_fov_deg" => fmt_f(d.camera_fov_deg),
            "camera_height" => fmt_f(d.camera_height),
            "camera_radius" => fmt_f(d.camera_radius),
            "ground_z" => fmt_f(d.ground_z),
            "min_boxes" => d.min_boxes.to_string(),
            "max_boxes" => d.max_boxes.to_string(),
            "clutter_points" => d.clutter_points.to_string(),
            "point_density" => fmt_f(d.point_density),
            "min_box_points" => d.min_box_points.to_string(),
            "point_dropout" => fmt_f(d.point_dropout),
            "n_train" => d.n_train.to_string(),
            "n_val" => d.n_val.to_string(),
            "data_seed" => d.data_seed.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => fmt_f(t.lr),
            "weight_decay" => fmt_f(t.weight_decay),
            "beta1" => fmt_f(t.beta1),
            "beta2" => fmt_f(t.beta2),
            "grad_clip" => fmt_f(t.grad_clip),
            "eta_camera" => fmt_f(t.eta_camera),
            "eta_lidar" => fmt_f(t.eta_lidar),
            "denoise" => t.denoise.to_string(),
            "seed" => t.seed.to_string(),
            "checkpoint_interval" => t.checkpoint_interval.to_string(),
            "focal_alpha" => fmt_f(t.focal_alpha),
            "focal_gamma" => fmt_f(t.focal_gamma),
            "w_cls" => fmt_f(t.w_cls),
            "w_reg" => fmt_f(t.w_reg),
            _ => return None,
        })
    }

    /// Parses `key = value` lines over `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CmtError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, help) in KEYS {
            let _ = writeln!(out, "# {help}");
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// `(key, value)` pairs for every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }
}

fn fmt_f(x: f64) -> String {
    // Debug formatting is the shortest representation that parses back exactly.
    format!("{x:?}")
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| CmtError::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

/// Every configuration key with a short description.
pub const KEYS: &[(&str, &str)] = &[
    ("d_model", "token and query feature width"),
    ("heads", "attention heads (must divide d_model)"),
    ("mlp_hidden", "hidden width of coordinate encoders and prediction heads"),
    ("ffn_hidden", "hidden width of the decoder feed-forward block"),
    ("decoder_layers", "number of transformer decoder layers"),
    ("num_queries", "matchable object queries"),
    ("num_classes", "object classes"),
    ("depth_bins", "frustum points sampled per image feature cell"),
    ("depth_min", "nearest frustum depth, metres"),
    ("depth_max", "farthest frustum depth, metres"),
    ("roi", "x_min,x_max,y_min,y_max,z_min,z_max in metres"),
    ("bev_cells", "BEV grid cells along x,y"),
    ("bev_heights", "comma-separated BEV sample heights, metres"),
    ("pillar_channels", "per-point feature width of the pillar encoder"),
    ("image_stride", "pixels per image feature cell"),
    ("dn_groups", "denoising query groups"),
    ("dn_noise", "denoising centre shift scale, metres"),
    ("dn_negatives", "add negative denoising queries"),
    ("learnable_anchors", "update anchor points during training"),
    ("query_image_pe", "query image point set: ray_set or replicated"),
    ("query_pe", "query embedding terms: both, image or bev"),
    (
        "pe_frequencies",
        "sinusoidal frequencies per coordinate before the coordinate encoders (0: raw)",
    ),
    ("use_image_pe", "enable image coordinate encoding"),
    ("use_bev_pe", "enable BEV coordinate encoding"),
    ("init_seed", "parameter initialisation seed"),
    ("cameras", "cameras in the surround rig"),
    ("image_width", "image width, pixels"),
    ("image_height", "image height, pixels"),
    ("camera_fov_deg", "horizontal field of view, degrees"),
    ("camera_height", "camera mount z in the LiDAR frame, metres"),
    ("camera_radius", "camera offset from the LiDAR origin, metres"),
    ("ground_z", "ground plane z in the LiDAR frame, metres"),
    ("min_boxes", "fewest objects per generated scene"),
    ("max_boxes", "most objects per generated scene"),
    ("clutter_points", "ground and background LiDAR points per scene"),
    ("point_density", "surface points of a box at 1 m range"),
    ("min_box_points", "surface points sampled per box at any range"),
    ("point_dropout", "probability of dropping each LiDAR return"),
    ("n_train", "training scenes written by gen-data"),
    ("n_val", "validation scenes written by gen-data"),
    ("data_seed", "scene generation seed"),
    ("epochs", "training epochs"),
    ("batch_size", "scenes per optimiser step"),
    ("lr", "learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("beta1", "first-moment decay"),
    ("beta2", "second-moment decay"),
    ("grad_clip", "global gradient-norm clip (0 disables)"),
    ("eta_camera", "probability of a camera-only training step"),
    ("eta_lidar", "probability of a LiDAR-only training step"),
    ("denoise", "train with point-based denoising queries"),
    ("seed", "training seed (shuffle, modality masks, denoise noise)"),
    ("checkpoint_interval", "steps between interval checkpoints (0 disables)"),
    ("focal_alpha", "focal loss alpha"),
    ("focal_gamma", "focal loss gamma"),
    ("w_cls", "classification loss weight"),
    ("w_reg", "regression loss weight"),
];
