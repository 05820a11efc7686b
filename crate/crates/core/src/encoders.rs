//! Sensor encoders and the coordinate encoders that give every token a
//! position embedding derived from geometry alone.

use cmt_tensor::{Bound, Float, LayerNorm, Linear, Mlp, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{CmtError, Result};
use crate::geometry::{bev_cell_to_world, frustum_points, BevGridSpec, CameraModel, CameraRig, Roi};

/// LiDAR sweep: `(x, y, z, intensity)` per point in the LiDAR frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
}

/// One RGB image per camera, each `height x width x 3` row-major in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub width: usize,
    pub height: usize,
    pub images: Vec<Vec<f32>>,
}

impl ImageSet {
    pub fn blank(cameras: usize, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            images: vec![vec![0.0; width * height * 3]; cameras],
        }
    }

    pub fn check(&self, rig: &CameraRig) -> Result<()> {
        if self.images.len() != rig.len() {
            return Err(CmtError::Dimension(format!(
                "{} images for {} cameras",
                self.images.len(),
                rig.len()
            )));
        }
        for (i, cam) in rig.cameras.iter().enumerate() {
            if cam.image_size() != (self.width, self.height) || self.images[i].len() != self.width * self.height * 3 {
                return Err(CmtError::Dimension(format!(
                    "camera {i}: image {}x{} does not match {:?}",
                    self.width,
                    self.height,
                    cam.image_size()
                )));
            }
        }
        Ok(())
    }
}

/// Which sensors contribute tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityMask {
    pub use_camera: bool,
    pub use_lidar: bool,
    /// Cameras whose tokens are dropped even when `use_camera` is set.
    pub dropped_cameras: Vec<usize>,
}

impl ModalityMask {
    pub fn both() -> Self {
        Self {
            use_camera: true,
            use_lidar: true,
            dropped_cameras: Vec::new(),
        }
    }

    pub fn camera_only() -> Self {
        Self {
            use_lidar: false,
            ..Self::both()
        }
    }

    pub fn lidar_only() -> Self {
        Self {
            use_camera: false,
            ..Self::both()
        }
    }

    pub fn without_camera(camera: usize) -> Self {
        Self {
            dropped_cameras: vec![camera],
            ..Self::both()
        }
    }

    pub fn camera_active(&self, camera: usize) -> bool {
        self.use_camera && !self.dropped_cameras.contains(&camera)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_camera && !self.use_lidar {
            return Err(CmtError::Config("modality mask disables every sensor".into()));
        }
        Ok(())
    }
}

/// Per-point pillar features and their sorted cell assignment.
#[derive(Clone, Debug)]
pub struct PillarInput {
    /// `[m, 6]`: normalised x, y, z, intensity, in-cell x and y offsets.
    pub features: Tensor<f64>,
    pub cells: Vec<usize>,
}

pub const POINT_FEATURES: usize = 6;

/// Drops points outside the RoI, featurises the rest and sorts them by
/// cell, then by coordinate bits, so pooling order never depends on the
/// input order.
pub fn pillar_input(pc: &PointCloud, spec: &BevGridSpec, roi: &Roi) -> PillarInput {
    let mut kept: Vec<(usize, [u32; 4], [f64; 6])> = Vec::with_capacity(pc.points.len());
    for p in &pc.points {
        let w = [p[0] as f64, p[1] as f64, p[2] as f64];
        if !w.iter().all(|x| x.is_finite()) || !roi.contains(w) {
            continue;
        }
        let Some((u, v)) = spec.cell_of(roi, w) else {
            continue;
        };
        let n = roi.normalize(w);
        let cx = roi.x_min + (u as f64 + 0.5) * spec.cell_u;
        let cy = roi.y_min + (v as f64 + 0.5) * spec.cell_v;
        let feat = [
            n[0],
            n[1],
            n[2],
            (p[3] as f64).clamp(0.0, 1.0),
            (w[0] - cx) / spec.cell_u,
            (w[1] - cy) / spec.cell_v,
        ];
        kept.push((spec.index(u, v), p.map(f32::to_bits), feat));
    }
    kept.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let m = kept.len();
    let features =
        Tensor::from_vec(&[m, POINT_FEATURES], kept.iter().flat_map(|k| k.2).collect()).expect("consistent shape");
    PillarInput {
        features,
        cells: kept.iter().map(|k| k.0).collect(),
    }
}

/// Shared per-point MLP, max-pooled per pillar, then two bias-free 3x3
/// convolutions over the BEV lattice and a per-token layer norm.
#[derive(Clone, Debug)]
pub struct PillarEncoder {
    pub point_mlp: Mlp,
    pub conv1: ParamId,
    pub conv2: ParamId,
    pub norm: LayerNorm,
    pub channels: usize,
    pub d_model: usize,
}

impl PillarEncoder {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        channels: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let point_mlp = Mlp::new(store, "pillar.point", &[POINT_FEATURES, channels, channels], rng)?;
        let conv1 = store.add(
            "pillar.conv1",
            cmt_tensor::nn::uniform_fan_in(rng, &[9 * channels, d_model], 9 * channels),
        )?;
        let conv2 = store.add(
            "pillar.conv2",
            cmt_tensor::nn::uniform_fan_in(rng, &[9 * d_model, d_model], 9 * d_model),
        )?;
        Ok(Self {
            point_mlp,
            conv1,
            conv2,
            norm: LayerNorm::new(store, "pillar.norm", d_model)?,
            channels,
            d_model,
        })
    }

    /// Pooled pillar features `[cells, channels]` before the mixing stage.
    pub fn pillars<T: Float>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        input: &PillarInput,
        spec: &BevGridSpec,
    ) -> Result<Var> {
        let cells = spec.cells();
        if input.cells.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[cells, self.channels])));
        }
        let x = tape.constant(input.features.cast());
        let h = self.point_mlp.forward(tape, params, x)?;
        let h = tape.relu(h)?;
        Ok(tape.segment_max(h, &input.cells, cells)?)
    }

    /// BEV feature map `[n_u * n_v, d_model]`, row-major over cells.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        input: &PillarInput,
        spec: &BevGridSpec,
    ) -> Result<Var> {
        let p = self.pillars(tape, params, input, spec)?;
        let c1 = tape.im2col3x3(p, spec.n_u, spec.n_v)?;
        let h = tape.matmul(c1, params.var(self.conv1))?;
        let h = tape.relu(h)?;
        let c2 = tape.im2col3x3(h, spec.n_u, spec.n_v)?;
        let h = tape.matmul(c2, params.var(self.conv2))?;
        Ok(self.norm.forward(tape, params, h)?)
    }
}

/// Non-overlapping `stride x stride` patches of one camera image, one row
/// per feature cell in row-major cell order, pixels ordered (dy, dx, rgb).
pub fn patchify(image: &[f32], width: usize, height: usize, stride: usize) -> Tensor<f64> {
    let (cols, rows) = (width / stride, height / stride);
    let pd = stride * stride * 3;
    let mut data = Vec::with_capacity(cols * rows * pd);
    for v in 0..rows {
        for u in 0..cols {
            for dy in 0..stride {
                let y = v * stride + dy;
                let start = (y * width + u * stride) * 3;
                data.extend(image[start..start + stride * 3].iter().map(|&p| p as f64));
            }
        }
    }
    Tensor::from_vec(&[cols * rows, pd], data).expect("consistent shape")
}

/// Patch embedding followed by residual MLP blocks applied per token and a
/// closing layer norm.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch: Linear,
    pub blocks: Vec<Mlp>,
    pub norm: LayerNorm,
    pub stride: usize,
}

impl ImageEncoder {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        stride: usize,
        d_model: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let patch = Linear::new(store, "image.patch", stride * stride * 3, d_model, rng)?;
        let blocks = (0..2)
            .map(|i| Mlp::new(store, &format!("image.block{i}"), &[d_model, hidden, d_model], rng))
            .collect::<cmt_tensor::Result<_>>()?;
        Ok(Self {
            patch,
            blocks,
            norm: LayerNorm::new(store, "image.norm", d_model)?,
            stride,
        })
    }

    /// Tokens `[cells, d_model]` for one camera.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        image: &[f32],
        cam: &CameraModel,
    ) -> Result<Var> {
        let (w, h) = cam.image_size();
        if image.len() != w * h * 3 {
            return Err(CmtError::Dimension(format!(
                "image has {} values, camera expects {w}x{h}x3",
                image.len()
            )));
        }
        if cam.stride() != self.stride {
            return Err(CmtError::Dimension(format!(
                "camera stride {} differs from encoder stride {}",
                cam.stride(),
                self.stride
            )));
        }
        let x = tape.constant(patchify(image, w, h, self.stride).cast());
        let mut t = self.patch.forward(tape, params, x)?;
        for block in &self.blocks {
            let r = block.forward(tape, params, t)?;
            t = tape.add(t, r)?;
        }
        Ok(self.norm.forward(tape, params, t)?)
    }
}

/// Coordinate encoder inputs for the BEV lattice: `[cells, 3 * heights]`,
/// each cell's sample points normalised into the RoI.
pub fn bev_pe_input(spec: &BevGridSpec, roi: &Roi) -> Result<Tensor<f64>> {
    let hk = spec.heights.len();
    let mut data = Vec::with_capacity(spec.cells() * 3 * hk);
    for u in 0..spec.n_u {
        for v in 0..spec.n_v {
            for k in 0..hk {
                data.extend(roi.normalize(bev_cell_to_world(spec, roi, u, v, k)?));
            }
        }
    }
    Ok(Tensor::from_vec(&[spec.cells(), 3 * hk], data)?)
}

/// Coordinate encoder inputs for one camera: `[cells, 3 * depths]`, the
/// lifted frustum points of each feature cell normalised into the RoI.
pub fn image_pe_input(cam: &CameraModel, depths: &[f64], roi: &Roi) -> Result<Tensor<f64>> {
    let (cols, rows) = cam.feature_grid();
    let mut data = Vec::with_capacity(cols * rows * 3 * depths.len());
    for v in 0..rows {
        for u in 0..cols {
            for p in frustum_points(cam, u, v, depths)? {
                data.extend(roi.normalize(cam.frustum_to_lidar(p)?));
            }
        }
    }
    Ok(Tensor::from_vec(&[cols * rows, 3 * depths.len()], data)?)
}

/// The two coordinate encoders, shared by tokens and queries.
///
/// With `frequencies > 0` every normalised coordinate `x` is first expanded
/// to `sin(2^k pi x), cos(2^k pi x)` for `k < frequencies` before the MLP.
#[derive(Clone, Debug)]
pub struct CoordEncoders {
    pub psi_pc: Mlp,
    pub psi_im: Mlp,
    pub frequencies: usize,
}

impl CoordEncoders {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        heights: usize,
        depths: usize,
        frequencies: usize,
        hidden: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let width = |n: usize| if frequencies == 0 { n } else { 2 * frequencies * n };
        Ok(Self {
            psi_pc: Mlp::new(store, "cem.pc", &[width(3 * heights), hidden, d_model], rng)?,
            psi_im: Mlp::new(store, "cem.im", &[width(3 * depths), hidden, d_model], rng)?,
            frequencies,
        })
    }

    fn expand<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.frequencies == 0 {
            return Ok(x);
        }
        let mut parts = Vec::with_capacity(2 * self.frequencies);
        for k in 0..self.frequencies {
            let s = tape.scale(x, T::of(std::f64::consts::PI * (1u64 << k) as f64))?;
            parts.push(tape.sin(s)?);
            parts.push(tape.cos(s)?);
        }
        Ok(tape.concat_cols(&parts)?)
    }

    /// BEV-side encoding of `[n, 3 * heights]` normalised points.
    pub fn pc<T: Float>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let e = self.expand(tape, x)?;
        Ok(self.psi_pc.forward(tape, params, e)?)
    }

    /// Image-side encoding of `[n, 3 * depths]` normalised points.
    pub fn im<T: Float>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let e = self.expand(tape, x)?;
        Ok(self.psi_im.forward(tape, params, e)?)
    }
}

/// Where a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenSource {
    Bev { cell: usize },
    Camera { camera: usize, cell: usize },
}

impl TokenSource {
    pub fn is_camera(&self) -> bool {
        matches!(self, TokenSource::Camera { .. })
    }
}

/// Fused token sequence: BEV cells first, then cameras in index order.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub features: Var,
    pub pos: Var,
    pub provenance: Vec<TokenSource>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Per-modality features and embeddings, already computed.
pub struct ModalityTokens {
    pub bev: Option<(Var, Var)>,
    /// `(camera index, features, embeddings)` for every active camera.
    pub cameras: Vec<(usize, Var, Var)>,
}

/// Concatenates the tokens of the included modalities. Excluded modalities
/// contribute no rows at all.
pub fn build_token_set<T: Float>(tape: &mut Tape<T>, parts: ModalityTokens) -> Result<TokenSet> {
    let mut feats = Vec::new();
    let mut pes = Vec::new();
    let mut provenance = Vec::new();
    if let Some((f, p)) = parts.bev {
        check_congruent(tape, f, p)?;
        provenance.extend((0..tape.shape(f)[0]).map(|cell| TokenSource::Bev { cell }));
        feats.push(f);
        pes.push(p);
    }
    for (camera, f, p) in parts.cameras {
        check_congruent(tape, f, p)?;
        provenance.extend((0..tape.shape(f)[0]).map(|cell| TokenSource::Camera { camera, cell }));
        feats.push(f);
        pes.push(p);
    }
    if feats.is_empty() {
        return Err(CmtError::Config("every modality is masked; nothing to attend".into()));
    }
    let (features, pos) = if feats.len() == 1 {
        (feats[0], pes[0])
    } else {
        (tape.concat_rows(&feats)?, tape.concat_rows(&pes)?)
    };
    Ok(TokenSet {
        features,
        pos,
        provenance,
    })
}

fn check_congruent<T: Float>(tape: &Tape<T>, f: Var, p: Var) -> Result<()> {
    if tape.shape(f) != tape.shape(p) {
        return Err(CmtError::Dimension(format!(
            "features {:?} vs embeddings {:?}",
            tape.shape(f),
            tape.shape(p)
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::linear_depths;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn roi() -> Roi {
        Roi::new((-8.0, 8.0), (-8.0, 8.0), (-5.0, 3.0)).unwrap()
    }

    fn pillar_map(enc: &PillarEncoder, store: &ParamStore<f64>, pc: &PointCloud, pre_mix: bool) -> Vec<f64> {
        let spec = BevGridSpec::for_roi(&roi(), 8, 8).unwrap();
        let input = pillar_input(pc, &spec, &roi());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let out = if pre_mix {
            enc.pillars(&mut tape, &p, &input, &spec).unwrap()
        } else {
            enc.forward(&mut tape, &p, &input, &spec).unwrap()
        };
        tape.value(out).data().to_vec()
    }

    fn setup() -> (PillarEncoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = PillarEncoder::new(&mut store, 4, 8, &mut rng).unwrap();
        (enc, store)
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud {
            points: (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-9.0..9.0),
                        rng.gen_range(-9.0..9.0),
                        rng.gen_range(-4.0..2.0),
                        rng.gen_range(0.0..1.0),
                    ]
                })
                .collect(),
        }
    }

    #[test]
    fn empty_cloud_gives_zero_map() {
        let (enc, store) = setup();
        let map = pillar_map(&enc, &store, &PointCloud::default(), false);
        assert_eq!(map.len(), 64 * 8);
        assert!(map.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_point_fills_one_pillar() {
        let (enc, store) = setup();
        let pc = PointCloud {
            points: vec![[1.3, -2.2, 0.0, 0.5]],
        };
        let map = pillar_map(&enc, &store, &pc, true);
        let nonzero: Vec<usize> = map
            .chunks(4)
            .enumerate()
            .filter(|(_, r)| r.iter().any(|&x| x != 0.0))
            .map(|(i, _)| i)
            .collect();
        // Cells are 2 m; x = 1.3 is column 4, y = -2.2 is row 2.
        assert_eq!(nonzero, vec![4 * 8 + 2]);
    }

    #[test]
    fn duplicates_and_order_do_not_matter() {
        let (enc, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pc = cloud(&mut rng, 60);
        let base = pillar_map(&enc, &store, &pc, false);
        let mut doubled = pc.clone();
        doubled.points.extend(pc.points.iter().rev().copied());
        assert_eq!(pillar_map(&enc, &store, &doubled, false), base);
        let mut shuffled = pc.clone();
        shuffled.points.reverse();
        shuffled.points.swap(0, 7);
        assert_eq!(pillar_map(&enc, &store, &shuffled, false), base);
    }

    #[test]
    fn points_outside_roi_are_dropped() {
        let spec = BevGridSpec::for_roi(&roi(), 8, 8).unwrap();
        let pc = PointCloud {
            points: vec![[20.0, 0.0, 0.0, 1.0], [0.0, 0.0, 5.0, 1.0], [0.5, 0.5, 0.0, 1.0]],
        };
        let input = pillar_input(&pc, &spec, &roi());
        assert_eq!(input.cells, vec![spec.index(4, 4)]);
        let f = input.features.data();
        assert!((f[4] - (-0.25)).abs() < 1e-12 && (f[5] - (-0.25)).abs() < 1e-12);
    }

    fn image_encoder() -> (ImageEncoder, ParamStore<f64>, CameraModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = ImageEncoder::new(&mut store, 4, 8, 12, &mut rng).unwrap();
        let rig = CameraRig::surround(1, 16, 16, 4, 70.0, 0.0, 0.0).unwrap();
        (enc, store, rig.cameras[0].clone())
    }

    fn encode(enc: &ImageEncoder, store: &ParamStore<f64>, cam: &CameraModel, img: &[f32]) -> Tensor<f64> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let out = enc.forward(&mut tape, &p, img, cam).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn zero_image_gives_zero_tokens_on_grid() {
        let (enc, store, cam) = image_encoder();
        let out = encode(&enc, &store, &cam, &vec![0.0; 16 * 16 * 3]);
        assert_eq!(out.shape(), &[16, 8]);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_stride_shift_moves_tokens_one_cell() {
        let (enc, store, cam) = image_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Shift right by one stride (4 px); leftmost band is filled with zeros.
        let mut shifted = vec![0.0f32; img.len()];
        for y in 0..16 {
            for x in 4..16 {
                for c in 0..3 {
                    shifted[(y * 16 + x) * 3 + c] = img[(y * 16 + x - 4) * 3 + c];
                }
            }
        }
        let (a, b) = (encode(&enc, &store, &cam, &img), encode(&enc, &store, &cam, &shifted));
        for v in 0..4 {
            for u in 1..4 {
                assert_eq!(b.row(v * 4 + u), a.row(v * 4 + u - 1));
            }
        }
    }

    #[test]
    fn image_size_mismatch_is_rejected() {
        let (enc, store, cam) = image_encoder();
        let mut tape = Tape::<f64>::new();
        let p = store.bind(&mut tape, false);
        assert!(enc.forward(&mut tape, &p, &[0.0; 12], &cam).is_err());
    }

    #[test]
    fn pe_inputs_are_normalised_and_geometric() {
        let roi = Roi::new((-54.0, 54.0), (-54.0, 54.0), (-5.0, 3.0)).unwrap();
        let spec = BevGridSpec::for_roi(&roi, 180, 180).unwrap();
        let bev = bev_pe_input(&spec, &roi).unwrap();
        assert_eq!(bev.shape(), &[180 * 180, 3]);
        // Cells symmetric about the centre see reflected normalised inputs.
        let (a, b) = (bev.row(spec.index(3, 11)), bev.row(spec.index(176, 168)));
        assert!((a[0] - (1.0 - b[0])).abs() < 1e-12 && (a[1] - (1.0 - b[1])).abs() < 1e-12);
        let rig = CameraRig::surround(2, 32, 32, 8, 70.0, 0.0, 0.0).unwrap();
        let depths = linear_depths(1.0, 60.0, 16).unwrap();
        let im = image_pe_input(&rig.cameras[0], &depths, &roi).unwrap();
        assert_eq!(im.shape(), &[16, 48]);
        assert!(im.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let same = image_pe_input(&rig.cameras[0].clone(), &depths, &roi).unwrap();
        assert_eq!(same, im);
        let turned = image_pe_input(&rig.cameras[1], &depths, &roi).unwrap();
        assert_ne!(turned, im);
    }

    #[test]
    fn token_set_drops_masked_modalities() {
        let mut tape = Tape::<f64>::new();
        let bev = tape.constant(Tensor::zeros(&[6, 4]));
        let bev_pe = tape.constant(Tensor::zeros(&[6, 4]));
        let cam = tape.constant(Tensor::zeros(&[3, 4]));
        let cam_pe = tape.constant(Tensor::zeros(&[3, 4]));
        let both = build_token_set(
            &mut tape,
            ModalityTokens {
                bev: Some((bev, bev_pe)),
                cameras: vec![(0, cam, cam_pe), (1, cam, cam_pe)],
            },
        )
        .unwrap();
        assert_eq!(both.len(), 12);
        assert_eq!(tape.shape(both.features), &[12, 4]);
        assert_eq!(both.provenance.iter().filter(|s| s.is_camera()).count(), 6);
        assert_eq!(both.provenance[7], TokenSource::Camera { camera: 0, cell: 1 });
        let lidar = build_token_set(
            &mut tape,
            ModalityTokens {
                bev: Some((bev, bev_pe)),
                cameras: vec![],
            },
        )
        .unwrap();
        assert_eq!(lidar.len(), 6);
        let none = build_token_set(
            &mut tape,
            ModalityTokens {
                bev: None,
                cameras: vec![],
            },
        );
        assert!(none.is_err());
    }
}
