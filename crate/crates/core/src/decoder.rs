//! Position-guided queries, denoising queries, the transformer decoder and
//! the box heads.

use cmt_tensor::{AttnMask, Bound, Float, LayerNorm, Mlp, MultiHeadAttention, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::QueryImagePe;
use crate::error::Result;
use crate::geometry::{ray_points, CameraRig, Projection, Roi};

/// Width of the regression output: centre offset (3), log size (3), sin, cos.
pub const REG_DIM: usize = 8;

/// Clamp used when taking the inverse sigmoid of an anchor.
pub const ANCHOR_EPS: f64 = 1e-5;

/// `n` anchors drawn uniformly from `[0, 1]^3`.
pub fn init_anchors(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
        .collect()
}

/// Target of one denoising query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiseTarget {
    pub group: usize,
    pub gt: usize,
    pub positive: bool,
}

/// Denoising queries built from shifted ground-truth centres.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenoiseSet {
    pub groups: usize,
    pub anchors: Vec<[f64; 3]>,
    pub targets: Vec<DenoiseTarget>,
}

impl DenoiseSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn per_group(&self) -> usize {
        if self.groups == 0 {
            0
        } else {
            self.anchors.len() / self.groups
        }
    }
}

/// Per group: one positive query per box, shifted by up to `tau` metres per
/// axis, then (if `negatives`) one negative per box shifted by between `tau`
/// and `2 tau`. Anchors are normalised into the RoI and clamped.
pub fn generate_denoise_queries<R: Rng + ?Sized>(
    centers: &[[f64; 3]],
    groups: usize,
    tau: f64,
    negatives: bool,
    roi: &Roi,
    rng: &mut R,
) -> DenoiseSet {
    let mut set = DenoiseSet {
        groups,
        ..Default::default()
    };
    if centers.is_empty() {
        set.groups = 0;
        return set;
    }
    for group in 0..groups {
        for (gt, c) in centers.iter().enumerate() {
            let shift: [f64; 3] = std::array::from_fn(|_| tau * rng.gen_range(-1.0..=1.0));
            set.anchors
                .push(roi.normalize(std::array::from_fn(|i| c[i] + shift[i])));
            set.targets.push(DenoiseTarget {
                group,
                gt,
                positive: true,
            });
        }
        if negatives {
            for (gt, c) in centers.iter().enumerate() {
                let shift: [f64; 3] = std::array::from_fn(|_| {
                    let mag = tau * rng.gen_range(1.0..=2.0);
                    if rng.gen::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                });
                set.anchors
                    .push(roi.normalize(std::array::from_fn(|i| c[i] + shift[i])));
                set.targets.push(DenoiseTarget {
                    group,
                    gt,
                    positive: false,
                });
            }
        }
    }
    set
}

/// Self-attention mask over `n_match` matchable queries followed by the
/// denoising groups: matchable queries never see denoising queries and
/// groups never see each other.
pub fn denoise_mask(n_match: usize, dn: &DenoiseSet) -> AttnMask {
    let n = n_match + dn.len();
    let mut mask = AttnMask::allow_all(n, n);
    for (i, ti) in dn.targets.iter().enumerate() {
        for r in 0..n_match {
            mask.set(r, n_match + i, true);
        }
        for (j, tj) in dn.targets.iter().enumerate() {
            if ti.group != tj.group {
                mask.set(n_match + i, n_match + j, true);
            }
        }
    }
    mask
}

/// Constant image-plane input for the query embedding of each anchor,
/// `[n, 3 * depths.len()]`, averaged over the cameras that see the anchor
/// and zero for anchors no camera sees.
pub fn query_image_input(
    anchors: &[[f64; 3]],
    rig: &CameraRig,
    roi: &Roi,
    depths: &[f64],
    kind: QueryImagePe,
) -> Result<Tensor<f64>> {
    let width = 3 * depths.len();
    let (lo, ext) = (roi.min(), roi.extent());
    let mut data = vec![0.0; anchors.len() * width];
    for (a, row) in anchors.iter().zip(data.chunks_mut(width)) {
        let world: [f64; 3] = std::array::from_fn(|i| a[i].clamp(0.0, 1.0) * ext[i] + lo[i]);
        let mut seen = 0usize;
        for cam in &rig.cameras {
            let Projection::Visible { u, v, .. } = cam.project(world) else {
                continue;
            };
            seen += 1;
            match kind {
                QueryImagePe::RaySet => {
                    for (k, p) in ray_points(u, v, depths).into_iter().enumerate() {
                        let n = roi.normalize(cam.frustum_to_lidar(p)?);
                        for i in 0..3 {
                            row[3 * k + i] += n[i];
                        }
                    }
                }
                QueryImagePe::Replicated => {
                    let n = roi.normalize(world);
                    for k in 0..depths.len() {
                        for i in 0..3 {
                            row[3 * k + i] += n[i];
                        }
                    }
                }
            }
        }
        if seen > 1 {
            let inv = 1.0 / seen as f64;
            row.iter_mut().for_each(|x| *x *= inv);
        }
    }
    Ok(Tensor::from_vec(&[anchors.len(), width], data)?)
}

/// Number of cameras in which a normalised anchor is visible.
pub fn cameras_seeing(anchor: [f64; 3], rig: &CameraRig, roi: &Roi) -> usize {
    let (lo, ext) = (roi.min(), roi.extent());
    let world: [f64; 3] = std::array::from_fn(|i| anchor[i] * ext[i] + lo[i]);
    rig.cameras.iter().filter(|c| c.project(world).is_visible()).count()
}

/// DETR-style post-norm decoder layer.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: Mlp,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d_model, heads, rng)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d_model, heads, rng)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[d_model, ffn_hidden, d_model], rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d_model)?,
        })
    }

    /// One layer over queries `x` with embeddings `pos`. `keys` already
    /// carries the token embeddings; `values` are the bare token features.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        pos: Var,
        keys: Var,
        values: Var,
        mask: Option<&AttnMask>,
        keep_weights: bool,
    ) -> Result<(Var, Option<Tensor<T>>)> {
        let q = tape.add(x, pos)?;
        let sa = self.self_attn.forward(tape, params, q, q, x, mask, false)?;
        let x = tape.add(x, sa.out)?;
        let x = self.norm1.forward(tape, params, x)?;
        let q = tape.add(x, pos)?;
        let ca = self
            .cross_attn
            .forward(tape, params, q, keys, values, None, keep_weights)?;
        let x = tape.add(x, ca.out)?;
        let x = self.norm2.forward(tape, params, x)?;
        let f = self.ffn.forward(tape, params, x)?;
        let x = tape.add(x, f)?;
        let x = self.norm3.forward(tape, params, x)?;
        Ok((x, ca.weights))
    }
}

/// Regression and classification heads shared across decoder layers.
#[derive(Clone, Debug)]
pub struct Heads {
    pub reg: Mlp,
    pub cls: Mlp,
}

/// Classification bias giving every class an initial probability of 0.01.
pub fn prior_bias() -> f64 {
    -((1.0 - 0.01f64) / 0.01).ln()
}

impl Heads {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d_model: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let reg = Mlp::new(store, "head.reg", &[d_model, hidden, REG_DIM], rng)?;
        let cls = Mlp::new(store, "head.cls", &[d_model, hidden, classes], rng)?;
        let bias = cls.layers[cls.layers.len() - 1].bias;
        *store.get_mut(bias) = Tensor::full(&[classes], T::of(prior_bias()));
        Ok(Self { reg, cls })
    }

    /// Class logits `[n, C]` and the regression vector `[n, 8]` whose first
    /// three entries are the predicted centre in metres.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        anchor_logits: Var,
        roi: &Roi,
    ) -> Result<(Var, Var)> {
        let cls = self.cls.forward(tape, params, x)?;
        let raw = self.reg.forward(tape, params, x)?;
        let delta = tape.slice_cols(raw, 0, 3)?;
        let rest = tape.slice_cols(raw, 3, REG_DIM)?;
        let z = tape.add(anchor_logits, delta)?;
        let unit = tape.sigmoid(z)?;
        let scale = roi.extent().map(T::of);
        let shift = roi.min().map(T::of);
        let center = tape.affine_cols(unit, &scale, &shift)?;
        let reg = tape.concat_cols(&[center, rest])?;
        Ok((cls, reg))
    }
}

/// A decoded box in metres and radians.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxPrediction {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_logits: Vec<f64>,
}

impl BoxPrediction {
    pub fn scores(&self) -> Vec<f64> {
        self.class_logits.iter().map(|&l| sigmoid(l)).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turns head outputs into boxes: sizes are exponentiated and the (sin, cos)
/// pair is normalised before the yaw is read off.
pub fn decode_boxes<T: Float>(cls: &Tensor<T>, reg: &Tensor<T>) -> Vec<BoxPrediction> {
    (0..reg.rows())
        .map(|i| {
            let r: Vec<f64> = reg.row(i).iter().map(|x| x.to_f64()).collect();
            let (s, c) = (r[6], r[7]);
            let norm = (s * s + c * c).sqrt();
            let yaw = if norm > 0.0 { (s / norm).atan2(c / norm) } else { 0.0 };
            BoxPrediction {
                center: [r[0], r[1], r[2]],
                size: [r[3].exp(), r[4].exp(), r[5].exp()],
                yaw,
                class_logits: cls.row(i).iter().map(|x| x.to_f64()).collect(),
            }
        })
        .collect()
}
