//! The assembled detector.

use cmt_tensor::{Bound, Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{
    decode_boxes, denoise_mask, init_anchors, query_image_input, BoxPrediction, DecoderLayer, DenoiseSet, Heads,
    ANCHOR_EPS,
};
use crate::encoders::{
    bev_pe_input, build_token_set, image_pe_input, pillar_input, CoordEncoders, ImageEncoder, ImageSet, ModalityMask,
    ModalityTokens, PillarEncoder, PointCloud, TokenSet,
};
use crate::error::{CmtError, Result};
use crate::geometry::{linear_depths, BevGridSpec, CameraRig};

/// Layer structure; parameter values live in the model's [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub pillar: PillarEncoder,
    pub image: ImageEncoder,
    pub cem: CoordEncoders,
    pub layers: Vec<DecoderLayer>,
    pub heads: Heads,
    pub anchors: ParamId,
    pub content: ParamId,
}

#[derive(Clone, Debug)]
pub struct CmtModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub arch: Architecture,
    pub bev: BevGridSpec,
    pub depths: Vec<f64>,
}

/// Sensor data of one scene.
#[derive(Clone, Copy, Debug)]
pub struct SensorInput<'a> {
    pub rig: &'a CameraRig,
    pub points: &'a PointCloud,
    pub images: &'a ImageSet,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mask: ModalityMask,
    pub denoise: Option<DenoiseSet>,
    /// Decoder layer whose cross-attention weights are kept.
    pub keep_attention: Option<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            mask: ModalityMask::both(),
            denoise: None,
            keep_attention: None,
        }
    }
}

/// Head outputs of one decoder layer over all queries.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub cls: Var,
    pub reg: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub layers: Vec<LayerOutput>,
    /// Decoder states per layer, `[n, d_model]`.
    pub states: Vec<Var>,
    pub n_match: usize,
    pub denoise: Option<DenoiseSet>,
    pub tokens: TokenSet,
    /// Head-averaged cross-attention `[n, tokens]` of the requested layer.
    pub attention: Option<Tensor<T>>,
    /// Content embeddings of the denoising queries, when present.
    pub denoise_content: Option<Var>,
}

impl<T: Float> CmtModel<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut bev = BevGridSpec::for_roi(&config.roi, config.bev_cells.0, config.bev_cells.1)?;
        bev.heights = config.bev_heights.clone();
        bev.validate(&config.roi)?;
        let depths = linear_depths(config.depth_min, config.depth_max, config.depth_bins)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let pillar = PillarEncoder::new(&mut store, config.pillar_channels, d, &mut rng)?;
        let image = ImageEncoder::new(&mut store, config.image_stride, d, config.mlp_hidden, &mut rng)?;
        let cem = CoordEncoders::new(
            &mut store,
            bev.heights.len(),
            depths.len(),
            config.pe_frequencies,
            config.mlp_hidden,
            d,
            &mut rng,
        )?;
        let layers = (0..config.decoder_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut store,
                    &format!("decoder.{i}"),
                    d,
                    config.heads,
                    config.ffn_hidden,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let heads = Heads::new(&mut store, d, config.mlp_hidden, config.num_classes, &mut rng)?;
        let anchor_data = init_anchors(config.num_queries, config.init_seed ^ 0x5eed_a4c7);
        let anchors = store.add(
            "query.anchors",
            Tensor::from_f64(&[config.num_queries, 3], &anchor_data.concat())?,
        )?;
        let content = store.add("query.content", Tensor::zeros(&[config.num_queries, d]))?;
        Ok(Self {
            config: config.clone(),
            params: store,
            arch: Architecture {
                pillar,
                image,
                cem,
                layers,
                heads,
                anchors,
                content,
            },
            bev,
            depths,
        })
    }

    /// Same model at another precision.
    pub fn cast<U: Float>(&self) -> CmtModel<U> {
        CmtModel {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
            bev: self.bev.clone(),
            depths: self.depths.clone(),
        }
    }

    pub fn anchor_values(&self) -> Vec<[f64; 3]> {
        self.params
            .get(self.arch.anchors)
            .data()
            .chunks(3)
            .map(|c| [c[0].to_f64(), c[1].to_f64(), c[2].to_f64()])
            .collect()
    }

    /// Encodes the included modalities into a token set.
    pub fn encode<'a>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        input: &SensorInput<'a>,
        mask: &ModalityMask,
    ) -> Result<TokenSet> {
        mask.validate()?;
        let roi = &self.config.roi;
        let a = &self.arch;
        let bev = if mask.use_lidar {
            let pin = pillar_input(input.points, &self.bev, roi);
            let feats = a.pillar.forward(tape, params, &pin, &self.bev)?;
            let pe_in = tape.constant(bev_pe_input(&self.bev, roi)?.cast());
            let pe = if self.config.use_bev_pe {
                a.cem.pc(tape, params, pe_in)?
            } else {
                tape.constant(Tensor::zeros(&[self.bev.cells(), self.config.d_model]))
            };
            Some((feats, pe))
        } else {
            None
        };
        let mut cameras = Vec::new();
        if mask.use_camera {
            input.images.check(input.rig)?;
            for (i, cam) in input.rig.cameras.iter().enumerate() {
                if !mask.camera_active(i) {
                    continue;
                }
                let feats = a.image.forward(tape, params, &input.images.images[i], cam)?;
                let pe = if self.config.use_image_pe {
                    let pe_in = tape.constant(image_pe_input(cam, &self.depths, roi)?.cast());
                    a.cem.im(tape, params, pe_in)?
                } else {
                    let (c, r) = cam.feature_grid();
                    tape.constant(Tensor::zeros(&[c * r, self.config.d_model]))
                };
                cameras.push((i, feats, pe));
            }
        }
        build_token_set(tape, ModalityTokens { bev, cameras })
    }

    /// Full forward pass; `params` must come from binding `self.params`.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        input: &SensorInput<'a>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let roi = &cfg.roi;
        let a = &self.arch;
        let tokens = self.encode(tape, params, input, &opts.mask)?;
        let keys = tape.add(tokens.features, tokens.pos)?;

        let n_match = cfg.num_queries;
        let match_anchors = if cfg.learnable_anchors {
            params.var(a.anchors)
        } else {
            tape.constant(self.params.get(a.anchors).clone())
        };
        let mut anchor_list: Vec<[f64; 3]> = tape
            .value(match_anchors)
            .data()
            .chunks(3)
            .map(|c| [c[0].to_f64(), c[1].to_f64(), c[2].to_f64()])
            .collect();
        let dn = opts.denoise.as_ref().filter(|d| !d.is_empty());
        let (anchors, content, denoise_content, mask) = match dn {
            Some(dn) => {
                let dn_anchors = tape.constant(Tensor::from_f64(&[dn.len(), 3], &dn.anchors.concat())?);
                let dn_content = tape.leaf(Tensor::zeros(&[dn.len(), cfg.d_model]), true);
                anchor_list.extend(dn.anchors.iter().copied());
                (
                    tape.concat_rows(&[match_anchors, dn_anchors])?,
                    tape.concat_rows(&[params.var(a.content), dn_content])?,
                    Some(dn_content),
                    Some(denoise_mask(n_match, dn)),
                )
            }
            None => (match_anchors, params.var(a.content), None, None),
        };
        let pos = self.query_embedding(tape, params, anchors, &anchor_list, input.rig)?;
        let anchor_logits = tape.logit(anchors, T::of(ANCHOR_EPS))?;

        let mut x = content;
        let mut layers = Vec::with_capacity(a.layers.len());
        let mut states = Vec::with_capacity(a.layers.len());
        let mut attention = None;
        for (l, layer) in a.layers.iter().enumerate() {
            let keep = opts.keep_attention == Some(l);
            let (next, weights) = layer.forward(tape, params, x, pos, keys, tokens.features, mask.as_ref(), keep)?;
            x = next;
            if let Some(w) = weights {
                attention = Some(average_heads(&w));
            }
            let (cls, reg) = a.heads.forward(tape, params, x, anchor_logits, roi)?;
            layers.push(LayerOutput { cls, reg });
            states.push(x);
        }
        Ok(ForwardOutput {
            layers,
            states,
            n_match,
            denoise: dn.cloned(),
            tokens,
            attention,
            denoise_content,
        })
    }

    /// Query embeddings from the BEV projection (the anchor itself, repeated
    /// per sample height) and the image-plane point set of each anchor.
    fn query_embedding(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        anchors: Var,
        anchor_list: &[[f64; 3]],
        rig: &CameraRig,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = anchor_list.len();
        let mut pe: Option<Var> = None;
        if cfg.use_bev_pe && cfg.query_pe.bev() {
            let heights = self.bev.heights.len();
            let a_pc = if heights == 1 {
                anchors
            } else {
                tape.concat_cols(&vec![anchors; heights])?
            };
            pe = Some(self.arch.cem.pc(tape, params, a_pc)?);
        }
        if cfg.use_image_pe && cfg.query_pe.image() {
            let a_im = query_image_input(anchor_list, rig, &cfg.roi, &self.depths, cfg.query_image_pe)?;
            let a_im = tape.constant(a_im.cast());
            let im = self.arch.cem.im(tape, params, a_im)?;
            pe = Some(match pe {
                Some(p) => tape.add(p, im)?,
                None => im,
            });
        }
        Ok(match pe {
            Some(p) => p,
            None => tape.constant(Tensor::zeros(&[n, cfg.d_model])),
        })
    }

    /// Inference: boxes from the last decoder layer for the matchable queries.
    pub fn predict(&self, input: &SensorInput<'_>, mask: &ModalityMask) -> Result<Vec<BoxPrediction>> {
        let mut tape = Tape::new().with_finite_checks(false);
        let params = self.params.bind(&mut tape, false);
        let opts = ForwardOptions {
            mask: mask.clone(),
            ..Default::default()
        };
        let out = self.forward(&mut tape, &params, input, &opts)?;
        let last = out
            .layers
            .last()
            .ok_or_else(|| CmtError::Config("no decoder layers".into()))?;
        check_finite(tape.value(last.cls))?;
        check_finite(tape.value(last.reg))?;
        Ok(decode_boxes(tape.value(last.cls), tape.value(last.reg)))
    }
}

fn check_finite<T: Float>(t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(CmtError::Domain("non-finite network output".into()))
    }
}

/// Mean over heads of `[heads, n, m]` attention weights.
fn average_heads<T: Float>(w: &Tensor<T>) -> Tensor<T> {
    let (h, n, m) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let mut out = vec![T::zero(); n * m];
    for head in w.data().chunks(n * m) {
        for (o, &x) in out.iter_mut().zip(head) {
            *o += x;
        }
    }
    let inv = T::one() / T::of(h as f64);
    out.iter_mut().for_each(|x| *x *= inv);
    Tensor::from_vec(&[n, m], out).expect("consistent shape")
}
