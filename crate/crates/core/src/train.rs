//! Optimisation loop: masked-modal sampling, AdamW, checkpoints.

use std::path::Path;

use cmt_tensor::store::ArrayBundle;
use cmt_tensor::{Float, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Config, TrainConfig};
use crate::decoder::generate_denoise_queries;
use crate::encoders::ModalityMask;
use crate::error::{CmtError, Result};
use crate::loss::{compute_loss, LossBreakdown, LossWeights};
use crate::model::{CmtModel, ForwardOptions};
use crate::scene::Scene;

pub const CHECKPOINT_VERSION: &str = "1";

/// Camera-only with probability `eta_camera`, LiDAR-only with probability
/// `eta_lidar`, both otherwise.
pub fn sample_modality_mask<R: Rng + ?Sized>(eta_camera: f64, eta_lidar: f64, rng: &mut R) -> Result<ModalityMask> {
    if !(eta_camera >= 0.0 && eta_lidar >= 0.0 && eta_camera + eta_lidar <= 1.0) {
        return Err(CmtError::Config(format!(
            "modality ratios ({eta_camera}, {eta_lidar}) must be non-negative with sum <= 1"
        )));
    }
    let u: f64 = rng.gen();
    Ok(if u < eta_camera {
        ModalityMask::camera_only()
    } else if u < eta_camera + eta_lidar {
        ModalityMask::lidar_only()
    } else {
        ModalityMask::both()
    })
}

/// Adam with decoupled weight decay and a constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One update of `params[i]` by `grads[i]` for every `i` with `active[i]`;
    /// `decay[i]` selects weight decay.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>], active: &[bool], decay: &[bool]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::of(self.lr / c1);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        let shrink = T::of(1.0 - self.lr * self.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.len() {
                m[j] = tb1 * m[j] + ob1 * g[j];
                v[j] = tb2 * v[j] + ob2 * g[j] * g[j];
                if decay[i] {
                    p[j] *= shrink;
                }
                p[j] -= step * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Model, optimiser and the seeded stream that drives shuffling,
/// modality masks and denoising noise.
pub struct Trainer {
    pub config: Config,
    pub model: CmtModel<f32>,
    pub opt: AdamW<f32>,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let model = CmtModel::<f32>::new(&config.model)?;
        let sizes: Vec<usize> = model.params.iter().map(|(_, t)| t.numel()).collect();
        Ok(Self {
            opt: AdamW::new(&config.train, &sizes),
            rng: ChaCha8Rng::seed_from_u64(config.train.seed),
            config: config.clone(),
            model,
            step: 0,
        })
    }

    /// Gradients and loss of one scene under `mask`.
    fn scene_gradients(
        &self,
        scene: &Scene,
        mask: &ModalityMask,
        dn_seed: u64,
    ) -> Result<(Vec<Vec<f32>>, LossBreakdown)> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let params = self.model.params.bind(&mut tape, true);
        let denoise = cfg.train.denoise.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(dn_seed);
            let centers: Vec<[f64; 3]> = scene.boxes.iter().map(|b| b.center).collect();
            let m = &cfg.model;
            generate_denoise_queries(&centers, m.dn_groups, m.dn_noise, m.dn_negatives, &m.roi, &mut rng)
        });
        let opts = ForwardOptions {
            mask: mask.clone(),
            denoise,
            keep_attention: None,
        };
        let non_finite = |detail: String| CmtError::NonFiniteLoss {
            scene: scene.id.to_string(),
            detail,
        };
        let run = |tape: &mut Tape<f32>| -> Result<_> {
            let out = self.model.forward(tape, &params, &scene.input(), &opts)?;
            compute_loss(tape, &out, &scene.boxes, &LossWeights::from(&cfg.train))
        };
        let (loss, breakdown, _) = run(&mut tape).map_err(|e| match e {
            CmtError::Tensor(TensorError::NonFinite { op }) => non_finite(format!("non-finite value in `{op}`")),
            other => other,
        })?;
        if !breakdown.total.is_finite() {
            return Err(non_finite(format!("{breakdown:?}")));
        }
        let grads = tape.backward(loss)?;
        Ok((self.model.params.gradients(&params, &grads), breakdown))
    }

    /// Forward, loss, backward and one optimiser update over `batch`, with
    /// gradients averaged across the batch.
    pub fn train_step(&mut self, batch: &[&Scene], mask: &ModalityMask) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(CmtError::Config("empty batch".into()));
        }
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.gen()).collect();
        let this = &*self;
        let results: Vec<(Vec<Vec<f32>>, LossBreakdown)> = batch
            .par_iter()
            .zip(seeds)
            .map(|(s, seed)| this.scene_gradients(s, mask, seed))
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut breakdown = LossBreakdown::default();
        let mut grads: Vec<Vec<f32>> = Vec::new();
        for (g, b) in results {
            breakdown.accumulate(&b, inv);
            if grads.is_empty() {
                grads = g;
                if batch.len() > 1 {
                    grads.iter_mut().flatten().for_each(|x| *x *= inv as f32);
                }
            } else {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, x) in acc.iter_mut().zip(gi) {
                        *a += x * inv as f32;
                    }
                }
            }
        }
        self.apply(grads);
        self.step += 1;
        Ok(breakdown)
    }

    fn apply(&mut self, mut grads: Vec<Vec<f32>>) {
        let clip = self.config.train.grad_clip;
        if clip > 0.0 {
            let norm = grads
                .iter()
                .flatten()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                grads.iter_mut().flatten().for_each(|x| *x *= s);
            }
        }
        let anchors = self.model.arch.anchors.index();
        let n = self.model.params.len();
        let active: Vec<bool> = (0..n)
            .map(|i| i != anchors || self.config.model.learnable_anchors)
            .collect();
        let decay: Vec<bool> = (0..n).map(|i| i != anchors).collect();
        let ids: Vec<_> = self.model.params.ids().collect();
        let mut values: Vec<Tensor<f32>> = ids.iter().map(|&id| self.model.params.get(id).clone()).collect();
        {
            let mut slices: Vec<&mut [f32]> = values.iter_mut().map(|t| t.data_mut()).collect();
            self.opt.step(&mut slices, &grads, &active, &decay);
        }
        for (id, v) in ids.into_iter().zip(values) {
            *self.model.params.get_mut(id) = v;
        }
        // Anchors stay inside the unit cube.
        for a in self.model.params.get_mut(self.model.arch.anchors).data_mut() {
            *a = a.clamp(0.0, 1.0);
        }
    }

    /// One pass over `scenes` in a seeded shuffled order, calling `hook`
    /// after every optimiser step.
    pub fn run_epoch(&mut self, scenes: &[Scene], epoch: usize, hook: &mut StepHook<'_>) -> Result<()> {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut self.rng);
        let t = self.config.train.clone();
        for chunk in order.chunks(t.batch_size) {
            let mask = sample_modality_mask(t.eta_camera, t.eta_lidar, &mut self.rng)?;
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let b = self.train_step(&batch, &mask)?;
            hook(self, epoch, &b)?;
        }
        Ok(())
    }

    pub fn to_bundle(&self) -> ArrayBundle<f32> {
        let mut meta = vec![
            ("format".to_string(), "cmt-checkpoint".to_string()),
            ("version".to_string(), CHECKPOINT_VERSION.to_string()),
            ("step".to_string(), self.step.to_string()),
            ("adam_t".to_string(), self.opt.t.to_string()),
        ];
        meta.extend(
            self.config
                .entries()
                .into_iter()
                .map(|(k, v)| (format!("config.{k}"), v)),
        );
        let mut arrays = Vec::new();
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            arrays.push((format!("param.{name}"), t.clone()));
            let shape = t.shape();
            arrays.push((
                format!("adam_m.{name}"),
                Tensor::from_vec(shape, self.opt.m[i].clone()).expect("moment shape"),
            ));
            arrays.push((
                format!("adam_v.{name}"),
                Tensor::from_vec(shape, self.opt.v[i].clone()).expect("moment shape"),
            ));
        }
        ArrayBundle { meta, arrays }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_bundle().write(dir)?;
        Ok(())
    }

    /// Restores model parameters, optimiser moments and the step counter.
    /// The random stream restarts from the configured seed.
    pub fn load(dir: &Path) -> Result<Self> {
        let bundle = ArrayBundle::<f32>::read(dir).map_err(|e| CmtError::Corrupt(e.to_string()))?;
        Self::from_bundle(&bundle)
    }

    pub fn from_bundle(bundle: &ArrayBundle<f32>) -> Result<Self> {
        if bundle.meta("format") != Some("cmt-checkpoint") {
            return Err(CmtError::Corrupt("not a checkpoint".into()));
        }
        match bundle.meta("version") {
            Some(CHECKPOINT_VERSION) => {}
            other => {
                return Err(CmtError::Incompatible(format!(
                    "checkpoint version {other:?}, expected {CHECKPOINT_VERSION}"
                )))
            }
        }
        let mut config = Config::default();
        for (k, v) in &bundle.meta {
            if let Some(key) = k.strip_prefix("config.") {
                config.set(key, v)?;
            }
        }
        let mut trainer = Trainer::new(&config)?;
        let parse = |k: &str| -> Result<u64> {
            bundle
                .meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CmtError::Corrupt(format!("missing `{k}`")))
        };
        trainer.step = parse("step")? as usize;
        trainer.opt.t = parse("adam_t")?;
        let names: Vec<String> = trainer.model.params.iter().map(|(n, _)| n.to_string()).collect();
        if bundle.arrays.len() != 3 * names.len() {
            return Err(CmtError::Corrupt(format!(
                "{} arrays for {} parameters",
                bundle.arrays.len(),
                names.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            let get = |prefix: &str| -> Result<&Tensor<f32>> {
                bundle
                    .array(&format!("{prefix}.{name}"))
                    .ok_or_else(|| CmtError::Corrupt(format!("missing array {prefix}.{name}")))
            };
            trainer
                .model
                .params
                .set(name, get("param")?.clone())
                .map_err(|e| CmtError::Corrupt(e.to_string()))?;
            let (m, v) = (get("adam_m")?, get("adam_v")?);
            if m.numel() != trainer.opt.m[i].len() || v.numel() != trainer.opt.v[i].len() {
                return Err(CmtError::Corrupt(format!("moment size mismatch for {name}")));
            }
            trainer.opt.m[i] = m.data().to_vec();
            trainer.opt.v[i] = v.data().to_vec();
        }
        Ok(trainer)
    }
}

/// Called after every optimiser step with the updated trainer, the epoch
/// and that step's losses.
pub type StepHook<'a> = dyn FnMut(&Trainer, usize, &LossBreakdown) -> Result<()> + 'a;

/// Trains for the configured number of epochs, calling `hook` after every
/// step. Returns the trainer and the CSV log (header plus one row per step).
pub fn train(config: &Config, scenes: &[Scene], hook: &mut StepHook<'_>) -> Result<(Trainer, Vec<String>)> {
    let mut trainer = Trainer::new(config)?;
    let mut log = vec![LossBreakdown::CSV_HEADER.to_string()];
    for epoch in 0..config.train.epochs {
        trainer.run_epoch(scenes, epoch, &mut |t, e, b| {
            log.push(b.csv_row(t.step));
            hook(t, e, b)
        })?;
    }
    Ok((trainer, log))
}
