//! Joint training over single-modal (degraded-pair) and multi-modal
//! (aligned visible/infrared) batches, with checkpointing and resume.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{random_crop, FrozenEncoder};
use crate::checkpoint::Container;
use crate::decomposition::DecompositionMode;
use crate::degradation::{apply_degradation, decomposition_targets, sample_mask_pair};
use crate::error::{contract, Error, Result};
use crate::imaging::{stack_images, GridGeometry, SceneImage};
use crate::mfm::SamplePlan;
use crate::model::{DeFusionModel, ModelConfig};
use crate::objectives::{
    loss_m_com, loss_m_uni, loss_mfm, loss_s_cud, loss_total, report, CudPredictions, CudTargets, FeatureNorm,
    LossReport, Regime, M_COM, M_UNI, MFM,
};
use crate::optim::{Adam, AdamConfig};

pub const MODEL_KIND: &str = "defusion_model";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// First epoch index trained at half the initial rate.
    pub lr_decay_epoch: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub alpha: f64,
    pub mask_ratio: f64,
    pub noise_sigma: f32,
    pub cover_frac: f64,
    pub seed: u64,
    /// Probability that a step draws a multi-modal batch; `None` means 0.5
    /// when a multi-modal corpus exists and 0 otherwise.
    pub modality_mix: Option<f64>,
    /// Defaults to `⌈max(|single|, |multi|) / batch_size⌉`.
    pub steps_per_epoch: Option<usize>,
    pub grad_clip: f64,
    pub color_jitter: f32,
    pub feature_norm: FeatureNorm,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr0: 1e-4,
            lr_decay_epoch: 20,
            batch_size: 4,
            crop: 64,
            alpha: crate::objectives::DEFAULT_ALPHA,
            mask_ratio: 0.5,
            noise_sigma: crate::degradation::DEFAULT_NOISE_SIGMA,
            cover_frac: crate::degradation::DEFAULT_COVER_FRAC,
            seed: 0,
            modality_mix: None,
            steps_per_epoch: None,
            grad_clip: 1.0,
            color_jitter: 0.1,
            feature_norm: FeatureNorm::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.crop == 0 || self.crop % patch_size != 0 {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of the patch size {patch_size}",
                self.crop
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if let Some(m) = self.modality_mix {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("modality_mix {m} must lie in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Param(format!("mask ratio {} must lie in [0, 1)", self.mask_ratio)));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch index: halved once from
    /// `lr_decay_epoch` on.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr0 * 0.5
        } else {
            self.lr0
        }
    }

    pub fn effective_mix(&self, has_multi: bool) -> f64 {
        if !has_multi {
            return 0.0;
        }
        self.modality_mix.unwrap_or(0.5)
    }
}

/// Named toggles that switch off one part of the method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// No masked feature modeling term (`α = 0`).
    NoMfm,
    /// Single-modal batches only.
    CudOnly,
    /// Separate cross-attention parameters per direction.
    NoSharedCa,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-mfm" => Ok(Self::NoMfm),
            "cud-only" => Ok(Self::CudOnly),
            "no-shared-ca" => Ok(Self::NoSharedCa),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected no-mfm, cud-only or no-shared-ca)"
            ))),
        }
    }
}

impl Ablation {
    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) {
        match self {
            Self::NoMfm => train.alpha = 0.0,
            Self::CudOnly => train.modality_mix = Some(0.0),
            Self::NoSharedCa => model.ca_shared = false,
        }
    }
}

/// One training batch, already stacked into `(B, 3, H, W)` tensors.
#[derive(Debug, Clone)]
pub enum Batch {
    Single {
        clean: Tensor,
        x1: Tensor,
        x2: Tensor,
        common: Tensor,
        unique1: Tensor,
        unique2: Tensor,
        geometry: GridGeometry,
        plan_seed: u64,
    },
    Multi {
        visible: Tensor,
        infrared: Tensor,
        geometry: GridGeometry,
    },
}

impl Batch {
    pub fn regime(&self) -> Regime {
        match self {
            Batch::Single { .. } => Regime::SingleModal,
            Batch::Multi { .. } => Regime::MultiModal,
        }
    }

    /// Hash over every tensor in the batch.
    pub fn checksum(&self) -> Result<String> {
        let tensors: Vec<&Tensor> = match self {
            Batch::Single {
                clean,
                x1,
                x2,
                common,
                unique1,
                unique2,
                ..
            } => vec![clean, x1, x2, common, unique1, unique2],
            Batch::Multi { visible, infrared, .. } => vec![visible, infrared],
        };
        let mut h = Sha256::new();
        for t in tensors {
            for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        if let Batch::Single { plan_seed, .. } = self {
            h.update(plan_seed.to_le_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Flip and photometric jitter parameters shared by aligned images.
#[derive(Debug, Clone, Copy)]
struct Augment {
    flip: bool,
    brightness: f32,
    contrast: f32,
}

impl Augment {
    fn draw(rng: &mut ChaCha8Rng, jitter: f32) -> Self {
        let factor = |rng: &mut ChaCha8Rng| {
            if jitter > 0.0 {
                rng.random_range(1.0 - jitter..=1.0 + jitter)
            } else {
                1.0
            }
        };
        let flip = rng.random_bool(0.5);
        let brightness = factor(rng);
        let contrast = factor(rng);
        Self {
            flip,
            brightness,
            contrast,
        }
    }

    fn apply(&self, img: &SceneImage) -> Result<SceneImage> {
        let img = if self.flip { img.flip_horizontal() } else { img.clone() };
        let data: Array3<f32> = img
            .data()
            .mapv(|v| ((v - 0.5) * self.contrast + 0.5) * self.brightness);
        SceneImage::from_clamped(data)
    }
}

/// Deterministic batch source: the batch for global step `s` depends only
/// on the corpora, the configuration and `s`.
pub struct BatchStream<'a> {
    single: &'a [SceneImage],
    multi: &'a [(SceneImage, SceneImage)],
    cfg: TrainConfig,
    patch_size: usize,
    dtype: DType,
}

/// Builds the batch stream; an empty single-modal corpus is a data error.
pub fn make_batches<'a>(
    single: &'a [SceneImage],
    multi: &'a [(SceneImage, SceneImage)],
    cfg: &TrainConfig,
    patch_size: usize,
    dtype: DType,
) -> Result<BatchStream<'a>> {
    if single.is_empty() {
        return Err(Error::Data("single-modal corpus is empty".into()));
    }
    cfg.validate(patch_size)?;
    for (i, (v, r)) in multi.iter().enumerate() {
        if (v.height(), v.width()) != (r.height(), r.width()) {
            return Err(Error::Data(format!(
                "multi-modal pair {i} is misaligned: {}x{} vs {}x{}",
                v.height(),
                v.width(),
                r.height(),
                r.width()
            )));
        }
    }
    Ok(BatchStream {
        single,
        multi,
        cfg: cfg.clone(),
        patch_size,
        dtype,
    })
}

impl BatchStream<'_> {
    pub fn mix(&self) -> f64 {
        self.cfg.effective_mix(!self.multi.is_empty())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch.unwrap_or_else(|| {
            let n = self.single.len().max(self.multi.len());
            n.div_ceil(self.cfg.batch_size).max(1)
        })
    }

    pub fn batch(&self, step: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        let mix = self.mix();
        let multi = mix > 0.0 && rng.random_bool(mix);
        let crop = self.cfg.crop;
        let geometry = GridGeometry::for_image(crop, crop, self.patch_size)?;
        let device = candle_core::Device::Cpu;
        if multi {
            let mut vis = Vec::with_capacity(self.cfg.batch_size);
            let mut ir = Vec::with_capacity(self.cfg.batch_size);
            for _ in 0..self.cfg.batch_size {
                let (v, r) = &self.multi[rng.random_range(0..self.multi.len())];
                let crop_seed = rng.random::<u64>();
                let aug = Augment::draw(&mut rng, self.cfg.color_jitter);
                let mut crop_rng = ChaCha8Rng::seed_from_u64(crop_seed);
                let vc = random_crop(v, crop, &mut crop_rng)?;
                let mut crop_rng = ChaCha8Rng::seed_from_u64(crop_seed);
                let rc = random_crop(r, crop, &mut crop_rng)?;
                vis.push(aug.apply(&vc)?);
                ir.push(aug.apply(&rc)?);
            }
            return Ok(Batch::Multi {
                visible: stack_images(&vis.iter().collect::<Vec<_>>(), self.dtype, &device)?,
                infrared: stack_images(&ir.iter().collect::<Vec<_>>(), self.dtype, &device)?,
                geometry,
            });
        }
        let mut parts: [Vec<SceneImage>; 6] = Default::default();
        for _ in 0..self.cfg.batch_size {
            let img = &self.single[rng.random_range(0..self.single.len())];
            let crop_img = random_crop(img, crop, &mut rng)?;
            let aug = Augment::draw(&mut rng, self.cfg.color_jitter);
            let clean = aug.apply(&crop_img)?;
            let masks = sample_mask_pair(crop, crop, self.patch_size, self.cfg.cover_frac, rng.random())?
                .with_noise_sigma(self.cfg.noise_sigma);
            let pair = apply_degradation(&clean, &masks)?;
            let t = decomposition_targets(&pair)?;
            for (slot, img) in parts.iter_mut().zip([clean, pair.x1, pair.x2, t.common_gt, t.unique1_gt, t.unique2_gt]) {
                slot.push(img);
            }
        }
        let plan_seed = rng.random();
        let st = |v: &[SceneImage]| stack_images(&v.iter().collect::<Vec<_>>(), self.dtype, &device);
        Ok(Batch::Single {
            clean: st(&parts[0])?,
            x1: st(&parts[1])?,
            x2: st(&parts[2])?,
            common: st(&parts[3])?,
            unique1: st(&parts[4])?,
            unique2: st(&parts[5])?,
            geometry,
            plan_seed,
        })
    }
}

/// Loss components of one batch as differentiable scalars, plus the total.
pub fn batch_losses(
    model: &DeFusionModel,
    batch: &Batch,
    cfg: &TrainConfig,
    frozen: Option<&[FrozenEncoder; 2]>,
) -> Result<(Vec<(&'static str, Tensor)>, Tensor)> {
    match batch {
        Batch::Single {
            clean,
            x1,
            x2,
            common,
            unique1,
            unique2,
            geometry,
            plan_seed,
        } => {
            let (h1, h2) = model.encode_pair(x1, x2, *geometry)?;
            let feats = model.decompose(&h1, &h2, DecompositionMode::Cud)?;
            let fc = feats.fused_common()?;
            let pc = model.project_common(&fc)?;
            let pu1 = model.project_unique(&feats.unique1)?;
            let pu2 = model.project_unique(&feats.unique2)?;
            let fused = model.mfm_encode(&feats, None)?;
            let recon = model.project_fused(&fused.pooled()?)?;
            let terms = loss_s_cud(
                &CudPredictions {
                    common: &pc,
                    unique1: &pu1,
                    unique2: &pu2,
                    reconstruction: &recon,
                },
                &CudTargets {
                    common,
                    unique1,
                    unique2,
                    clean,
                },
            )?;
            let mut comps: Vec<(&'static str, Tensor)> = terms.into_iter().collect();
            if cfg.alpha > 0.0 {
                let plan = SamplePlan::sample(geometry.n_tokens(), cfg.mask_ratio, *plan_seed)?;
                let masked = model.mfm_encode(&feats, Some(&plan))?;
                let decoded = model.interpolate_and_decode(&masked)?;
                comps.push((MFM, loss_mfm(&decoded, clean)?));
            }
            let total = loss_total(Regime::SingleModal, &comps, cfg.alpha)?;
            Ok((comps, total))
        }
        Batch::Multi {
            visible,
            infrared,
            geometry,
        } => {
            let frozen = frozen.ok_or_else(|| {
                Error::Config("multi-modal batches need frozen encoders for both modalities".into())
            })?;
            let (h1, h2) = model.encode_pair(visible, infrared, *geometry)?;
            let feats = model.decompose(&h1, &h2, DecompositionMode::Mcud)?;
            let (c12, c21) = match &feats.common {
                crate::decomposition::CommonFeatures::Directional(a, b) => (a, b),
                crate::decomposition::CommonFeatures::Single(_) => {
                    return Err(Error::Contract("mcud decomposition lost its directional commons".into()))
                }
            };
            let m_com = loss_m_com(c12, c21, cfg.feature_norm)?;
            let fc = feats.fused_common()?;
            let lat1 = model.project_latent(0, &feats.unique1, &fc)?;
            let lat2 = model.project_latent(1, &feats.unique2, &fc)?;
            let ref1 = lat1.with_tokens(frozen[0].forward(visible)?)?;
            let ref2 = lat2.with_tokens(frozen[1].forward(infrared)?)?;
            let m_uni = loss_m_uni(&lat1, &lat2, &ref1, &ref2, cfg.feature_norm)?;
            let comps = vec![(M_COM, m_com), (M_UNI, m_uni)];
            let total = loss_total(Regime::MultiModal, &comps, cfg.alpha)?;
            Ok((comps, total))
        }
    }
}

/// Hash of the model and training configuration.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let v = serde_json::json!({ "model": model, "train": train });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Model, optimizer and progress counters.
pub struct Trainer {
    model: DeFusionModel,
    cfg: TrainConfig,
    adam: Adam,
    frozen: Option<[FrozenEncoder; 2]>,
    step: u64,
    epochs_done: usize,
    last_frozen_grad_norm: f64,
}

impl Trainer {
    pub fn new(model: DeFusionModel, cfg: TrainConfig, frozen: Option<[FrozenEncoder; 2]>) -> Result<Self> {
        cfg.validate(model.config().patch_size())?;
        if let Some(f) = &frozen {
            for enc in f {
                if enc.out_dim() != model.config().frozen_dim {
                    return Err(Error::Config(format!(
                        "frozen encoder `{}` emits dim {} but the model expects {}",
                        enc.modality(),
                        enc.out_dim(),
                        model.config().frozen_dim
                    )));
                }
                if enc.config().patch_size != model.config().patch_size() {
                    return Err(Error::Config("frozen encoder patch size differs from the backbone".into()));
                }
            }
        }
        Ok(Self {
            adam: Adam::new(cfg.adam),
            model,
            cfg,
            frozen,
            step: 0,
            epochs_done: 0,
            last_frozen_grad_norm: 0.0,
        })
    }

    pub fn model(&self) -> &DeFusionModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn frozen(&self) -> Option<&[FrozenEncoder; 2]> {
        self.frozen.as_ref()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Gradient norm found on frozen-encoder weights in the last
    /// multi-modal step.
    pub fn last_frozen_grad_norm(&self) -> f64 {
        self.last_frozen_grad_norm
    }

    /// One optimizer update; returns the pre-update loss breakdown.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<LossReport> {
        let (comps, total) = batch_losses(&self.model, batch, &self.cfg, self.frozen.as_ref())?;
        let rep = report(self.step, batch.regime(), &comps, &total)?;
        let grads = total.backward()?;
        if let (Batch::Multi { .. }, Some(frozen)) = (batch, &self.frozen) {
            let mut sq = 0.0;
            for enc in frozen {
                for t in enc.weights().values() {
                    if let Some(g) = grads.get(t) {
                        sq += crate::nn::scalar(&g.sqr()?.sum_all()?)?;
                    }
                }
            }
            self.last_frozen_grad_norm = sq.sqrt();
        }
        let mut g = Adam::gather(self.model.params(), &grads);
        let norm = Adam::clip_global_norm(&mut g, self.cfg.grad_clip)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                component: "gradient".into(),
                step: self.step,
            });
        }
        self.adam.step(self.model.params(), &g, lr)?;
        self.step += 1;
        Ok(rep)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<String> {
        let (adam_tensors, adam_steps) = self.adam.export();
        let mut c = Container::new(serde_json::json!({
            "kind": MODEL_KIND,
            "model_config": self.model.config(),
            "train_config": self.cfg,
            "config_hash": config_hash(self.model.config(), &self.cfg),
            "step": self.step,
            "epochs_done": self.epochs_done,
            "adam_steps": adam_steps,
            "frozen_checksums": self.frozen.as_ref().map(|f| [f[0].checksum(), f[1].checksum()]),
        }));
        for (name, t) in self.model.params().snapshot()? {
            c.tensors.insert(format!("param.{name}"), t);
        }
        c.tensors.extend(adam_tensors);
        c.save(path)
    }

    /// Restores model, optimizer and counters from a checkpoint.
    pub fn resume(path: impl AsRef<Path>, frozen: Option<[FrozenEncoder; 2]>) -> Result<Self> {
        let path = path.as_ref();
        let (c, _) = Container::load(path)?;
        let (model, _) = model_from_container(&c, path)?;
        let cfg: TrainConfig = serde_json::from_value(c.meta["train_config"].clone())
            .map_err(|e| Error::checkpoint(path, format!("bad train config: {e}")))?;
        let steps: BTreeMap<String, u64> = serde_json::from_value(c.meta["adam_steps"].clone())
            .map_err(|e| Error::checkpoint(path, format!("bad optimizer state: {e}")))?;
        let adam = Adam::import(cfg.adam, &c.tensors, &steps, model.params())?;
        let mut t = Self::new(model, cfg, frozen)?;
        t.adam = adam;
        t.step = c.meta["step"].as_u64().unwrap_or(0);
        t.epochs_done = c.meta["epochs_done"].as_u64().unwrap_or(0) as usize;
        Ok(t)
    }
}

fn model_from_container(c: &Container, path: &Path) -> Result<(DeFusionModel, ModelConfig)> {
    if c.kind() != Some(MODEL_KIND) {
        return Err(Error::checkpoint(path, "not a model checkpoint"));
    }
    let cfg: ModelConfig = serde_json::from_value(c.meta["model_config"].clone())
        .map_err(|e| Error::checkpoint(path, format!("bad model config: {e}")))?;
    let model = DeFusionModel::new(cfg.clone())?;
    let weights: BTreeMap<String, Tensor> = c
        .tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("param.").map(|n| (n.to_string(), v.clone())))
        .collect();
    model.load_weights(&weights)?;
    Ok((model, cfg))
}

/// Loads a trained model; returns it with the checkpoint's content hash.
pub fn load_model(path: impl AsRef<Path>) -> Result<(DeFusionModel, String)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let (c, hash) = Container::load(path)?;
    let (model, _) = model_from_container(&c, path)?;
    Ok((model, hash))
}

/// Result of [`fit`].
pub struct FitOutcome {
    pub trainer: Trainer,
    pub final_checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub reports: Vec<LossReport>,
}

/// Runs the epoch loop from `trainer`'s current epoch to `cfg.epochs`,
/// writing one checkpoint per epoch, `final.ckpt`, and a JSON-lines log.
pub fn fit(
    mut trainer: Trainer,
    single: &[SceneImage],
    multi: &[(SceneImage, SceneImage)],
    out_dir: impl AsRef<Path>,
) -> Result<FitOutcome> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = trainer.cfg.clone();
    let stream = make_batches(single, multi, &cfg, trainer.model.config().patch_size(), trainer.model.dtype())?;
    if stream.mix() > 0.0 && trainer.frozen.is_none() {
        return Err(Error::Config(
            "multi-modal training requires frozen encoders for both modalities".into(),
        ));
    }
    let log_path = out_dir.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let steps = stream.steps_per_epoch();
    let mut reports = Vec::new();
    for epoch in trainer.epochs_done..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for _ in 0..steps {
            let batch = stream.batch(trainer.step)?;
            let rep = trainer.train_step(&batch, lr)?;
            writeln!(log, "{}", rep.to_json_line()).map_err(|e| Error::io(&log_path, e))?;
            log::debug!("step {} total {:.6}", rep.step, rep.total);
            reports.push(rep);
        }
        trainer.epochs_done = epoch + 1;
        let p = out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
        trainer.save_checkpoint(&p)?;
        log::info!("epoch {} done, lr {lr:e}", epoch + 1);
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    let checkpoint_hash = trainer.save_checkpoint(&final_checkpoint)?;
    if let Some(f) = &trainer.frozen {
        for enc in f {
            contract!(
                enc.current_checksum()? == enc.checksum(),
                "frozen encoder `{}` changed during training",
                enc.modality()
            );
        }
    }
    Ok(FitOutcome {
        trainer,
        final_checkpoint,
        checkpoint_hash,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            crop: 32,
            steps_per_epoch: Some(2),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_halves_once() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(19), 1e-4);
        assert_eq!(c.lr_at(20), 5e-5);
        assert_eq!(c.lr_at(25), 5e-5);
        assert_eq!(c.lr_at(29), 5e-5);
    }

    #[test]
    fn config_invariants() {
        let mut c = TrainConfig::default();
        c.epochs = 0;
        assert!(c.validate(8).is_err());
        let mut c = TrainConfig::default();
        c.lr0 = 0.0;
        assert!(c.validate(8).is_err());
        let mut c = TrainConfig::default();
        c.crop = 60;
        assert!(c.validate(8).is_err());
    }

    #[test]
    fn empty_single_corpus_is_data_error() {
        let r = make_batches(&[], &[], &small_cfg(), 8, DType::F32);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn zero_mix_is_all_single() {
        let single = synthetic::corpus(2, 40, 40, 0).unwrap();
        let multi = vec![synthetic::modal_pair(40, 40, 1).unwrap()];
        let mut cfg = small_cfg();
        cfg.modality_mix = Some(0.0);
        let s = make_batches(&single, &multi, &cfg, 8, DType::F32).unwrap();
        for step in 0..20 {
            assert_eq!(s.batch(step).unwrap().regime(), Regime::SingleModal);
        }
        cfg.modality_mix = Some(1.0);
        let s = make_batches(&single, &multi, &cfg, 8, DType::F32).unwrap();
        assert_eq!(s.batch(0).unwrap().regime(), Regime::MultiModal);
    }

    #[test]
    fn stream_is_reproducible() {
        let single = synthetic::corpus(3, 40, 40, 0).unwrap();
        let a = make_batches(&single, &[], &small_cfg(), 8, DType::F32).unwrap();
        let b = make_batches(&single, &[], &small_cfg(), 8, DType::F32).unwrap();
        assert_eq!(a.batch(0).unwrap().checksum().unwrap(), b.batch(0).unwrap().checksum().unwrap());
        assert_ne!(a.batch(0).unwrap().checksum().unwrap(), a.batch(1).unwrap().checksum().unwrap());
    }

    #[test]
    fn aligned_pairs_share_geometry_and_flip() {
        let (v, _) = synthetic::modal_pair(32, 32, 3).unwrap();
        let multi = vec![(v.clone(), v)];
        let single = synthetic::corpus(1, 32, 32, 0).unwrap();
        let mut cfg = small_cfg();
        cfg.modality_mix = Some(1.0);
        let s = make_batches(&single, &multi, &cfg, 8, DType::F32).unwrap();
        for step in 0..4 {
            match s.batch(step).unwrap() {
                Batch::Multi { visible, infrared, .. } => {
                    let d = (visible - infrared).unwrap().abs().unwrap().max_all().unwrap();
                    assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
                }
                _ => panic!("expected multi-modal batch"),
            }
        }
    }

    #[test]
    fn ablations_parse_and_apply() {
        let mut m = ModelConfig::micro();
        let mut t = TrainConfig::default();
        "no-mfm".parse::<Ablation>().unwrap().apply(&mut m, &mut t);
        assert_eq!(t.alpha, 0.0);
        "cud-only".parse::<Ablation>().unwrap().apply(&mut m, &mut t);
        assert_eq!(t.effective_mix(true), 0.0);
        "no-shared-ca".parse::<Ablation>().unwrap().apply(&mut m, &mut t);
        assert!(!m.ca_shared);
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn identical_steps_identical_reports() {
        let single = synthetic::corpus(2, 32, 32, 0).unwrap();
        let cfg = small_cfg();
        let run = || {
            let model = DeFusionModel::new(ModelConfig::micro()).unwrap();
            let mut t = Trainer::new(model, cfg.clone(), None).unwrap();
            let s = make_batches(&single, &[], &cfg, 8, DType::F32).unwrap();
            let b = s.batch(0).unwrap();
            t.train_step(&b, 1e-3).unwrap()
        };
        assert_eq!(run(), run());
    }
}
