//! Shared vision-transformer encoder and the frozen reference encoder.
//!
//! The trainable encoder turns each (padded) view into a grid of patch
//! tokens. The frozen encoder has the same structure at twice the width and
//! one extra block; it is pretrained with a masked-autoencoding objective on a
//! single modality and then held fixed as a distillation target.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{tensors_checksum, Container};
use crate::error::{contract, Error, Result};
use crate::imaging::{pad_to_patch, stack_images, GridGeometry, SceneImage};
use crate::nn::{
    build_blocks, patchify, resize_pos_embed, run_blocks, scalar, Block, FixedParams, Init, LayerNorm,
    Linear, ParamStore, Scope, VarInit,
};
use crate::optim::{Adam, AdamConfig};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Side length the positional table is laid out for; other sizes are
    /// interpolated.
    pub img_size: usize,
}

impl BackboneConfig {
    /// d=192, depth 4, 3 heads, patch 16.
    pub fn tiny() -> Self {
        Self {
            patch_size: 16,
            dim: 192,
            depth: 4,
            heads: 3,
            mlp_ratio: 4.0,
            img_size: 64,
        }
    }

    /// d=64, depth 2, 2 heads, patch 8.
    pub fn micro() -> Self {
        Self {
            patch_size: 8,
            dim: 64,
            depth: 2,
            heads: 2,
            mlp_ratio: 4.0,
            img_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.dim == 0 || self.heads == 0 || self.img_size == 0 {
            return Err(Error::Config(format!("degenerate backbone config {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.img_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "img_size {} is not a multiple of patch {}",
                self.img_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn base_grid(&self) -> (usize, usize) {
        let g = self.img_size / self.patch_size;
        (g, g)
    }

    /// Shape of the frozen encoder paired with this backbone: twice the
    /// width and one more block.
    pub fn frozen_counterpart(&self) -> Self {
        Self {
            dim: self.dim * 2,
            depth: self.depth + 1,
            heads: self.heads * 2,
            ..*self
        }
    }
}

/// Patch tokens `(B, N, d)` plus the grid they were laid out on.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub geometry: GridGeometry,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, geometry: GridGeometry) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        contract!(
            n == geometry.n_tokens(),
            "token count {n} does not match grid {}x{}",
            geometry.grid_h,
            geometry.grid_w
        );
        Ok(Self { tokens, geometry })
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn batch(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        Self::new(tokens, self.geometry)
    }

    pub fn same_shape(&self, other: &TokenGrid) -> bool {
        self.tokens.dims() == other.tokens.dims() && self.geometry == other.geometry
    }
}

/// Plain ViT: linear patch embedding, learned positional table, pre-norm
/// blocks, final layer norm. No class token.
#[derive(Debug, Clone)]
pub struct Vit {
    cfg: BackboneConfig,
    patch_embed: Linear,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Vit {
    pub fn new(scope: &mut Scope, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let (gh, gw) = cfg.base_grid();
        Ok(Self {
            cfg,
            patch_embed: Linear::new(&mut scope.sub("patch_embed"), p * p * CHANNELS, cfg.dim, true)?,
            pos_embed: scope.get("pos_embed", &[1, gh * gw, cfg.dim], Init::Normal(0.02))?,
            blocks: build_blocks(scope, cfg.depth, cfg.dim, cfg.heads, cfg.mlp_ratio)?,
            norm: LayerNorm::new(&mut scope.sub("norm"), cfg.dim)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Patch embedding plus positional table for the given grid.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        contract!(c == CHANNELS, "backbone expects {CHANNELS} channels, got {c}");
        let p = self.cfg.patch_size;
        let tokens = self.patch_embed.forward(&patchify(images, p)?)?;
        let pos = resize_pos_embed(&self.pos_embed, self.cfg.base_grid(), (h / p, w / p))?;
        Ok(tokens.broadcast_add(&pos)?)
    }

    pub fn blocks_and_norm(&self, tokens: &Tensor) -> Result<Tensor> {
        self.norm.forward(&run_blocks(&self.blocks, tokens)?)
    }

    /// `(B, 3, H, W)` with `H, W` patch multiples → `(B, N, d)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.blocks_and_norm(&self.embed(images)?)
    }
}

/// Encodes one image (padding to the patch grid as needed).
pub fn encode(vit: &Vit, img: &SceneImage, dtype: DType, device: &Device) -> Result<TokenGrid> {
    let (padded, geom) = pad_to_patch(img, vit.cfg.patch_size)?;
    let x = stack_images(&[&padded], dtype, device)?;
    TokenGrid::new(vit.forward(&x)?, geom)
}

/// A pretrained encoder whose weights are plain tensors, so no gradient is
/// ever recorded for them.
#[derive(Debug)]
pub struct FrozenEncoder {
    vit: Vit,
    modality: String,
    weights: BTreeMap<String, Tensor>,
    checksum: String,
    calls: AtomicUsize,
}

impl Clone for FrozenEncoder {
    fn clone(&self) -> Self {
        Self {
            vit: self.vit.clone(),
            modality: self.modality.clone(),
            weights: self.weights.clone(),
            checksum: self.checksum.clone(),
            calls: AtomicUsize::new(0),
        }
    }
}

impl FrozenEncoder {
    pub fn from_weights(cfg: BackboneConfig, modality: &str, weights: BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let weights: BTreeMap<String, Tensor> = weights
            .into_iter()
            .map(|(k, v)| Ok((k, v.detach().to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        let vit = {
            let mut fixed = FixedParams::new(&weights, dtype);
            let mut scope = Scope::root(&mut fixed);
            Vit::new(&mut scope, cfg)?
        };
        let checksum = tensors_checksum(weights.iter())?;
        Ok(Self {
            vit,
            modality: modality.to_string(),
            weights,
            checksum,
            calls: AtomicUsize::new(0),
        })
    }

    /// Randomly initialised encoder (the zero-step pretraining ablation).
    pub fn random(cfg: BackboneConfig, modality: &str, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        {
            let mut init = VarInit::new(&mut store, &mut rng);
            Vit::new(&mut Scope::root(&mut init), cfg)?;
        }
        Self::from_weights(cfg, modality, store.snapshot()?, dtype)
    }

    pub fn config(&self) -> &BackboneConfig {
        self.vit.config()
    }

    pub fn out_dim(&self) -> usize {
        self.vit.config().dim
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    /// Hash of the weights captured at construction.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Recomputes the weight hash from the live tensors.
    pub fn current_checksum(&self) -> Result<String> {
        tensors_checksum(self.weights.iter())
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    /// Number of forward calls made so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// `(B, 3, H, W)` → `(B, N, d_fix)`, detached from any graph.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(self.vit.forward(&images.detach())?.detach())
    }

    pub fn encode(&self, img: &SceneImage) -> Result<TokenGrid> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let dtype = self.vit.pos_embed.dtype();
        let g = encode(&self.vit, img, dtype, &Device::Cpu)?;
        g.with_tokens(g.tokens.detach())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<String> {
        let mut c = Container::new(serde_json::json!({
            "kind": "frozen_encoder",
            "modality": self.modality,
            "config": self.vit.config(),
            "checksum": self.checksum,
        }));
        c.tensors = self.weights.clone();
        c.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>, dtype: DType) -> Result<Self> {
        let path = path.as_ref();
        let (c, _) = Container::load(path)?;
        if c.kind() != Some("frozen_encoder") {
            return Err(Error::checkpoint(path, "not a frozen-encoder checkpoint"));
        }
        let cfg: BackboneConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::checkpoint(path, format!("bad config block: {e}")))?;
        let modality = c.meta["modality"].as_str().unwrap_or("unknown").to_string();
        Self::from_weights(cfg, &modality, c.tensors, dtype)
    }
}

/// Masked-autoencoder pretraining settings for the frozen encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    pub decoder_dim: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            crop: 64,
            lr: 1e-3,
            mask_ratio: 0.75,
            decoder_dim: 64,
            seed: 0,
        }
    }
}

/// Outcome of [`pretrain_frozen`]: the frozen encoder and its loss curve.
#[derive(Debug)]
pub struct PretrainResult {
    pub encoder: FrozenEncoder,
    pub losses: Vec<f64>,
}

struct MaeDecoder {
    embed: Linear,
    mask_token: Tensor,
    pos_embed: Tensor,
    block: Block,
    norm: LayerNorm,
    head: Linear,
}

/// Random crop (reflect-free: images smaller than the crop are edge-padded
/// first) with a horizontal flip coin.
pub(crate) fn random_crop(img: &SceneImage, crop: usize, rng: &mut ChaCha8Rng) -> Result<SceneImage> {
    let base = if img.height() < crop || img.width() < crop {
        let (h, w, c) = img.dims();
        let src = img.data();
        SceneImage::new(ndarray::Array3::from_shape_fn(
            (h.max(crop), w.max(crop), c),
            |(y, x, k)| src[[y.min(h - 1), x.min(w - 1), k]],
        ))?
    } else {
        img.clone()
    };
    let top = rng.random_range(0..=base.height() - crop);
    let left = rng.random_range(0..=base.width() - crop);
    base.crop(top, left, crop, crop)
}

/// Trains an encoder of shape `cfg` with masked-patch pixel reconstruction
/// (mean squared error on masked patches), then freezes it.
///
/// `steps == 0` returns the randomly initialised encoder.
pub fn pretrain_frozen(
    corpus: &[SceneImage],
    cfg: BackboneConfig,
    modality: &str,
    pcfg: &PretrainConfig,
    dtype: DType,
) -> Result<PretrainResult> {
    if corpus.is_empty() {
        return Err(Error::Data(format!(
            "pretraining corpus for modality `{modality}` is empty"
        )));
    }
    cfg.validate()?;
    if !(0.0..1.0).contains(&pcfg.mask_ratio) {
        return Err(Error::Param(format!("mask ratio {} must lie in [0, 1)", pcfg.mask_ratio)));
    }
    if pcfg.crop % cfg.patch_size != 0 {
        return Err(Error::Config(format!(
            "crop {} is not a multiple of patch {}",
            pcfg.crop, cfg.patch_size
        )));
    }
    let device = Device::Cpu;
    let mut store = ParamStore::new(dtype, device.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let p = cfg.patch_size;
    let grid = pcfg.crop / p;
    let n = grid * grid;
    let (vit, dec) = {
        let mut init = VarInit::new(&mut store, &mut rng);
        let mut root = Scope::root(&mut init);
        let vit = Vit::new(&mut root.sub("encoder"), cfg)?;
        let mut ds = root.sub("decoder");
        let dd = pcfg.decoder_dim;
        let heads = if dd % 2 == 0 { 2 } else { 1 };
        let dec = MaeDecoder {
            embed: Linear::new(&mut ds.sub("embed"), cfg.dim, dd, true)?,
            mask_token: ds.get("mask_token", &[1, 1, dd], Init::Normal(0.02))?,
            pos_embed: ds.get("pos_embed", &[1, n, dd], Init::Normal(0.02))?,
            block: Block::new(&mut ds.sub("block"), dd, heads, 4.0)?,
            norm: LayerNorm::new(&mut ds.sub("norm"), dd)?,
            head: Linear::new(&mut ds.sub("head"), dd, p * p * CHANNELS, true)?,
        };
        (vit, dec)
    };

    let keep = ((1.0 - pcfg.mask_ratio) * n as f64).ceil().max(1.0) as usize;
    let mut opt = Adam::new(AdamConfig::default());
    let mut losses = Vec::with_capacity(pcfg.steps);
    for _ in 0..pcfg.steps {
        let crops: Vec<SceneImage> = (0..pcfg.batch_size.max(1))
            .map(|_| {
                let i = rng.random_range(0..corpus.len());
                let c = random_crop(&corpus[i], pcfg.crop, &mut rng)?;
                Ok(if rng.random_bool(0.5) { c.flip_horizontal() } else { c })
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&SceneImage> = crops.iter().collect();
        let x = stack_images(&refs, dtype, &device)?;
        let b = refs.len();

        let mut kept: Vec<usize> = sample(&mut rng, n, keep).into_vec();
        kept.sort_unstable();
        let masked: Vec<usize> = (0..n).filter(|i| kept.binary_search(i).is_err()).collect();
        let kept_idx = Tensor::from_vec(kept.iter().map(|&i| i as u32).collect::<Vec<_>>(), keep, &device)?;

        let tokens = vit.embed(&x)?.index_select(&kept_idx, 1)?;
        let latent = vit.blocks_and_norm(&tokens)?;

        // reinsert mask tokens and unshuffle back to raster order
        let visible = dec.embed.forward(&latent)?;
        let dd = pcfg.decoder_dim;
        let fill = dec.mask_token.broadcast_as((b, n - keep, dd))?;
        let order: Vec<u32> = kept.iter().chain(masked.iter()).map(|&i| i as u32).collect();
        let mut inverse = vec![0u32; n];
        for (pos, &src) in order.iter().enumerate() {
            inverse[src as usize] = pos as u32;
        }
        let inverse = Tensor::from_vec(inverse, n, &device)?;
        let full = Tensor::cat(&[&visible, &fill.contiguous()?], 1)?.index_select(&inverse, 1)?;
        let h = dec.block.forward(&full.broadcast_add(&dec.pos_embed)?)?;
        let pred = dec.head.forward(&dec.norm.forward(&h)?)?;

        let target = patchify(&x, p)?;
        let loss = if masked.is_empty() {
            (pred - target)?.sqr()?.mean_all()?
        } else {
            let midx = Tensor::from_vec(masked.iter().map(|&i| i as u32).collect::<Vec<_>>(), masked.len(), &device)?;
            (pred.index_select(&midx, 1)? - target.index_select(&midx, 1)?)?.sqr()?.mean_all()?
        };
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                component: "mae_reconstruction".into(),
                step: losses.len() as u64,
            });
        }
        losses.push(value);
        let mut grads = Adam::gather(&store, &loss.backward()?);
        Adam::clip_global_norm(&mut grads, 1.0)?;
        opt.step(&store, &grads, pcfg.lr)?;
    }

    let weights: BTreeMap<String, Tensor> = store
        .snapshot()?
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("encoder.").map(|s| (s.to_string(), v)))
        .collect();
    Ok(PretrainResult {
        encoder: FrozenEncoder::from_weights(cfg, modality, weights, dtype)?,
        losses,
    })
}
