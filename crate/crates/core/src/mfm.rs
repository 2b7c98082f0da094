//! Masked feature modeling: category-balanced token sampling, the MFM
//! encoder, the interpolation layer + pixel decoder, and the projector heads.

use candle_core::{Device, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{TokenGrid, CHANNELS};
use crate::decomposition::DecomposedFeatures;
use crate::error::{contract, Error, Result};
use crate::imaging::GridGeometry;
use crate::nn::{build_blocks, resize_pos_embed, run_blocks, unpatchify, Block, Init, LayerNorm, Linear, Scope};

/// Category order used throughout: common, unique¹, unique².
pub const CATEGORIES: [&str; 3] = ["common", "unique1", "unique2"];

/// Kept token indices per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub kept: [Vec<usize>; 3],
    pub n_tokens: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl SamplePlan {
    /// Keeps `⌈(1−ρ)·N⌉` tokens per category, drawn uniformly without
    /// replacement and independently for each category.
    pub fn sample(n_tokens: usize, mask_ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&mask_ratio) {
            return Err(Error::Param(format!("mask ratio {mask_ratio} must lie in [0, 1)")));
        }
        contract!(n_tokens > 0, "cannot sample from an empty token grid");
        let keep = (((1.0 - mask_ratio) * n_tokens as f64) - 1e-9).ceil().max(1.0) as usize;
        let keep = keep.min(n_tokens);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let mut v = sample(&mut rng, n_tokens, keep).into_vec();
            v.sort_unstable();
            v
        };
        let kept = [draw(), draw(), draw()];
        Ok(Self {
            kept,
            n_tokens,
            mask_ratio,
            seed,
        })
    }

    /// A plan that keeps every token.
    pub fn keep_all(n_tokens: usize) -> Self {
        let all: Vec<usize> = (0..n_tokens).collect();
        Self {
            kept: [all.clone(), all.clone(), all],
            n_tokens,
            mask_ratio: 0.0,
            seed: 0,
        }
    }

    pub fn keep_count(&self) -> usize {
        self.kept[0].len()
    }

    pub fn is_full(&self) -> bool {
        self.kept.iter().all(|k| k.len() == self.n_tokens)
    }

    fn check(&self) -> Result<()> {
        for k in &self.kept {
            contract!(
                k.windows(2).all(|w| w[0] < w[1]) && k.last().is_none_or(|&l| l < self.n_tokens),
                "plan indices must be sorted, unique and below {}",
                self.n_tokens
            );
        }
        Ok(())
    }
}

/// Samples a plan sized to the decomposed features' token count.
pub fn sample_tokens(feats: &DecomposedFeatures, mask_ratio: f64, seed: u64) -> Result<SamplePlan> {
    SamplePlan::sample(feats.unique1.n_tokens(), mask_ratio, seed)
}

fn index_tensor(idx: &[usize], device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        idx.len(),
        device,
    )?)
}

/// Output of the MFM encoder: one encoded stream per category, holding the
/// kept tokens only.
#[derive(Debug, Clone)]
pub struct FusedFeature {
    pub streams: [Tensor; 3],
    pub plan: SamplePlan,
    pub geometry: GridGeometry,
}

impl FusedFeature {
    /// One token per spatial site: the category streams summed position-wise.
    /// Sites dropped by a category receive nothing from it.
    pub fn pooled(&self) -> Result<TokenGrid> {
        let n = self.plan.n_tokens;
        let tokens = if self.plan.is_full() {
            ((&self.streams[0] + &self.streams[1])? + &self.streams[2])?
        } else {
            let (b, _, d) = self.streams[0].dims3()?;
            let mut acc = Tensor::zeros((b, n, d), self.streams[0].dtype(), self.streams[0].device())?;
            for (s, kept) in self.streams.iter().zip(&self.plan.kept) {
                acc = acc.index_add(&index_tensor(kept, s.device())?, s, 1)?;
            }
            acc
        };
        TokenGrid::new(tokens, self.geometry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfmConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    /// Side length of the decoder's positional table.
    pub img_size: usize,
}

/// `H_MFME`: transformer blocks over the concatenated category tokens.
#[derive(Debug, Clone)]
pub struct MfmEncoder {
    category_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl MfmEncoder {
    pub fn new(scope: &mut Scope, cfg: &MfmConfig) -> Result<Self> {
        Ok(Self {
            category_embed: scope.get("category_embed", &[3, cfg.dim], Init::Normal(0.02))?,
            blocks: build_blocks(scope, cfg.encoder_depth, cfg.dim, cfg.heads, cfg.mlp_ratio)?,
            norm: LayerNorm::new(&mut scope.sub("norm"), cfg.dim)?,
        })
    }

    /// Encodes the (kept) category tokens. `plan = None` encodes all three
    /// full grids.
    pub fn encode(&self, feats: &DecomposedFeatures, plan: Option<&SamplePlan>) -> Result<FusedFeature> {
        let common = feats.fused_common()?;
        let grids = [&common, &feats.unique1, &feats.unique2];
        contract!(
            grids.iter().all(|g| g.same_shape(&common)),
            "decomposed grids differ in shape"
        );
        let n = common.n_tokens();
        let plan = match plan {
            Some(p) => {
                contract!(p.n_tokens == n, "plan covers {} tokens, features have {n}", p.n_tokens);
                p.check()?;
                p.clone()
            }
            None => SamplePlan::keep_all(n),
        };
        let device = common.tokens.device();
        let mut parts = Vec::with_capacity(3);
        for (c, (g, kept)) in grids.iter().zip(&plan.kept).enumerate() {
            let t = if kept.len() == n {
                g.tokens.clone()
            } else {
                g.tokens.index_select(&index_tensor(kept, device)?, 1)?
            };
            parts.push(t.broadcast_add(&self.category_embed.narrow(0, c, 1)?)?);
        }
        let x = Tensor::cat(&parts, 1)?;
        let y = self.norm.forward(&run_blocks(&self.blocks, &x)?)?;
        let k = plan.kept.iter().map(Vec::len).collect::<Vec<_>>();
        let streams = [
            y.narrow(1, 0, k[0])?,
            y.narrow(1, k[0], k[1])?,
            y.narrow(1, k[0] + k[1], k[2])?,
        ];
        Ok(FusedFeature {
            streams,
            plan,
            geometry: common.geometry,
        })
    }
}

/// Interpolation layer (mask-token reinsertion) followed by the pixel decoder.
#[derive(Debug, Clone)]
pub struct MfmDecoder {
    mask_token: Tensor,
    pos_embed: Tensor,
    base_grid: (usize, usize),
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
    patch_size: usize,
}

impl MfmDecoder {
    pub fn new(scope: &mut Scope, cfg: &MfmConfig) -> Result<Self> {
        let g = cfg.img_size / cfg.patch_size;
        let p = cfg.patch_size;
        Ok(Self {
            mask_token: scope.get("mask_token", &[1, 1, cfg.dim], Init::Normal(0.02))?,
            pos_embed: scope.get("pos_embed", &[1, g * g, cfg.dim], Init::Normal(0.02))?,
            base_grid: (g, g),
            blocks: build_blocks(scope, cfg.decoder_depth, cfg.dim, cfg.heads, cfg.mlp_ratio)?,
            norm: LayerNorm::new(&mut scope.sub("norm"), cfg.dim)?,
            head: Linear::new(&mut scope.sub("head"), cfg.dim, p * p * CHANNELS, true)?,
            patch_size: p,
        })
    }

    /// Fills dropped positions of every category with the mask token and
    /// sums the three restored streams into one `(B, N, d)` grid.
    pub fn interpolate(&self, fused: &FusedFeature) -> Result<Tensor> {
        let n = fused.plan.n_tokens;
        contract!(
            n == fused.geometry.n_tokens(),
            "plan covers {n} tokens but geometry has {}",
            fused.geometry.n_tokens()
        );
        let (b, _, d) = fused.streams[0].dims3()?;
        let device = fused.streams[0].device();
        let mut acc: Option<Tensor> = None;
        for (s, kept) in fused.streams.iter().zip(&fused.plan.kept) {
            contract!(s.dims()[1] == kept.len(), "stream length disagrees with plan");
            let restored = if kept.len() == n {
                s.clone()
            } else {
                let dropped: Vec<usize> = (0..n).filter(|i| kept.binary_search(i).is_err()).collect();
                let fill = self.mask_token.broadcast_as((b, dropped.len(), d))?.contiguous()?;
                let mut inverse = vec![0usize; n];
                for (pos, &src) in kept.iter().chain(dropped.iter()).enumerate() {
                    inverse[src] = pos;
                }
                Tensor::cat(&[s, &fill], 1)?.index_select(&index_tensor(&inverse, device)?, 1)?
            };
            acc = Some(match acc {
                None => restored,
                Some(a) => (a + restored)?,
            });
        }
        Ok(acc.expect("three categories"))
    }

    /// Predicts the clean image `(B, 3, H_pad, W_pad)`.
    pub fn decode(&self, fused: &FusedFeature) -> Result<Tensor> {
        let g = &fused.geometry;
        contract!(g.patch_size == self.patch_size, "decoder patch size mismatch");
        let x = self.interpolate(fused)?;
        let pos = resize_pos_embed(&self.pos_embed, self.base_grid, (g.grid_h, g.grid_w))?;
        let x = x.broadcast_add(&pos)?;
        let y = self.head.forward(&self.norm.forward(&run_blocks(&self.blocks, &x)?)?)?;
        unpatchify(&y, g, CHANNELS)
    }
}

/// `PH`: a shallow transformer projector mapping tokens to pixel patches.
/// With zero blocks it is a plain linear probe.
#[derive(Debug, Clone)]
pub struct ProjectorHead {
    blocks: Vec<Block>,
    norm: Option<LayerNorm>,
    head: Linear,
    patch_size: usize,
}

impl ProjectorHead {
    pub fn new(scope: &mut Scope, dim: usize, heads: usize, depth: usize, patch_size: usize) -> Result<Self> {
        Ok(Self {
            blocks: build_blocks(scope, depth, dim, heads, 4.0)?,
            norm: if depth > 0 {
                Some(LayerNorm::new(&mut scope.sub("norm"), dim)?)
            } else {
                None
            },
            head: Linear::new(&mut scope.sub("head"), dim, patch_size * patch_size * CHANNELS, true)?,
            patch_size,
        })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Raw (unclamped) `(B, 3, H_pad, W_pad)` prediction.
    pub fn forward(&self, tokens: &TokenGrid) -> Result<Tensor> {
        contract!(
            tokens.geometry.patch_size == self.patch_size,
            "projector patch {} does not match grid patch {}",
            self.patch_size,
            tokens.geometry.patch_size
        );
        let mut x = run_blocks(&self.blocks, &tokens.tokens)?;
        if let Some(n) = &self.norm {
            x = n.forward(&x)?;
        }
        unpatchify(&self.head.forward(&x)?, &tokens.geometry, CHANNELS)
    }
}

/// `LP`: a linear modality head on `[f_u, f_c]` into the frozen encoder's
/// latent width.
#[derive(Debug, Clone)]
pub struct LatentProjector {
    linear: Linear,
    out_dim: usize,
}

impl LatentProjector {
    pub fn new(scope: &mut Scope, dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(&mut scope.sub("linear"), 2 * dim, out_dim, true)?,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, unique: &TokenGrid, common: &TokenGrid) -> Result<TokenGrid> {
        contract!(unique.same_shape(common), "LP inputs differ in shape");
        let x = Tensor::cat(&[&unique.tokens, &common.tokens], 2)?;
        unique.with_tokens(self.linear.forward(&x)?)
    }
}
