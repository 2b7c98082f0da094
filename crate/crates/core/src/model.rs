//! The assembled network: backbone, cross attention, MFM encoder/decoder and
//! projector heads, all sharing one parameter store.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, TokenGrid, Vit};
use crate::decomposition::{decompose, CrossAttention, CrossAttentionConfig, DecomposedFeatures, DecompositionMode};
use crate::error::{contract, Error, Result};
use crate::imaging::GridGeometry;
use crate::mfm::{FusedFeature, LatentProjector, MfmConfig, MfmDecoder, MfmEncoder, ProjectorHead, SamplePlan};
use crate::nn::{parse_dtype, ParamStore, Scope, VarInit};

/// Parameter-name prefixes of each component.
pub mod groups {
    pub const BACKBONE: &str = "backbone.";
    pub const CA: &str = "ca.";
    pub const MFM_ENCODER: &str = "mfm_encoder.";
    pub const MFM_DECODER: &str = "mfm_decoder.";
    pub const PH_COMMON: &str = "ph_common.";
    pub const PH_UNIQUE: &str = "ph_unique.";
    pub const PH_FUSED: &str = "ph_fused.";
    pub const LP: &str = "lp.";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub ca_heads: usize,
    pub ca_depth: usize,
    pub ca_shared: bool,
    pub mfm_encoder_depth: usize,
    pub mfm_decoder_depth: usize,
    pub projector_depth: usize,
    /// Output width of the frozen encoders that the latent heads target.
    pub frozen_dim: usize,
    pub dtype: String,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn micro() -> Self {
        let backbone = BackboneConfig::micro();
        Self {
            backbone,
            ca_heads: 1,
            ca_depth: 1,
            ca_shared: true,
            mfm_encoder_depth: 2,
            mfm_decoder_depth: 2,
            projector_depth: 1,
            frozen_dim: backbone.frozen_counterpart().dim,
            dtype: "f32".into(),
            init_seed: 0,
        }
    }

    pub fn tiny() -> Self {
        let backbone = BackboneConfig::tiny();
        Self {
            backbone,
            projector_depth: 2,
            frozen_dim: backbone.frozen_counterpart().dim,
            ..Self::micro()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn dtype(&self) -> Result<DType> {
        parse_dtype(&self.dtype)
    }

    pub fn dim(&self) -> usize {
        self.backbone.dim
    }

    pub fn patch_size(&self) -> usize {
        self.backbone.patch_size
    }

    pub fn ca_config(&self) -> CrossAttentionConfig {
        CrossAttentionConfig {
            dim: self.backbone.dim,
            heads: self.ca_heads,
            depth: self.ca_depth,
            ffn_ratio: self.backbone.mlp_ratio,
            shared: self.ca_shared,
        }
    }

    pub fn mfm_config(&self) -> MfmConfig {
        MfmConfig {
            dim: self.backbone.dim,
            heads: self.backbone.heads,
            encoder_depth: self.mfm_encoder_depth,
            decoder_depth: self.mfm_decoder_depth,
            mlp_ratio: self.backbone.mlp_ratio,
            patch_size: self.backbone.patch_size,
            img_size: self.backbone.img_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.ca_config().validate()?;
        self.dtype()?;
        if self.frozen_dim == 0 {
            return Err(Error::Config("frozen_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Counts forward calls per component.
#[derive(Debug, Default)]
pub struct CallAudit {
    counters: [AtomicUsize; 9],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Backbone,
    CrossAttention,
    MfmEncoder,
    Interpolation,
    MfmDecoder,
    PhCommon,
    PhUnique,
    PhFused,
    LatentProjector,
}

impl CallAudit {
    fn bump(&self, c: Component) {
        self.counters[c as usize].fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, c: Component) -> usize {
        self.counters[c as usize].load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        for c in &self.counters {
            c.store(0, Ordering::Relaxed);
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeFusionModel {
    cfg: ModelConfig,
    params: ParamStore,
    backbone: Vit,
    ca: CrossAttention,
    mfm_encoder: MfmEncoder,
    mfm_decoder: MfmDecoder,
    ph_common: ProjectorHead,
    ph_unique: ProjectorHead,
    ph_fused: ProjectorHead,
    lp: [LatentProjector; 2],
    audit: Arc<CallAudit>,
}

impl DeFusionModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.dtype()?;
        let mut params = ParamStore::new(dtype, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let d = cfg.dim();
        let p = cfg.patch_size();
        let heads = cfg.backbone.heads;
        let mfm_cfg = cfg.mfm_config();
        let (backbone, ca, mfm_encoder, mfm_decoder, ph_common, ph_unique, ph_fused, lp) = {
            let mut init = VarInit::new(&mut params, &mut rng);
            let mut root = Scope::root(&mut init);
            (
                Vit::new(&mut root.sub("backbone"), cfg.backbone)?,
                CrossAttention::new(&mut root.sub("ca"), cfg.ca_config())?,
                MfmEncoder::new(&mut root.sub("mfm_encoder"), &mfm_cfg)?,
                MfmDecoder::new(&mut root.sub("mfm_decoder"), &mfm_cfg)?,
                ProjectorHead::new(&mut root.sub("ph_common"), d, heads, cfg.projector_depth, p)?,
                ProjectorHead::new(&mut root.sub("ph_unique"), d, heads, cfg.projector_depth, p)?,
                ProjectorHead::new(&mut root.sub("ph_fused"), d, heads, cfg.projector_depth, p)?,
                [
                    LatentProjector::new(&mut root.sub("lp.0"), d, cfg.frozen_dim)?,
                    LatentProjector::new(&mut root.sub("lp.1"), d, cfg.frozen_dim)?,
                ],
            )
        };
        Ok(Self {
            cfg,
            params,
            backbone,
            ca,
            mfm_encoder,
            mfm_decoder,
            ph_common,
            ph_unique,
            ph_fused,
            lp,
            audit: Arc::new(CallAudit::default()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn audit(&self) -> &CallAudit {
        &self.audit
    }

    pub fn cross_attention(&self) -> &CrossAttention {
        &self.ca
    }

    pub fn projector_fused(&self) -> &ProjectorHead {
        &self.ph_fused
    }

    /// Overwrites parameters from a name → tensor map. Every model parameter
    /// must be present with a matching shape.
    pub fn load_weights(&self, weights: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in self.params.names() {
            let t = weights
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
            self.params.assign(name, t)?;
        }
        Ok(())
    }

    /// Encodes a batch `(B, 3, H, W)` of patch-aligned views.
    pub fn encode(&self, images: &Tensor, geometry: GridGeometry) -> Result<TokenGrid> {
        self.audit.bump(Component::Backbone);
        TokenGrid::new(self.backbone.forward(images)?, geometry)
    }

    /// Encodes both views in one backbone pass.
    pub fn encode_pair(&self, x1: &Tensor, x2: &Tensor, geometry: GridGeometry) -> Result<(TokenGrid, TokenGrid)> {
        contract!(x1.dims() == x2.dims(), "views differ in shape: {:?} vs {:?}", x1.dims(), x2.dims());
        let b = x1.dims()[0];
        let both = self.encode(&Tensor::cat(&[x1, x2], 0)?, geometry)?;
        Ok((
            both.with_tokens(both.tokens.narrow(0, 0, b)?)?,
            both.with_tokens(both.tokens.narrow(0, b, b)?)?,
        ))
    }

    pub fn decompose(&self, h1: &TokenGrid, h2: &TokenGrid, mode: DecompositionMode) -> Result<DecomposedFeatures> {
        self.audit.bump(Component::CrossAttention);
        decompose(h1, h2, &self.ca, mode)
    }

    pub fn mfm_encode(&self, feats: &DecomposedFeatures, plan: Option<&SamplePlan>) -> Result<FusedFeature> {
        self.audit.bump(Component::MfmEncoder);
        self.mfm_encoder.encode(feats, plan)
    }

    /// Mask-token reinsertion and pixel decoding of a masked encoding.
    pub fn interpolate_and_decode(&self, fused: &FusedFeature) -> Result<Tensor> {
        self.audit.bump(Component::Interpolation);
        self.audit.bump(Component::MfmDecoder);
        self.mfm_decoder.decode(fused)
    }

    pub fn project_common(&self, tokens: &TokenGrid) -> Result<Tensor> {
        self.audit.bump(Component::PhCommon);
        self.ph_common.forward(tokens)
    }

    pub fn project_unique(&self, tokens: &TokenGrid) -> Result<Tensor> {
        self.audit.bump(Component::PhUnique);
        self.ph_unique.forward(tokens)
    }

    pub fn project_fused(&self, tokens: &TokenGrid) -> Result<Tensor> {
        self.audit.bump(Component::PhFused);
        self.ph_fused.forward(tokens)
    }

    /// `LP_modality(f_u, f_c)`; modality 0 pairs with `x¹`, 1 with `x²`.
    pub fn project_latent(&self, modality: usize, unique: &TokenGrid, common: &TokenGrid) -> Result<TokenGrid> {
        contract!(modality < 2, "modality index {modality} out of range");
        self.audit.bump(Component::LatentProjector);
        self.lp[modality].forward(unique, common)
    }
}
