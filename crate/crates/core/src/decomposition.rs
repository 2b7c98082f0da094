//! Task-indicated cross attention: one layer, two wirings.
//!
//! For token grids `h1`, `h2` with projections `Q_i, K_i, V_i`:
//!
//! * common:  `(FFN(softmax(Q2 K2ᵀ/√d) V1), FFN(softmax(Q1 K1ᵀ/√d) V2))`
//! * unique:  `(FFN(softmax(Q2 K1ᵀ/√d) V1), FFN(softmax(Q1 K2ᵀ/√d) V2))`
//!
//! The first output of each pair is the `x¹`-side call, the second the
//! `x²`-side call. With parameter sharing both calls read one parameter set;
//! without it each side owns its own.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenGrid;
use crate::error::{contract, Error, Result};
use crate::nn::{scaled_dot_attention, Linear, Mlp, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskIndicator {
    Common,
    Unique,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecompositionMode {
    /// Single-modal: the two directional commons are averaged.
    Cud,
    /// Multi-modal: both directional commons are kept.
    Mcud,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_ratio: f64,
    pub shared: bool,
}

impl CrossAttentionConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            heads: 1,
            depth: 1,
            ffn_ratio: 4.0,
            shared: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("invalid cross-attention config {self:?}")));
        }
        Ok(())
    }
}

/// `W^Q, W^K, W^V` and the feed-forward network of one call direction.
#[derive(Debug, Clone)]
pub struct CrossAttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub ffn: Mlp,
}

impl CrossAttentionParams {
    pub fn new(scope: &mut Scope, dim: usize, ffn_ratio: f64) -> Result<Self> {
        let hidden = ((dim as f64) * ffn_ratio).round().max(1.0) as usize;
        Ok(Self {
            wq: Linear::new(&mut scope.sub("wq"), dim, dim, false)?,
            wk: Linear::new(&mut scope.sub("wk"), dim, dim, false)?,
            wv: Linear::new(&mut scope.sub("wv"), dim, dim, false)?,
            ffn: Mlp::new(&mut scope.sub("ffn"), dim, hidden)?,
        })
    }

    /// `FFN(softmax(Q Kᵀ/√d) V)` with queries from `q_src`, keys from `k_src`
    /// and values from `v_src`.
    fn attend(&self, q_src: &Tensor, k_src: &Tensor, v_src: &Tensor, heads: usize) -> Result<Tensor> {
        let q = self.wq.forward(q_src)?;
        let k = self.wk.forward(k_src)?;
        let v = self.wv.forward(v_src)?;
        self.ffn.forward(&scaled_dot_attention(&q, &k, &v, heads)?)
    }
}

#[derive(Debug, Clone)]
struct CaLayer {
    x1_side: CrossAttentionParams,
    /// `None` when parameters are shared.
    x2_side: Option<CrossAttentionParams>,
}

impl CaLayer {
    fn side2(&self) -> &CrossAttentionParams {
        self.x2_side.as_ref().unwrap_or(&self.x1_side)
    }
}

/// A stack of cross-attention layers applied pairwise.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    cfg: CrossAttentionConfig,
    layers: Vec<CaLayer>,
}

impl CrossAttention {
    pub fn new(scope: &mut Scope, cfg: CrossAttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.depth)
            .map(|i| {
                let mut ls = scope.sub(format!("layers.{i}"));
                let x1_side = CrossAttentionParams::new(&mut ls.sub("x1"), cfg.dim, cfg.ffn_ratio)?;
                let x2_side = if cfg.shared {
                    None
                } else {
                    Some(CrossAttentionParams::new(&mut ls.sub("x2"), cfg.dim, cfg.ffn_ratio)?)
                };
                Ok(CaLayer { x1_side, x2_side })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> &CrossAttentionConfig {
        &self.cfg
    }

    /// Parameters of layer `layer` for the `x¹` (`side = 0`) or `x²` call.
    pub fn params(&self, layer: usize, side: usize) -> &CrossAttentionParams {
        let l = &self.layers[layer];
        if side == 0 {
            &l.x1_side
        } else {
            l.side2()
        }
    }

    fn run(&self, h1: &Tensor, h2: &Tensor, task: TaskIndicator) -> Result<(Tensor, Tensor)> {
        let heads = self.cfg.heads;
        let (mut a, mut b) = (h1.clone(), h2.clone());
        for layer in &self.layers {
            let (p1, p2) = (&layer.x1_side, layer.side2());
            let (na, nb) = match task {
                TaskIndicator::Common => (p1.attend(&b, &b, &a, heads)?, p2.attend(&a, &a, &b, heads)?),
                TaskIndicator::Unique => (p1.attend(&b, &a, &a, heads)?, p2.attend(&a, &b, &b, heads)?),
            };
            a = na;
            b = nb;
        }
        Ok((a, b))
    }

    pub fn forward(&self, h1: &TokenGrid, h2: &TokenGrid, task: TaskIndicator) -> Result<(TokenGrid, TokenGrid)> {
        contract!(
            h1.same_shape(h2),
            "cross attention inputs differ: {:?} vs {:?}",
            h1.tokens.dims(),
            h2.tokens.dims()
        );
        contract!(
            h1.dim() == self.cfg.dim,
            "token dim {} does not match cross attention dim {}",
            h1.dim(),
            self.cfg.dim
        );
        let (a, b) = self.run(&h1.tokens, &h2.tokens, task)?;
        Ok((h1.with_tokens(a)?, h2.with_tokens(b)?))
    }
}

/// Directional common features `(f_c^{1→2}, f_c^{2→1})`.
pub fn ca_common(h1: &TokenGrid, h2: &TokenGrid, ca: &CrossAttention) -> Result<(TokenGrid, TokenGrid)> {
    ca.forward(h1, h2, TaskIndicator::Common)
}

/// Unique features `(f_u¹, f_u²)`.
pub fn ca_unique(h1: &TokenGrid, h2: &TokenGrid, ca: &CrossAttention) -> Result<(TokenGrid, TokenGrid)> {
    ca.forward(h1, h2, TaskIndicator::Unique)
}

#[derive(Debug, Clone)]
pub enum CommonFeatures {
    Single(TokenGrid),
    Directional(TokenGrid, TokenGrid),
}

/// Common and unique token grids of one source pair.
#[derive(Debug, Clone)]
pub struct DecomposedFeatures {
    pub common: CommonFeatures,
    pub unique1: TokenGrid,
    pub unique2: TokenGrid,
}

impl DecomposedFeatures {
    /// The single common stream: as-is in cud mode, the mean of the two
    /// directions in mcud mode.
    pub fn fused_common(&self) -> Result<TokenGrid> {
        match &self.common {
            CommonFeatures::Single(c) => Ok(c.clone()),
            CommonFeatures::Directional(a, b) => mean_grid(a, b),
        }
    }

    pub fn grid_count(&self) -> usize {
        match self.common {
            CommonFeatures::Single(_) => 3,
            CommonFeatures::Directional(..) => 4,
        }
    }
}

pub(crate) fn mean_grid(a: &TokenGrid, b: &TokenGrid) -> Result<TokenGrid> {
    a.with_tokens(((&a.tokens + &b.tokens)? * 0.5)?)
}

pub fn decompose(h1: &TokenGrid, h2: &TokenGrid, ca: &CrossAttention, mode: DecompositionMode) -> Result<DecomposedFeatures> {
    let (c12, c21) = ca_common(h1, h2, ca)?;
    let (unique1, unique2) = ca_unique(h1, h2, ca)?;
    let common = match mode {
        DecompositionMode::Cud => CommonFeatures::Single(mean_grid(&c12, &c21)?),
        DecompositionMode::Mcud => CommonFeatures::Directional(c12, c21),
    };
    Ok(DecomposedFeatures {
        common,
        unique1,
        unique2,
    })
}
