//! Training objectives and the regime-switched total.
//!
//! All reductions are means. The pixel terms (decomposition and masked
//! feature reconstruction) are mean absolute error; the consistency and
//! latent-distillation terms default to mean squared error.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenGrid;
use crate::error::{contract, Error, Result};
use crate::nn::scalar;

pub const DEFAULT_ALPHA: f64 = 0.1;

pub const S_CUD_COMMON: &str = "s_cud_common";
pub const S_CUD_UNIQUE1: &str = "s_cud_unique1";
pub const S_CUD_UNIQUE2: &str = "s_cud_unique2";
pub const S_CUD_RECON: &str = "s_cud_recon";
pub const M_COM: &str = "m_com";
pub const M_UNI: &str = "m_uni";
pub const MFM: &str = "mfm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SingleModal,
    MultiModal,
}

/// Reduction used by the feature-space losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureNorm {
    #[default]
    MeanSquared,
    MeanAbsolute,
}

pub fn mean_abs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    contract!(a.dims() == b.dims(), "L1 operands differ: {:?} vs {:?}", a.dims(), b.dims());
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn mean_sq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    contract!(a.dims() == b.dims(), "L2 operands differ: {:?} vs {:?}", a.dims(), b.dims());
    Ok((a - b)?.sqr()?.mean_all()?)
}

fn feature_distance(a: &Tensor, b: &Tensor, norm: FeatureNorm) -> Result<Tensor> {
    match norm {
        FeatureNorm::MeanSquared => mean_sq(a, b),
        FeatureNorm::MeanAbsolute => mean_abs(a, b),
    }
}

/// Projector outputs for one single-modal batch, all `(B, 3, H, W)`.
pub struct CudPredictions<'a> {
    pub common: &'a Tensor,
    pub unique1: &'a Tensor,
    pub unique2: &'a Tensor,
    pub reconstruction: &'a Tensor,
}

/// Matching supervision, all `(B, 3, H, W)`.
pub struct CudTargets<'a> {
    pub common: &'a Tensor,
    pub unique1: &'a Tensor,
    pub unique2: &'a Tensor,
    pub clean: &'a Tensor,
}

/// The four decomposition terms, as differentiable scalars, in the order
/// common, unique¹, unique², reconstruction.
pub fn loss_s_cud(preds: &CudPredictions, targets: &CudTargets) -> Result<[(&'static str, Tensor); 4]> {
    Ok([
        (S_CUD_COMMON, mean_abs(preds.common, targets.common)?),
        (S_CUD_UNIQUE1, mean_abs(preds.unique1, targets.unique1)?),
        (S_CUD_UNIQUE2, mean_abs(preds.unique2, targets.unique2)?),
        (S_CUD_RECON, mean_abs(preds.reconstruction, targets.clean)?),
    ])
}

/// Consistency between the two directional commons.
pub fn loss_m_com(c12: &TokenGrid, c21: &TokenGrid, norm: FeatureNorm) -> Result<Tensor> {
    contract!(c12.same_shape(c21), "directional commons differ in shape");
    feature_distance(&c12.tokens, &c21.tokens, norm)
}

/// Latent distillation against the frozen encoders' outputs.
pub fn loss_m_uni(
    lat1: &TokenGrid,
    lat2: &TokenGrid,
    ref1: &TokenGrid,
    ref2: &TokenGrid,
    norm: FeatureNorm,
) -> Result<Tensor> {
    for (l, r) in [(lat1, ref1), (lat2, ref2)] {
        if l.dim() != r.dim() {
            return Err(Error::Config(format!(
                "latent projector emits dim {} but the frozen encoder emits {}",
                l.dim(),
                r.dim()
            )));
        }
        contract!(l.same_shape(r), "latent/reference grids differ in shape");
    }
    let a = feature_distance(&lat1.tokens, &ref1.tokens.detach(), norm)?;
    let b = feature_distance(&lat2.tokens, &ref2.tokens.detach(), norm)?;
    Ok((a + b)?)
}

/// Reconstruction of the clean scene from masked features.
pub fn loss_mfm(decoded: &Tensor, clean: &Tensor) -> Result<Tensor> {
    mean_abs(decoded, clean)
}

/// Per-step loss breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub regime: Regime,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss report serialises")
    }

    pub fn component_names(&self) -> Vec<&str> {
        self.components.keys().map(String::as_str).collect()
    }
}

/// Combines differentiable components into the regime's total.
///
/// Single-modal: the four decomposition terms plus `α·mfm` (the `mfm` entry
/// may be absent, which is the same as `α = 0`). Multi-modal: `m_com + m_uni`.
pub fn loss_total(regime: Regime, components: &[(&str, Tensor)], alpha: f64) -> Result<Tensor> {
    let names: Vec<&str> = components.iter().map(|(n, _)| *n).collect();
    let allowed: &[&str] = match regime {
        Regime::SingleModal => &[S_CUD_COMMON, S_CUD_UNIQUE1, S_CUD_UNIQUE2, S_CUD_RECON, MFM],
        Regime::MultiModal => &[M_COM, M_UNI],
    };
    let required: &[&str] = match regime {
        Regime::SingleModal => &[S_CUD_COMMON, S_CUD_UNIQUE1, S_CUD_UNIQUE2, S_CUD_RECON],
        Regime::MultiModal => &[M_COM, M_UNI],
    };
    contract!(
        names.iter().all(|n| allowed.contains(n)) && required.iter().all(|r| names.contains(r)),
        "components {names:?} do not match regime {regime:?}"
    );
    let mut total: Option<Tensor> = None;
    for (name, t) in components {
        let term = if *name == MFM { (t * alpha)? } else { t.clone() };
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    Ok(total.expect("required components present"))
}

/// Reads component values and the total into a report.
pub fn report(step: u64, regime: Regime, components: &[(&str, Tensor)], total: &Tensor) -> Result<LossReport> {
    let mut map = BTreeMap::new();
    for (name, t) in components {
        let v = scalar(t)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.to_string(),
                step,
            });
        }
        map.insert(name.to_string(), v);
    }
    let total = scalar(total)?;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            component: "total".into(),
            step,
        });
    }
    Ok(LossReport {
        step,
        regime,
        total,
        components: map,
    })
}

/// Recomputes a report's total from its components.
pub fn combine_values(regime: Regime, components: &BTreeMap<String, f64>, alpha: f64) -> f64 {
    components
        .iter()
        .filter(|(k, _)| match regime {
            Regime::SingleModal => k.as_str() != M_COM && k.as_str() != M_UNI,
            Regime::MultiModal => k.as_str() == M_COM || k.as_str() == M_UNI,
        })
        .map(|(k, v)| if k == MFM { alpha * v } else { *v })
        .sum()
}
