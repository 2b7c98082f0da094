//! Masked degradation of a clean scene into two partial views, and the
//! pixel-intersection targets that supervise the common/unique heads.
//!
//! Each view keeps the scene where its mask is set and shows independent
//! mid-gray Gaussian noise elsewhere. Every pixel is kept by at least one
//! view, so the pair jointly covers the whole scene.

use ndarray::{concatenate, Array2, Array3, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Error, Result};
use crate::imaging::SceneImage;

pub const DEFAULT_NOISE_SIGMA: f32 = 0.25;
pub const DEFAULT_COVER_FRAC: f64 = 0.75;
pub const NOISE_MEAN: f32 = 0.5;

/// Two `{0,1}` masks with `m1 + m2 >= 1` at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub m1: Array2<u8>,
    pub m2: Array2<u8>,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl MaskPair {
    /// Builds a pair from explicit masks, checking the joint-coverage constraint.
    pub fn from_masks(m1: Array2<u8>, m2: Array2<u8>, noise_sigma: f32, seed: u64) -> Result<Self> {
        contract!(m1.dim() == m2.dim(), "mask dims differ: {:?} vs {:?}", m1.dim(), m2.dim());
        contract!(
            m1.iter().chain(m2.iter()).all(|&v| v <= 1),
            "masks must be 0/1 valued"
        );
        contract!(
            m1.iter().zip(m2.iter()).all(|(&a, &b)| a + b >= 1),
            "masks leave pixels uncovered"
        );
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Param(format!("noise sigma {noise_sigma} must be >= 0")));
        }
        Ok(Self { m1, m2, noise_sigma, seed })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.m1.dim()
    }

    pub fn with_noise_sigma(mut self, sigma: f32) -> Self {
        self.noise_sigma = sigma;
        self
    }

    /// Fraction of pixels kept by the first mask.
    pub fn coverage1(&self) -> f64 {
        self.m1.iter().map(|&v| v as f64).sum::<f64>() / self.m1.len() as f64
    }

    pub fn coverage2(&self) -> f64 {
        self.m2.iter().map(|&v| v as f64).sum::<f64>() / self.m2.len() as f64
    }

    /// `m1 ∧ ¬m2`, the region only the first view sees.
    pub fn exclusive1(&self) -> Array2<u8> {
        ndarray::Zip::from(&self.m1)
            .and(&self.m2)
            .map_collect(|&a, &b| a & (1 - b))
    }

    pub fn exclusive2(&self) -> Array2<u8> {
        ndarray::Zip::from(&self.m1)
            .and(&self.m2)
            .map_collect(|&a, &b| (1 - a) & b)
    }

    pub fn intersection(&self) -> Array2<u8> {
        ndarray::Zip::from(&self.m1).and(&self.m2).map_collect(|&a, &b| a & b)
    }
}

/// Samples a patch-aligned mask pair.
///
/// Each mask keeps `round(cover_frac · cells)` grid cells of `patch×patch`
/// pixels. `m1` is drawn uniformly; `m2` is forced on every cell `m1` drops
/// and then takes the remaining quota uniformly from `m1`'s cells. Below full
/// coverage the quota is clamped so that the intersection and both exclusive
/// regions are non-empty.
pub fn sample_mask_pair(h: usize, w: usize, patch: usize, cover_frac: f64, seed: u64) -> Result<MaskPair> {
    if patch == 0 {
        return Err(Error::Param("mask patch must be at least 1".into()));
    }
    if !(0.5..=1.0).contains(&cover_frac) {
        return Err(Error::Param(format!(
            "cover_frac {cover_frac} must lie in [0.5, 1]; joint coverage is infeasible below 0.5"
        )));
    }
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Param(format!(
            "mask dims {h}x{w} are not multiples of patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let cells = gh * gw;
    contract!(cells > 0, "empty mask grid");

    let mut keep = (cover_frac * cells as f64).round() as usize;
    if cover_frac < 1.0 && cells >= 3 {
        keep = keep.clamp(cells / 2 + 1, cells - 1);
    } else {
        keep = keep.clamp(cells.div_ceil(2), cells);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cell1 = vec![0u8; cells];
    for i in sample(&mut rng, cells, keep) {
        cell1[i] = 1;
    }
    let mut cell2: Vec<u8> = cell1.iter().map(|&v| 1 - v).collect();
    let forced = cells - keep;
    let extra = keep - forced;
    let inside: Vec<usize> = (0..cells).filter(|&i| cell1[i] == 1).collect();
    for j in sample(&mut rng, inside.len(), extra) {
        cell2[inside[j]] = 1;
    }

    let expand = |cells: &[u8]| Array2::from_shape_fn((h, w), |(y, x)| cells[(y / patch) * gw + x / patch]);
    MaskPair::from_masks(expand(&cell1), expand(&cell2), DEFAULT_NOISE_SIGMA, seed)
}

/// The two degraded views of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradedPair {
    pub x1: SceneImage,
    pub x2: SceneImage,
    pub masks: MaskPair,
    pub original: SceneImage,
}

/// Applies `x_i = M_i ⊙ x + (1 − M_i) ⊙ n_i` with independent noise per view.
pub fn apply_degradation(x: &SceneImage, masks: &MaskPair) -> Result<DegradedPair> {
    let (h, w, c) = x.dims();
    contract!(
        masks.dim() == (h, w),
        "mask dims {:?} do not match image {h}x{w}",
        masks.dim()
    );
    let noise = |stream: u64| -> Result<Array3<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(masks.seed);
        rng.set_stream(stream);
        if masks.noise_sigma == 0.0 {
            return Ok(Array3::from_elem((h, w, c), NOISE_MEAN));
        }
        let dist = Normal::new(NOISE_MEAN, masks.noise_sigma)
            .map_err(|e| Error::Param(e.to_string()))?;
        Ok(Array3::from_shape_simple_fn((h, w, c), || {
            dist.sample(&mut rng).clamp(0.0, 1.0)
        }))
    };
    let view = |mask: &Array2<u8>, n: Array3<f32>| -> Result<SceneImage> {
        let src = x.data();
        let data = Array3::from_shape_fn((h, w, c), |(y, xx, k)| {
            if mask[[y, xx]] == 1 {
                src[[y, xx, k]]
            } else {
                n[[y, xx, k]]
            }
        });
        SceneImage::new(data)
    };
    Ok(DegradedPair {
        x1: view(&masks.m1, noise(1)?)?,
        x2: view(&masks.m2, noise(2)?)?,
        masks: masks.clone(),
        original: x.clone(),
    })
}

/// Pixel-intersection supervision for the common and unique heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionTargets {
    pub common_gt: SceneImage,
    pub unique1_gt: SceneImage,
    pub unique2_gt: SceneImage,
}

/// `common = (m1∧m2)⊙x`, `unique1 = (m1∧¬m2)⊙x`, `unique2 = (¬m1∧m2)⊙x`.
pub fn decomposition_targets(pair: &DegradedPair) -> Result<DecompositionTargets> {
    let x = pair.original.data();
    let (h, w, c) = pair.original.dims();
    contract!(pair.masks.dim() == (h, w), "mask/image dims disagree");
    let masked = |region: Array2<u8>| -> Result<SceneImage> {
        SceneImage::new(Array3::from_shape_fn((h, w, c), |(y, xx, k)| {
            f32::from(region[[y, xx]]) * x[[y, xx, k]]
        }))
    };
    Ok(DecompositionTargets {
        common_gt: masked(pair.masks.intersection())?,
        unique1_gt: masked(pair.masks.exclusive1())?,
        unique2_gt: masked(pair.masks.exclusive2())?,
    })
}

/// Side-by-side debug sheet: `x1 | x2 | common | unique1 | unique2`.
pub fn contact_sheet(pair: &DegradedPair, targets: &DecompositionTargets) -> Result<SceneImage> {
    let views = [
        pair.x1.view(),
        pair.x2.view(),
        targets.common_gt.view(),
        targets.unique1_gt.view(),
        targets.unique2_gt.view(),
    ];
    let sheet = concatenate(Axis(1), &views).map_err(|e| Error::Contract(e.to_string()))?;
    SceneImage::new(sheet)
}
