//! Inference: fused images, decomposition visuals and fused-feature export.
//!
//! Only the backbone, the cross attention, the MFM encoder and the projector
//! heads run here; the interpolation layer, the pixel decoder and the frozen
//! encoders stay untouched.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::TokenGrid;
use crate::decomposition::{DecomposedFeatures, DecompositionMode};
use crate::error::{contract, Error, Result};
use crate::imaging::{crop_to_geometry, ensure_rgb, pad_to_patch, GridGeometry, SceneImage};
use crate::model::DeFusionModel;
use crate::nn::bilinear_weights;

pub const FEATURE_MAGIC: &[u8; 8] = b"DFPPFEAT";
pub const FEATURE_VERSION: u32 = 1;
/// Opacity of the heatmap layer in overlays.
pub const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    SingleModal,
    MultiModal,
}

impl FusionMode {
    fn decomposition(self) -> DecompositionMode {
        match self {
            FusionMode::SingleModal => DecompositionMode::Cud,
            FusionMode::MultiModal => DecompositionMode::Mcud,
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_modal" | "single-modal" => Ok(Self::SingleModal),
            "multi" | "multi_modal" | "multi-modal" => Ok(Self::MultiModal),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Two pre-aligned source images.
#[derive(Debug, Clone)]
pub struct FusionRequest {
    pub img1: SceneImage,
    pub img2: SceneImage,
    pub mode: FusionMode,
}

impl FusionRequest {
    /// Replicates gray inputs to three channels and checks equal dims.
    pub fn new(img1: &SceneImage, img2: &SceneImage, mode: FusionMode) -> Result<Self> {
        let img1 = ensure_rgb(img1)?;
        let img2 = ensure_rgb(img2)?;
        contract!(
            img1.dims() == img2.dims(),
            "source images differ in size: {:?} vs {:?}",
            img1.dims(),
            img2.dims()
        );
        Ok(Self { img1, img2, mode })
    }
}

struct Encoded {
    feats: DecomposedFeatures,
    geometry: GridGeometry,
}

fn encode_request(model: &DeFusionModel, req: &FusionRequest) -> Result<Encoded> {
    let p = model.config().patch_size();
    let (a, geometry) = pad_to_patch(&req.img1, p)?;
    let (b, _) = pad_to_patch(&req.img2, p)?;
    let dtype = model.dtype();
    let device = model.device();
    let x1 = a.to_chw_tensor(dtype, device)?.unsqueeze(0)?;
    let x2 = b.to_chw_tensor(dtype, device)?.unsqueeze(0)?;
    let (h1, h2) = model.encode_pair(&x1, &x2, geometry)?;
    let feats = model.decompose(&h1, &h2, req.mode.decomposition())?;
    Ok(Encoded { feats, geometry })
}

fn fused_tokens(model: &DeFusionModel, enc: &Encoded) -> Result<TokenGrid> {
    model.mfm_encode(&enc.feats, None)?.pooled()
}

fn to_image(t: &Tensor, geometry: &GridGeometry) -> Result<SceneImage> {
    crop_to_geometry(&SceneImage::from_chw_tensor(&t.squeeze(0)?)?, geometry)
}

/// Fused image, cropped to the input size and clamped into `[0, 1]`.
pub fn fuse(model: &DeFusionModel, req: &FusionRequest) -> Result<SceneImage> {
    let enc = encode_request(model, req)?;
    let out = model.project_fused(&fused_tokens(model, &enc)?)?;
    to_image(&out, &enc.geometry)
}

/// Heatmaps and projector images of the decomposed components, ordered
/// unique¹, unique², common.
#[derive(Debug, Clone)]
pub struct DecompositionVisual {
    /// Per-token L2 norms on the token grid.
    pub token_norms: [Array2<f64>; 3],
    /// Norms upsampled to pixels and min-max normalised into `[0, 1]`.
    pub heatmaps: [Array2<f64>; 3],
    /// Heatmaps blended onto the sources (unique¹ and common onto `img1`,
    /// unique² onto `img2`).
    pub overlays: [SceneImage; 3],
    /// `PH(f_u1)`, `PH(f_u2)`, `PH(f_c)`.
    pub projections: [SceneImage; 3],
}

impl DecompositionVisual {
    /// File suffixes of the six visuals, overlays first.
    pub const SUFFIXES: [&'static str; 6] = ["fu1", "fu2", "fc", "ph_fu1", "ph_fu2", "ph_fc"];

    pub fn images(&self) -> [&SceneImage; 6] {
        [
            &self.overlays[0],
            &self.overlays[1],
            &self.overlays[2],
            &self.projections[0],
            &self.projections[1],
            &self.projections[2],
        ]
    }
}

/// Per-token L2 norms of a batch-1 grid, shaped `(grid_h, grid_w)`.
pub fn token_norm_map(grid: &TokenGrid) -> Result<Array2<f64>> {
    let g = grid.geometry;
    let norms: Vec<f64> = grid
        .tokens
        .squeeze(0)?
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(1)?
        .sqrt()?
        .to_vec1()?;
    Array2::from_shape_vec((g.grid_h, g.grid_w), norms).map_err(|e| Error::Contract(e.to_string()))
}

/// Bilinear upsampling of a grid map to the padded pixel grid, cropped to
/// the original image size.
pub fn upsample_map(map: &Array2<f64>, geometry: &GridGeometry) -> Array2<f64> {
    let (gh, gw) = map.dim();
    let (ph, pw) = (geometry.padded_h(), geometry.padded_w());
    let wy = bilinear_weights(ph, gh);
    let wx = bilinear_weights(pw, gw);
    Array2::from_shape_fn((geometry.image_h, geometry.image_w), |(y, x)| {
        let mut acc = 0.0;
        for iy in 0..gh {
            let a = wy[y * gh + iy];
            if a == 0.0 {
                continue;
            }
            for ix in 0..gw {
                acc += a * wx[x * gw + ix] * map[[iy, ix]];
            }
        }
        acc
    })
}

/// Min-max normalisation into `[0, 1]`; a flat map becomes all zeros.
pub fn normalize_map(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Blue → green → red colour ramp.
fn heat_color(v: f64) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0) as f32;
    [
        (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0),
    ]
}

pub fn overlay(src: &SceneImage, heat: &Array2<f64>) -> Result<SceneImage> {
    let (h, w, _) = src.dims();
    contract!(heat.dim() == (h, w), "heatmap {:?} does not match image {h}x{w}", heat.dim());
    let s = src.data();
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let base = s[[y, x, c.min(s.dim().2 - 1)]];
        (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * heat_color(heat[[y, x]])[c]
    });
    SceneImage::from_clamped(data)
}

pub fn decompose_visualize(model: &DeFusionModel, req: &FusionRequest) -> Result<DecompositionVisual> {
    let enc = encode_request(model, req)?;
    let fc = enc.feats.fused_common()?;
    let grids = [&enc.feats.unique1, &enc.feats.unique2, &fc];
    let mut token_norms = Vec::with_capacity(3);
    let mut heatmaps = Vec::with_capacity(3);
    for g in grids {
        let n = token_norm_map(g)?;
        heatmaps.push(normalize_map(&upsample_map(&n, &enc.geometry)));
        token_norms.push(n);
    }
    let sources = [&req.img1, &req.img2, &req.img1];
    let overlays = [
        overlay(sources[0], &heatmaps[0])?,
        overlay(sources[1], &heatmaps[1])?,
        overlay(sources[2], &heatmaps[2])?,
    ];
    let projections = [
        to_image(&model.project_unique(grids[0])?, &enc.geometry)?,
        to_image(&model.project_unique(grids[1])?, &enc.geometry)?,
        to_image(&model.project_common(grids[2])?, &enc.geometry)?,
    ];
    let [n0, n1, n2]: [Array2<f64>; 3] = token_norms.try_into().expect("three maps");
    let [h0, h1, h2]: [Array2<f64>; 3] = heatmaps.try_into().expect("three maps");
    Ok(DecompositionVisual {
        token_norms: [n0, n1, n2],
        heatmaps: [h0, h1, h2],
        overlays,
        projections,
    })
}

/// Header of an exported feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub checkpoint_hash: String,
    pub geometry: GridGeometry,
    pub n_tokens: usize,
    pub dim: usize,
}

/// Fused features `f_x` as an `N × d` array with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub header: FeatureHeader,
    pub data: Array2<f32>,
}

impl FeatureFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(24 + header.len() + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Export {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != FEATURE_MAGIC {
            return Err(bad("missing feature-file magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: FeatureHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let raw = &bytes[20 + hlen..];
        if raw.len() != header.n_tokens * header.dim * 4 {
            return Err(bad("payload size disagrees with header"));
        }
        let vals: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let data = Array2::from_shape_vec((header.n_tokens, header.dim), vals).map_err(|e| bad(&e.to_string()))?;
        Ok(Self { header, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let write = || -> std::io::Result<()> {
            let tmp = path.with_extension("tmp");
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::Export {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Fused features of the (padded) pair, labelled with the checkpoint hash.
pub fn export_features(model: &DeFusionModel, req: &FusionRequest, checkpoint_hash: &str) -> Result<FeatureFile> {
    let enc = encode_request(model, req)?;
    let grid = fused_tokens(model, &enc)?;
    let (n, d) = (grid.n_tokens(), grid.dim());
    let vals: Vec<f32> = grid.tokens.squeeze(0)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(FeatureFile {
        header: FeatureHeader {
            checkpoint_hash: checkpoint_hash.to_string(),
            geometry: enc.geometry,
            n_tokens: n,
            dim: d,
        },
        data: Array2::from_shape_vec((n, d), vals).map_err(|e| Error::Contract(e.to_string()))?,
    })
}
