//! Image values, disk IO and token-grid geometry.
//!
//! Images live in memory as `H×W×C` float arrays in `[0, 1]`, channel-last,
//! the same interleaved layout used on disk.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    Rgb,
    Gray,
}

impl std::str::FromStr for ColorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(ColorMode::Rgb),
            "gray" => Ok(ColorMode::Gray),
            other => Err(Error::Param(format!("unknown color mode `{other}`"))),
        }
    }
}

/// A float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    data: Array3<f32>,
}

impl SceneImage {
    /// Wraps an `H×W×C` array, checking the value range and channel count.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let c = data.dim().2;
        contract!(c == 1 || c == 3, "images must have 1 or 3 channels, got {c}");
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Contract(format!(
                "image value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { data })
    }

    /// Wraps an array after clamping every value into `[0, 1]`. Non-finite
    /// values become 0.
    pub fn from_clamped(mut data: Array3<f32>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self::new(data)
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((h, w, c), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn color_mode(&self) -> ColorMode {
        if self.channels() == 1 {
            ColorMode::Gray
        } else {
            ColorMode::Rgb
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// BT.601 luminance in double precision. Gray images are returned as-is.
    pub fn luminance(&self) -> Array2<f64> {
        let (h, w, c) = self.dims();
        if c == 1 {
            return self.data.index_axis(Axis(2), 0).mapv(f64::from);
        }
        Array2::from_shape_fn((h, w), |(y, x)| {
            (0..3)
                .map(|k| LUMA_WEIGHTS[k] * f64::from(self.data[[y, x, k]]))
                .sum()
        })
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        contract!(
            top + h <= self.height() && left + w <= self.width(),
            "crop {h}x{w}@({top},{left}) exceeds {}x{}",
            self.height(),
            self.width()
        );
        Ok(Self {
            data: self.data.slice(s![top..top + h, left..left + w, ..]).to_owned(),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            data: self.data.slice(s![.., ..;-1, ..]).to_owned(),
        }
    }

    pub fn flip_vertical(&self) -> Self {
        Self {
            data: self.data.slice(s![..;-1, .., ..]).to_owned(),
        }
    }

    /// Converts to a `(C, H, W)` tensor.
    pub fn to_chw_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w, c) = self.dims();
        let chw = self.data.view().permuted_axes([2, 0, 1]);
        let flat: Vec<f32> = chw.iter().copied().collect();
        Ok(Tensor::from_vec(flat, (c, h, w), device)?.to_dtype(dtype)?)
    }

    /// Builds an image from a `(C, H, W)` tensor, clamping into `[0, 1]`.
    pub fn from_chw_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let chw = Array3::from_shape_vec((c, h, w), flat)
            .map_err(|e| Error::Contract(e.to_string()))?;
        Self::from_clamped(chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned())
    }
}

/// Stacks same-sized images into a `(B, C, H, W)` tensor.
pub fn stack_images(images: &[&SceneImage], dtype: DType, device: &Device) -> Result<Tensor> {
    contract!(!images.is_empty(), "cannot stack an empty image list");
    let dims = images[0].dims();
    let mut parts = Vec::with_capacity(images.len());
    for img in images {
        contract!(
            img.dims() == dims,
            "stacked images differ in shape: {:?} vs {:?}",
            img.dims(),
            dims
        );
        parts.push(img.to_chw_tensor(dtype, device)?);
    }
    Ok(Tensor::stack(&parts, 0)?)
}

/// Reads an 8- or 16-bit raster image and scales it into `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>, mode: ColorMode) -> Result<SceneImage> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;

    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let rgb: Array3<f32> = match &decoded {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let g = decoded.to_luma8();
            gray_array(h, w, g.as_raw().iter().map(|&v| f32::from(v) / 255.0))
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = decoded.to_rgb8();
            Array3::from_shape_vec(
                (h, w, 3),
                rgb.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect(),
            )
            .expect("rgb8 buffer matches dims")
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let g = decoded.to_luma16();
            gray_array(h, w, g.as_raw().iter().map(|&v| f32::from(v) / 65535.0))
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let rgb = decoded.to_rgb16();
            Array3::from_shape_vec(
                (h, w, 3),
                rgb.as_raw().iter().map(|&v| f32::from(v) / 65535.0).collect(),
            )
            .expect("rgb16 buffer matches dims")
        }
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported pixel type {:?}", other.color()),
            })
        }
    };

    let img = SceneImage::new(rgb)?;
    match (mode, img.channels()) {
        (ColorMode::Gray, 1) => Ok(img),
        (ColorMode::Gray, _) => {
            let y = img.luminance().mapv(|v| v as f32);
            SceneImage::from_clamped(y.insert_axis(Axis(2)))
        }
        (ColorMode::Rgb, 1) => gray_to_3ch(&img),
        (ColorMode::Rgb, _) => Ok(img),
    }
}

fn gray_array(h: usize, w: usize, values: impl Iterator<Item = f32>) -> Array3<f32> {
    Array3::from_shape_vec((h, w, 1), values.collect()).expect("gray buffer matches dims")
}

/// Writes an 8-bit PNG (or any format implied by the extension).
pub fn save_image(img: &SceneImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = img.dims();
    let quantized: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let result = if c == 1 {
        ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, quantized)
            .expect("buffer matches dims")
            .save(path)
    } else {
        ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, quantized)
            .expect("buffer matches dims")
            .save(path)
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Replicates a single-channel image into three identical channels.
pub fn gray_to_3ch(img: &SceneImage) -> Result<SceneImage> {
    contract!(
        img.channels() == 1,
        "gray_to_3ch expects 1 channel, got {}",
        img.channels()
    );
    let g = img.data();
    let (h, w, _) = img.dims();
    Ok(SceneImage {
        data: Array3::from_shape_fn((h, w, 3), |(y, x, _)| g[[y, x, 0]]),
    })
}

/// Returns a 3-channel version of `img`, replicating gray input.
pub fn ensure_rgb(img: &SceneImage) -> Result<SceneImage> {
    if img.channels() == 3 {
        Ok(img.clone())
    } else {
        gray_to_3ch(img)
    }
}

/// Token ↔ pixel bookkeeping for a patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Original (pre-padding) image height.
    pub image_h: usize,
    /// Original (pre-padding) image width.
    pub image_w: usize,
}

impl GridGeometry {
    pub fn for_image(image_h: usize, image_w: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::Param("patch size must be at least 1".into()));
        }
        contract!(image_h > 0 && image_w > 0, "empty image {image_h}x{image_w}");
        Ok(Self {
            patch_size,
            grid_h: image_h.div_ceil(patch_size),
            grid_w: image_w.div_ceil(patch_size),
            image_h,
            image_w,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn padded_h(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn padded_w(&self) -> usize {
        self.grid_w * self.patch_size
    }

    pub fn is_padded(&self) -> bool {
        self.padded_h() != self.image_h || self.padded_w() != self.image_w
    }
}

/// Pads to the next patch multiple by edge replication.
pub fn pad_to_patch(img: &SceneImage, patch_size: usize) -> Result<(SceneImage, GridGeometry)> {
    let geom = GridGeometry::for_image(img.height(), img.width(), patch_size)?;
    if !geom.is_padded() {
        return Ok((img.clone(), geom));
    }
    let (h, w, c) = img.dims();
    let src = img.data();
    let data = Array3::from_shape_fn((geom.padded_h(), geom.padded_w(), c), |(y, x, k)| {
        src[[y.min(h - 1), x.min(w - 1), k]]
    });
    Ok((SceneImage { data }, geom))
}

/// Crops a padded image back to the geometry's original dimensions.
pub fn crop_to_geometry(img: &SceneImage, geom: &GridGeometry) -> Result<SceneImage> {
    img.crop(0, 0, geom.image_h, geom.image_w)
}
