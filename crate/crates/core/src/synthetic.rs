//! Procedural scenes for smoke tests and desk experiments.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::SceneImage;

/// A scene of a smooth colour gradient, a few filled discs and rectangles,
/// and a sinusoidal texture band.
pub fn scene(h: usize, w: usize, seed: u64) -> Result<SceneImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [[f32; 3]; 2] = [
        [rng.random(), rng.random(), rng.random()],
        [rng.random(), rng.random(), rng.random()],
    ];
    let mut data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let t = (y as f32 / h.max(1) as f32 + x as f32 / w.max(1) as f32) * 0.5;
        base[0][c] * (1.0 - t) + base[1][c] * t
    });
    let shapes = rng.random_range(2..=4);
    for _ in 0..shapes {
        let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let r = rng.random_range(0.1..0.3) * h.min(w) as f32;
        let disc = rng.random_bool(0.5);
        for ((y, x, c), v) in data.indexed_iter_mut() {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            let inside = if disc {
                dy * dy + dx * dx <= r * r
            } else {
                dy.abs() <= r && dx.abs() <= r * 0.6
            };
            if inside {
                *v = color[c];
            }
        }
    }
    let freq = rng.random_range(0.2..0.6);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let band_top = rng.random_range(0..h.max(2) / 2);
    let band_h = (h / 4).max(1);
    for ((y, x, _), v) in data.indexed_iter_mut() {
        if y >= band_top && y < band_top + band_h {
            *v = 0.5 * *v + 0.25 * (1.0 + (freq * x as f32 + phase).sin());
        }
    }
    SceneImage::from_clamped(data)
}

/// `count` scenes with consecutive seeds starting at `seed`.
pub fn corpus(count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<SceneImage>> {
    (0..count as u64).map(|i| scene(h, w, seed.wrapping_add(i))).collect()
}

/// An aligned visible/infrared-like pair: the visible view is the scene, the
/// infrared view is a single-channel "thermal" rendering with hot blobs that
/// are absent from the visible view.
pub fn modal_pair(h: usize, w: usize, seed: u64) -> Result<(SceneImage, SceneImage)> {
    let vis = scene(h, w, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let lum = vis.luminance();
    let mut thermal = lum.mapv(|v| (0.3 + 0.4 * (1.0 - v)) as f32);
    for _ in 0..rng.random_range(1..=3) {
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let r = rng.random_range(0.08..0.2) * h.min(w) as f32;
        for ((y, x), v) in thermal.indexed_iter_mut() {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            *v += 0.6 * (-d2 / (2.0 * r * r)).exp();
        }
    }
    let ir = SceneImage::from_clamped(Array3::from_shape_fn((h, w, 3), |(y, x, _)| thermal[[y, x]]))?;
    Ok((vis, ir))
}

/// Two differently exposed renderings of one scene.
pub fn exposure_pair(h: usize, w: usize, seed: u64) -> Result<(SceneImage, SceneImage)> {
    let s = scene(h, w, seed)?;
    let under = SceneImage::from_clamped(s.data().mapv(|v| v.powf(2.2) * 0.6))?;
    let over = SceneImage::from_clamped(s.data().mapv(|v| v.powf(0.45) * 1.4))?;
    Ok((under, over))
}

/// A near/far focus pair and its all-in-focus scene: `near` is sharp on the
/// left half only, `far` on the right half only.
pub fn focus_pair(h: usize, w: usize, seed: u64) -> Result<(SceneImage, SceneImage, SceneImage)> {
    let s = scene(h, w, seed)?;
    let blurred = box_blur(s.data(), 2);
    let split = w / 2;
    let pick = |sharp_left: bool| {
        SceneImage::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            if (x < split) == sharp_left {
                s.data()[[y, x, c]]
            } else {
                blurred[[y, x, c]]
            }
        }))
    };
    Ok((pick(true)?, pick(false)?, s))
}

/// Separable box blur of radius `r` with clamped borders.
fn box_blur(src: &Array3<f32>, r: usize) -> Array3<f32> {
    let (h, w, c) = src.dim();
    let r = r as isize;
    let norm = (2 * r + 1) as f32;
    let horiz = Array3::from_shape_fn((h, w, c), |(y, x, k)| {
        (-r..=r)
            .map(|d| src[[y, (x as isize + d).clamp(0, w as isize - 1) as usize, k]])
            .sum::<f32>()
            / norm
    });
    Array3::from_shape_fn((h, w, c), |(y, x, k)| {
        (-r..=r)
            .map(|d| horiz[[(y as isize + d).clamp(0, h as isize - 1) as usize, x, k]])
            .sum::<f32>()
            / norm
    })
}
