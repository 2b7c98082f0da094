//! Fusion-quality metrics.
//!
//! Every metric works on BT.601 luminance in `f64` with dynamic range 1.0.
//! Windowed operators read outside the image through reflect-101 padding.

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::imaging::SceneImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;
pub const NCIE_MAX_BINS: usize = 256;
pub const MEF_WEIGHT_EXPONENT: i32 = 4;

/// Edge-preservation sigmoid constants `(Γ, κ, σ)` for strength and orientation.
pub const QG: (f64, f64, f64) = (0.9994, -15.0, 0.5);
pub const QA: (f64, f64, f64) = (0.9879, -22.0, 0.8);

/// Maps any integer offset into `[0, n)` by reflecting about the edge
/// pixels without repeating them.
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Same-size separable filtering with reflect-101 borders.
fn filter_separable(img: &ArrayView2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (taps.len() / 2) as isize;
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * img[[y, reflect101(x as isize + k as isize - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * rows[[reflect101(y as isize + k as isize - r, h), x]])
            .sum::<f64>()
    })
}

fn check_dims(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    contract!(a.dim() == b.dim(), "metric inputs differ in size: {:?} vs {:?}", a.dim(), b.dim());
    contract!(a.len() > 0, "metric inputs are empty");
    Ok(())
}

/// Mean windowed SSIM between two luminance planes.
pub fn ssim_luma(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    check_dims(a, b)?;
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = filter_separable(a, &taps);
    let mu_b = filter_separable(b, &taps);
    let aa = filter_separable(&(a * a).view(), &taps);
    let bb = filter_separable(&(b * b).view(), &taps);
    let ab = filter_separable(&(a * b).view(), &taps);
    let mut total = 0.0;
    Zip::from(&mu_a).and(&mu_b).and(&aa).and(&bb).and(&ab).for_each(|&ma, &mb, &saa, &sbb, &sab| {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    });
    Ok(total / a.len() as f64)
}

pub fn ssim(a: &SceneImage, b: &SceneImage) -> Result<f64> {
    ssim_luma(&a.luminance().view(), &b.luminance().view())
}

/// Fusion SSIM: the mean of `SSIM(f, s1)` and `SSIM(f, s2)`.
pub fn ssim_fusion(fused: &SceneImage, s1: &SceneImage, s2: &SceneImage) -> Result<f64> {
    let f = fused.luminance();
    Ok(0.5 * (ssim_luma(&f.view(), &s1.luminance().view())? + ssim_luma(&f.view(), &s2.luminance().view())?))
}

pub fn psnr_luma(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    check_dims(a, b)?;
    let mse = Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y)) / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub fn psnr(a: &SceneImage, b: &SceneImage) -> Result<f64> {
    psnr_luma(&a.luminance().view(), &b.luminance().view())
}

/// Pearson correlation; zero variance in either input yields 0.
pub fn pearson(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    Zip::from(a).and(b).for_each(|&x, &y| {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    });
    if saa == 0.0 || sbb == 0.0 {
        log::warn!("correlation of a constant image is undefined; reporting 0");
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn cc_luma(f: &ArrayView2<f64>, s1: &ArrayView2<f64>, s2: &ArrayView2<f64>) -> Result<f64> {
    Ok(0.5 * (pearson(f, s1)? + pearson(f, s2)?))
}

pub fn cc(fused: &SceneImage, s1: &SceneImage, s2: &SceneImage) -> Result<f64> {
    cc_luma(&fused.luminance().view(), &s1.luminance().view(), &s2.luminance().view())
}

/// Ordinal bin index per pixel (raster order breaks ties) over `bins`
/// equal-population bins.
pub fn rank_bins(a: &ArrayView2<f64>, bins: usize) -> Vec<usize> {
    let values: Vec<f64> = a.iter().copied().collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let n = values.len();
    let mut out = vec![0; n];
    for (rank, &idx) in order.iter().enumerate() {
        out[idx] = rank * bins / n;
    }
    out
}

fn entropy(counts: impl Iterator<Item = usize>, n: usize, base_ln: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n as f64;
            -p * p.ln() / base_ln
        })
        .sum()
}

/// Nonlinear correlation coefficient `H(X) + H(Y) − H(X, Y)` over rank bins,
/// logarithm base `bins`.
pub fn ncc(x: &[usize], y: &[usize], bins: usize) -> f64 {
    let n = x.len();
    let base_ln = (bins as f64).ln();
    let mut hx = vec![0usize; bins];
    let mut hy = vec![0usize; bins];
    let mut joint = vec![0usize; bins * bins];
    for (&i, &j) in x.iter().zip(y) {
        hx[i] += 1;
        hy[j] += 1;
        joint[i * bins + j] += 1;
    }
    entropy(hx.into_iter(), n, base_ln) + entropy(hy.into_iter(), n, base_ln) - entropy(joint.into_iter(), n, base_ln)
}

pub fn ncie_luma(f: &ArrayView2<f64>, s1: &ArrayView2<f64>, s2: &ArrayView2<f64>) -> Result<f64> {
    check_dims(f, s1)?;
    check_dims(f, s2)?;
    let n = f.len();
    let bins = NCIE_MAX_BINS.min(n);
    if bins < 2 {
        return Ok(1.0);
    }
    let q = [rank_bins(s1, bins), rank_bins(s2, bins), rank_bins(f, bins)];
    let mut r = Matrix3::<f64>::identity();
    for i in 0..3 {
        for j in (i + 1)..3 {
            let v = ncc(&q[i], &q[j], bins);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(r).eigenvalues;
    Ok(ncie_from_eigenvalues(eig.as_slice(), bins))
}

/// `1 + Σ (λ/3)·log_b(λ/3)`; non-positive eigenvalues contribute their limit 0.
pub fn ncie_from_eigenvalues(lambdas: &[f64], bins: usize) -> f64 {
    let base_ln = (bins as f64).ln();
    1.0 + lambdas
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| {
            let p = l / 3.0;
            p * p.ln() / base_ln
        })
        .sum::<f64>()
}

pub fn ncie(fused: &SceneImage, s1: &SceneImage, s2: &SceneImage) -> Result<f64> {
    ncie_luma(&fused.luminance().view(), &s1.luminance().view(), &s2.luminance().view())
}

/// Sobel edge strength and orientation `atan(sy/sx)` (π/2 where `sx = 0`).
pub fn sobel(a: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = a.dim();
    let at = |y: isize, x: isize| a[[reflect101(y, h), reflect101(x, w)]];
    let mut g = Array2::zeros((h, w));
    let mut o = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let sx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let sy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let idx = [y as usize, x as usize];
            g[idx] = (sx * sx + sy * sy).sqrt();
            o[idx] = if sx == 0.0 {
                std::f64::consts::FRAC_PI_2
            } else {
                (sy / sx).atan()
            };
        }
    }
    (g, o)
}

fn sigmoid_q((gamma, kappa, sigma): (f64, f64, f64), v: f64) -> f64 {
    gamma / (1.0 + (kappa * (v - sigma)).exp())
}

/// Edge-information preservation `Q^{SF}` at one pixel.
pub fn edge_preservation(gs: f64, os: f64, gf: f64, of: f64) -> f64 {
    let strength = if gs == gf {
        1.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let orient = 1.0 - (os - of).abs() / std::f64::consts::FRAC_PI_2;
    sigmoid_q(QG, strength) * sigmoid_q(QA, orient)
}

/// Fusion-artifact measure: edge-preservation loss at pixels where the fused
/// gradient exceeds both sources, weighted by source edge strength and
/// normalised by total source edge strength. Lower is better.
pub fn nabf_luma(f: &ArrayView2<f64>, s1: &ArrayView2<f64>, s2: &ArrayView2<f64>) -> Result<f64> {
    check_dims(f, s1)?;
    check_dims(f, s2)?;
    let (ga, oa) = sobel(s1);
    let (gb, ob) = sobel(s2);
    let (gf, of) = sobel(f);
    let mut num = 0.0;
    let mut den = 0.0;
    for (idx, &g) in gf.indexed_iter() {
        den += ga[idx] + gb[idx];
        if g > ga[idx] && g > gb[idx] {
            let qa = edge_preservation(ga[idx], oa[idx], g, of[idx]);
            let qb = edge_preservation(gb[idx], ob[idx], g, of[idx]);
            num += (1.0 - qa) * ga[idx] + (1.0 - qb) * gb[idx];
        }
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

pub fn nabf(fused: &SceneImage, s1: &SceneImage, s2: &SceneImage) -> Result<f64> {
    nabf_luma(&fused.luminance().view(), &s1.luminance().view(), &s2.luminance().view())
}

/// Multi-exposure structural similarity against the stack's ideal patch.
///
/// Per window the ideal patch takes the strongest contrast in the stack and
/// a contrast-weighted (`c⁴`) mean structure; it is compared with the fused
/// patch through the SSIM contrast/structure term. Mean-pooled.
pub fn mef_ssim_luma(f: &ArrayView2<f64>, stack: &[ArrayView2<f64>]) -> Result<f64> {
    contract!(stack.len() >= 2, "exposure stack needs at least 2 images, got {}", stack.len());
    for s in stack {
        check_dims(f, s)?;
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let k = stack.len();
    let mu: Vec<Array2<f64>> = stack.iter().map(|s| filter_separable(s, &taps)).collect();
    let mu_f = filter_separable(f, &taps);
    let var_f = &filter_separable(&(f * f).view(), &taps) - &(&mu_f * &mu_f);
    let mut cov = vec![vec![Array2::<f64>::zeros(f.dim()); k]; k];
    for i in 0..k {
        for j in i..k {
            let c = &filter_separable(&(&stack[i] * &stack[j]).view(), &taps) - &(&mu[i] * &mu[j]);
            cov[j][i] = c.clone();
            cov[i][j] = c;
        }
    }
    let cross: Vec<Array2<f64>> = (0..k)
        .map(|i| &filter_separable(&(&stack[i] * f).view(), &taps) - &(&mu[i] * &mu_f))
        .collect();
    let mut total = 0.0;
    for (idx, &vf) in var_f.indexed_iter() {
        let c: Vec<f64> = (0..k).map(|i| cov[i][i][idx].max(0.0).sqrt()).collect();
        let c_hat = c.iter().copied().fold(0.0, f64::max);
        let wts: Vec<f64> = c.iter().map(|&ci| ci.powi(MEF_WEIGHT_EXPONENT)).collect();
        let wsum: f64 = wts.iter().sum();
        let score = if c_hat == 0.0 || wsum == 0.0 {
            SSIM_C2 / (vf.max(0.0) + SSIM_C2)
        } else {
            let coef: Vec<f64> = (0..k)
                .map(|i| if c[i] > 0.0 { wts[i] / (wsum * c[i]) } else { 0.0 })
                .collect();
            let mut s_norm2 = 0.0;
            for i in 0..k {
                for j in 0..k {
                    s_norm2 += coef[i] * coef[j] * cov[i][j][idx];
                }
            }
            let s_cov: f64 = (0..k).map(|i| coef[i] * cross[i][idx]).sum();
            let cov_xf = if s_norm2 > 0.0 { c_hat * s_cov / s_norm2.sqrt() } else { 0.0 };
            (2.0 * cov_xf + SSIM_C2) / (c_hat * c_hat + vf.max(0.0) + SSIM_C2)
        };
        total += score;
    }
    Ok(total / f.len() as f64)
}

pub fn mef_ssim(fused: &SceneImage, stack: &[&SceneImage]) -> Result<f64> {
    let lum: Vec<Array2<f64>> = stack.iter().map(|s| s.luminance()).collect();
    let views: Vec<ArrayView2<f64>> = lum.iter().map(|l| l.view()).collect();
    mef_ssim_luma(&fused.luminance().view(), &views)
}

/// Fusion task, which selects the metric set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mef,
    Mff,
    Ivf,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mef" => Ok(Task::Mef),
            "mff" => Ok(Task::Mff),
            "ivf" => Ok(Task::Ivf),
            other => Err(Error::Config(format!("unknown task `{other}` (expected mef, mff or ivf)"))),
        }
    }
}

impl Task {
    /// Source-folder names of the two inputs.
    pub fn source_dirs(&self) -> (&'static str, &'static str) {
        match self {
            Task::Mef => ("under", "over"),
            Task::Mff => ("near", "far"),
            Task::Ivf => ("vis", "ir"),
        }
    }

    /// Column names in evaluation order; `with_gt` only affects MFF.
    pub fn columns(&self, with_gt: bool) -> Vec<&'static str> {
        match self {
            Task::Mef => vec!["ncie", "nabf", "ssim", "cc", "mef_ssim"],
            Task::Mff if with_gt => vec!["ncie", "nabf", "ssim", "cc", "psnr", "psnr_gt", "ssim_gt"],
            Task::Mff => vec!["ncie", "nabf", "ssim", "cc", "psnr"],
            Task::Ivf => vec!["nabf", "ssim", "cc"],
        }
    }
}

/// Whether a larger value of metric `name` is better.
pub fn higher_is_better(name: &str) -> bool {
    name != "nabf"
}

/// Scores one fused image against its sources (and optional ground truth).
pub fn evaluate(
    task: Task,
    fused: &SceneImage,
    s1: &SceneImage,
    s2: &SceneImage,
    gt: Option<&SceneImage>,
) -> Result<BTreeMap<String, f64>> {
    let f = fused.luminance();
    let a = s1.luminance();
    let b = s2.luminance();
    let g = gt.map(|g| g.luminance());
    let (fv, av, bv) = (f.view(), a.view(), b.view());
    let mut out = BTreeMap::new();
    for col in task.columns(g.is_some()) {
        let v = match col {
            "ncie" => ncie_luma(&fv, &av, &bv)?,
            "nabf" => nabf_luma(&fv, &av, &bv)?,
            "ssim" => 0.5 * (ssim_luma(&fv, &av)? + ssim_luma(&fv, &bv)?),
            "cc" => cc_luma(&fv, &av, &bv)?,
            "mef_ssim" => mef_ssim_luma(&fv, &[av, bv])?,
            "psnr" => 0.5 * (psnr_luma(&fv, &av)? + psnr_luma(&fv, &bv)?),
            "psnr_gt" => psnr_luma(&fv, &g.as_ref().expect("gt present").view())?,
            "ssim_gt" => ssim_luma(&fv, &g.as_ref().expect("gt present").view())?,
            _ => unreachable!("unknown column"),
        };
        out.insert(col.to_string(), v);
    }
    Ok(out)
}

/// Per-image scores, their means over successful rows, and the
/// direction of each metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<(String, Option<BTreeMap<String, f64>>)>,
    pub means: BTreeMap<String, f64>,
    pub higher_is_better: BTreeMap<String, bool>,
}

impl MetricReport {
    /// Aggregates rows; failed rows (`None`) are excluded from the means.
    pub fn from_rows(columns: &[&str], rows: Vec<(String, Option<BTreeMap<String, f64>>)>) -> Self {
        let ok: Vec<&BTreeMap<String, f64>> = rows.iter().filter_map(|(_, r)| r.as_ref()).collect();
        let mut means = BTreeMap::new();
        if !ok.is_empty() {
            for &c in columns {
                means.insert(c.to_string(), ok.iter().map(|r| r[c]).sum::<f64>() / ok.len() as f64);
            }
        }
        let higher_is_better = columns.iter().map(|c| (c.to_string(), higher_is_better(c))).collect();
        Self {
            rows,
            means,
            higher_is_better,
        }
    }
}
