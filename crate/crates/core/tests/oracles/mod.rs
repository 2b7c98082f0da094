//! Direct-definition reference implementations: plain loops, no shared code
//! with the library.

#![allow(dead_code)]

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::Array2;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 1e-4;
pub const C2: f64 = 9e-4;

/// Mirror index into `[0, n)` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Normalised 2-D Gaussian window.
pub fn window() -> Vec<Vec<f64>> {
    let c = (WINDOW as f64 - 1.0) / 2.0;
    let mut w = vec![vec![0.0; WINDOW]; WINDOW];
    let mut total = 0.0;
    for (u, row) in w.iter_mut().enumerate() {
        for (v, cell) in row.iter_mut().enumerate() {
            let d2 = (u as f64 - c).powi(2) + (v as f64 - c).powi(2);
            *cell = (-d2 / (2.0 * SIGMA * SIGMA)).exp();
            total += *cell;
        }
    }
    for row in &mut w {
        for cell in row {
            *cell /= total;
        }
    }
    w
}

/// Weighted window samples centred on `(y, x)`.
fn patch(a: &Array2<f64>, y: usize, x: usize) -> Vec<f64> {
    let (h, wd) = a.dim();
    let r = (WINDOW / 2) as isize;
    let mut out = Vec::with_capacity(WINDOW * WINDOW);
    for dy in -r..=r {
        for dx in -r..=r {
            out.push(a[[reflect(y as isize + dy, h), reflect(x as isize + dx, wd)]]);
        }
    }
    out
}

fn flat_window() -> Vec<f64> {
    window().into_iter().flatten().collect()
}

fn wmean(w: &[f64], p: &[f64]) -> f64 {
    w.iter().zip(p).map(|(a, b)| a * b).sum()
}

fn wcov(w: &[f64], p: &[f64], mp: f64, q: &[f64], mq: f64) -> f64 {
    w.iter().zip(p.iter().zip(q)).map(|(wi, (a, b))| wi * (a - mp) * (b - mq)).sum()
}

pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let w = flat_window();
    let (h, wd) = a.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..wd {
            let pa = patch(a, y, x);
            let pb = patch(b, y, x);
            let (ma, mb) = (wmean(&w, &pa), wmean(&w, &pb));
            let va = wcov(&w, &pa, ma, &pa, ma);
            let vb = wcov(&w, &pb, mb, &pb, mb);
            let cab = wcov(&w, &pa, ma, &pb, mb);
            total += (2.0 * ma * mb + C1) * (2.0 * cab + C2) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    }
    total / (h * wd) as f64
}

pub fn psnr(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    let mse: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

pub fn pearson(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

pub fn cc(f: &Array2<f64>, s1: &Array2<f64>, s2: &Array2<f64>) -> f64 {
    (pearson(f, s1) + pearson(f, s2)) / 2.0
}

fn ranks(a: &Array2<f64>, bins: usize) -> Vec<usize> {
    let v: Vec<f64> = a.iter().copied().collect();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap().then(i.cmp(&j)));
    let mut out = vec![0; v.len()];
    for (r, i) in idx.into_iter().enumerate() {
        out[i] = r * bins / v.len();
    }
    out
}

fn entropy_of<K: std::hash::Hash + Eq>(keys: impl Iterator<Item = K>, n: usize, bins: usize) -> f64 {
    let mut counts: HashMap<K, usize> = HashMap::new();
    for k in keys {
        *counts.entry(k).or_default() += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log(bins as f64)
        })
        .sum()
}

fn ncc(x: &[usize], y: &[usize], bins: usize) -> f64 {
    let n = x.len();
    entropy_of(x.iter().copied(), n, bins) + entropy_of(y.iter().copied(), n, bins)
        - entropy_of(x.iter().copied().zip(y.iter().copied()), n, bins)
}

/// Eigenvalues of a symmetric 3×3 matrix by the trigonometric closed form.
pub fn sym3_eigenvalues(m: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
    if p1 == 0.0 {
        return [m[0][0], m[1][1], m[2][2]];
    }
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = m;
    for (i, row) in b.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (m[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

pub fn ncie(f: &Array2<f64>, s1: &Array2<f64>, s2: &Array2<f64>) -> f64 {
    let bins = 256.min(f.len());
    let q = [ranks(s1, bins), ranks(s2, bins), ranks(f, bins)];
    let mut r = [[1.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                r[i][j] = ncc(&q[i], &q[j], bins);
            }
        }
    }
    let mut out = 1.0;
    for l in sym3_eigenvalues(r) {
        if l > 0.0 {
            out += (l / 3.0) * (l / 3.0).log(bins as f64);
        }
    }
    out
}

fn sobel_at(a: &Array2<f64>, y: usize, x: usize) -> (f64, f64) {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let (h, w) = a.dim();
    let (mut sx, mut sy) = (0.0, 0.0);
    for dy in 0..3 {
        for dx in 0..3 {
            let v = a[[reflect(y as isize + dy as isize - 1, h), reflect(x as isize + dx as isize - 1, w)]];
            sx += KX[dy][dx] * v;
            sy += KY[dy][dx] * v;
        }
    }
    let g = (sx * sx + sy * sy).sqrt();
    let o = if sx == 0.0 { FRAC_PI_2 } else { (sy / sx).atan() };
    (g, o)
}

fn preservation(gs: f64, os: f64, gf: f64, of: f64) -> f64 {
    let g = if gs == gf { 1.0 } else { gs.min(gf) / gs.max(gf) };
    let a = 1.0 - (os - of).abs() / FRAC_PI_2;
    let qg = 0.9994 / (1.0 + (-15.0 * (g - 0.5)).exp());
    let qa = 0.9879 / (1.0 + (-22.0 * (a - 0.8)).exp());
    qg * qa
}

pub fn nabf(f: &Array2<f64>, s1: &Array2<f64>, s2: &Array2<f64>) -> f64 {
    let (h, w) = f.dim();
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (ga, oa) = sobel_at(s1, y, x);
            let (gb, ob) = sobel_at(s2, y, x);
            let (gf, of) = sobel_at(f, y, x);
            den += ga + gb;
            if gf > ga && gf > gb {
                num += (1.0 - preservation(ga, oa, gf, of)) * ga + (1.0 - preservation(gb, ob, gf, of)) * gb;
            }
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn mef_ssim(f: &Array2<f64>, stack: &[Array2<f64>]) -> f64 {
    let w = flat_window();
    let (h, wd) = f.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..wd {
            let pf = patch(f, y, x);
            let mf = wmean(&w, &pf);
            let ft: Vec<f64> = pf.iter().map(|v| v - mf).collect();
            let var_f: f64 = w.iter().zip(&ft).map(|(a, b)| a * b * b).sum();
            let mut contrasts = Vec::new();
            let mut structures = Vec::new();
            for s in stack {
                let p = patch(s, y, x);
                let m = wmean(&w, &p);
                let t: Vec<f64> = p.iter().map(|v| v - m).collect();
                let c = w.iter().zip(&t).map(|(a, b)| a * b * b).sum::<f64>().sqrt();
                structures.push(if c > 0.0 { t.iter().map(|v| v / c).collect() } else { vec![0.0; t.len()] });
                contrasts.push(c);
            }
            let c_hat = contrasts.iter().copied().fold(0.0, f64::max);
            let weights: Vec<f64> = contrasts.iter().map(|c| c.powi(4)).collect();
            let wsum: f64 = weights.iter().sum();
            if c_hat == 0.0 || wsum == 0.0 {
                total += C2 / (var_f + C2);
                continue;
            }
            let mut s_bar = vec![0.0; w.len()];
            for (s, wk) in structures.iter().zip(&weights) {
                for (acc, v) in s_bar.iter_mut().zip(s) {
                    *acc += wk * v / wsum;
                }
            }
            let norm = w.iter().zip(&s_bar).map(|(a, b)| a * b * b).sum::<f64>().sqrt();
            let x_hat: Vec<f64> = s_bar.iter().map(|v| if norm > 0.0 { c_hat * v / norm } else { 0.0 }).collect();
            let cov: f64 = w.iter().zip(x_hat.iter().zip(&ft)).map(|(a, (b, c))| a * b * c).sum();
            total += (2.0 * cov + C2) / (c_hat * c_hat + var_f + C2);
        }
    }
    total / (h * wd) as f64
}

/// Row-major `(rows, cols)` matrix product.
pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            out[i][j] = (0..k).map(|t| a[i][t] * b[t][j]).sum();
        }
    }
    out
}

pub fn add_bias(a: &mut [Vec<f64>], bias: &[f64]) {
    for row in a {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Weights of one attention direction: `W^Q, W^K, W^V` stored `(in, out)`
/// and a two-layer GELU feed-forward network.
pub struct AttnWeights {
    pub wq: Vec<Vec<f64>>,
    pub wk: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

/// `FFN(softmax(Q Kᵀ/√d) V)` with one head.
pub fn cross_attend(p: &AttnWeights, q_src: &[Vec<f64>], k_src: &[Vec<f64>], v_src: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let q = matmul(q_src, &p.wq);
    let k = matmul(k_src, &p.wk);
    let v = matmul(v_src, &p.wv);
    let d = q[0].len() as f64;
    let n = q.len();
    let mut attended = vec![vec![0.0; v[0].len()]; n];
    for i in 0..n {
        let scores: Vec<f64> = (0..k.len())
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, ej) in e.iter().enumerate() {
            for (acc, vj) in attended[i].iter_mut().zip(&v[j]) {
                *acc += ej / z * vj;
            }
        }
    }
    let mut hidden = matmul(&attended, &p.w1);
    add_bias(&mut hidden, &p.b1);
    for row in &mut hidden {
        for v in row.iter_mut() {
            *v = gelu(*v);
        }
    }
    let mut out = matmul(&hidden, &p.w2);
    add_bias(&mut out, &p.b2);
    out
}
