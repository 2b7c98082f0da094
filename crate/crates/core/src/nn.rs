//! Small transformer toolkit over candle tensors.
//!
//! Every layer is written with primitive tensor ops so that reverse-mode
//! gradients exist for all of them at both f32 and f64. Parameters are
//! created through a [`ParamSource`], which either mints fresh trainable
//! variables or hands back fixed (gradient-free) tensors loaded from disk.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Error, Result};
use crate::imaging::GridGeometry;

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Xavier/Glorot uniform with the given fan-in and fan-out.
    XavierUniform { fan_in: usize, fan_out: usize },
}

/// Supplies named parameter tensors to layer constructors.
pub trait ParamSource {
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
}

/// Ordered collection of trainable variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a variable in place; every layer holding it sees the change.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        contract!(
            var.dims() == value.dims(),
            "parameter `{name}` expects shape {:?}, got {:?}",
            var.dims(),
            value.dims()
        );
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }
}

/// Creates trainable variables with seeded initialisation.
pub struct VarInit<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> VarInit<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }
}

impl ParamSource for VarInit<'_> {
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        contract!(
            !self.store.vars.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-a..a)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(name.to_string(), var);
        Ok(out)
    }
}

/// Serves fixed tensors from a name → tensor map; used for frozen encoders.
pub struct FixedParams<'a> {
    map: &'a BTreeMap<String, Tensor>,
    dtype: DType,
}

impl<'a> FixedParams<'a> {
    pub fn new(map: &'a BTreeMap<String, Tensor>, dtype: DType) -> Self {
        Self { map, dtype }
    }
}

impl ParamSource for FixedParams<'_> {
    fn tensor(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let t = self
            .map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing weight `{name}`")))?;
        if t.dims() != shape {
            return Err(Error::Config(format!(
                "weight `{name}` has shape {:?}, expected {shape:?}",
                t.dims()
            )));
        }
        Ok(t.detach().to_dtype(self.dtype)?)
    }
}

/// Prefixes parameter names with a dotted path.
pub struct Scope<'a> {
    src: &'a mut dyn ParamSource,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn root(src: &'a mut dyn ParamSource) -> Self {
        Self {
            src,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = self.path(name.as_ref());
        Scope {
            src: &mut *self.src,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let path = self.path(name);
        self.src.tensor(&path, shape, init)
    }
}

/// Affine map `x·W + b` over the last axis; `W` is stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &mut Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = scope.get(
            "weight",
            &[in_dim, out_dim],
            Init::XavierUniform {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )?;
        let bias = if bias {
            Some(scope.get("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.get("gamma", &[dim], Init::Ones)?,
            beta: scope.get("beta", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(scope: &mut Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut scope.sub("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&mut scope.sub("fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    Ok(x.reshape((b, n, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * dh))?)
}

/// `softmax(Q Kᵀ / √d_head) V`, split over `heads`. Inputs are `(B, N, d)`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    contract!(heads > 0 && d % heads == 0, "dim {d} not divisible by {heads} heads");
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let (q, k, v) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
    let attn = softmax_last(&scores)?;
    merge_heads(&attn.matmul(&v)?)
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    dim: usize,
}

impl SelfAttention {
    pub fn new(scope: &mut Scope, dim: usize, heads: usize) -> Result<Self> {
        contract!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Ok(Self {
            qkv: Linear::new(&mut scope.sub("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&mut scope.sub("proj"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let qkv = self.qkv.forward(x)?;
        let q = qkv.narrow(D::Minus1, 0, self.dim)?;
        let k = qkv.narrow(D::Minus1, self.dim, self.dim)?;
        let v = qkv.narrow(D::Minus1, 2 * self.dim, self.dim)?;
        self.proj.forward(&scaled_dot_attention(&q, &k, &v, self.heads)?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(scope: &mut Scope, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        Ok(Self {
            norm1: LayerNorm::new(&mut scope.sub("norm1"), dim)?,
            attn: SelfAttention::new(&mut scope.sub("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut scope.sub("norm2"), dim)?,
            mlp: Mlp::new(&mut scope.sub("mlp"), dim, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

pub fn build_blocks(
    scope: &mut Scope,
    count: usize,
    dim: usize,
    heads: usize,
    mlp_ratio: f64,
) -> Result<Vec<Block>> {
    (0..count)
        .map(|i| Block::new(&mut scope.sub(format!("blocks.{i}")), dim, heads, mlp_ratio))
        .collect()
}

pub fn run_blocks(blocks: &[Block], x: &Tensor) -> Result<Tensor> {
    let mut x = x.clone();
    for b in blocks {
        x = b.forward(&x)?;
    }
    Ok(x)
}

/// `(B, C, H, W)` → `(B, N, p·p·C)` with tokens in raster order.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    contract!(
        h % patch == 0 && w % patch == 0,
        "image {h}x{w} is not a multiple of patch {patch}"
    );
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape((b, c, gh, patch, gw, patch))?
        .permute((0, 2, 4, 3, 5, 1))?
        .contiguous()?
        .reshape((b, gh * gw, patch * patch * c))?)
}

/// Inverse of [`patchify`] for a padded grid.
pub fn unpatchify(tokens: &Tensor, geom: &GridGeometry, channels: usize) -> Result<Tensor> {
    let (b, n, k) = tokens.dims3()?;
    let p = geom.patch_size;
    contract!(
        n == geom.n_tokens() && k == p * p * channels,
        "token grid {n}x{k} does not match geometry {}x{} patch {p}",
        geom.grid_h,
        geom.grid_w
    );
    Ok(tokens
        .reshape((b, geom.grid_h, geom.grid_w, p, p, channels))?
        .permute((0, 5, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, channels, geom.padded_h(), geom.padded_w()))?)
}

/// 1-D bilinear resampling weights (half-pixel centres, edge clamped),
/// `out × in`, row-major.
pub fn bilinear_weights(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut w = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        w[o * in_len + i0] += 1.0 - frac;
        w[o * in_len + i1] += frac;
    }
    w
}

/// Resamples a `(1, gh·gw, d)` positional table to a new grid.
pub fn resize_pos_embed(
    pos: &Tensor,
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Tensor> {
    if from == to {
        return Ok(pos.clone());
    }
    let wy = bilinear_weights(to.0, from.0);
    let wx = bilinear_weights(to.1, from.1);
    let (n_out, n_in) = (to.0 * to.1, from.0 * from.1);
    let mut m = vec![0.0f64; n_out * n_in];
    for oy in 0..to.0 {
        for ox in 0..to.1 {
            let row = (oy * to.1 + ox) * n_in;
            for iy in 0..from.0 {
                let a = wy[oy * from.0 + iy];
                if a == 0.0 {
                    continue;
                }
                for ix in 0..from.1 {
                    m[row + iy * from.1 + ix] = a * wx[ox * from.1 + ix];
                }
            }
        }
    }
    let m = Tensor::from_vec(m, (1, n_out, n_in), pos.device())?.to_dtype(pos.dtype())?;
    Ok(m.matmul(pos)?)
}

/// Scalar value of a rank-0 or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Config(format!("unsupported dtype `{other}`"))),
    }
}
