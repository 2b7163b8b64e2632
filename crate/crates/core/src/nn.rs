//! Parameter store and shared network building blocks.
//!
//! All weights are drawn from a seeded RNG in construction order, so model
//! initialization is a pure function of the seed.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Shape, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, LayerNorm, Linear, Module};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
    /// He initialization for a given fan-in.
    Kaiming { fan_in: usize },
}

/// Ordered, seeded collection of trainable variables.
pub struct VarStore {
    device: Device,
    dtype: DType,
    rng: ChaCha12Rng,
    vars: Vec<(String, Var)>,
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            device,
            dtype,
            rng: ChaCha12Rng::seed_from_u64(seed),
            vars: Vec::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Creates (or returns the existing) variable and hands back its tensor.
    pub fn var<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        if let Some((_, v)) = self.vars.iter().find(|(n, _)| n == name) {
            return Ok(v.as_tensor().clone());
        }
        let shape: Shape = shape.into();
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => {
                let dist = rand::distributions::Uniform::new(0.0f64, 1.0);
                // Box-Muller on uniform draws keeps us independent of rand_distr.
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    let u1: f64 = self.rng.sample(dist).max(1e-12);
                    let u2: f64 = self.rng.sample(dist);
                    let r = (-2.0 * u1.ln()).sqrt();
                    out.push(std * r * (std::f64::consts::TAU * u2).cos());
                    if out.len() < n {
                        out.push(std * r * (std::f64::consts::TAU * u2).sin());
                    }
                }
                out
            }
            Init::Uniform { lo, hi } => (0..n).map(|_| self.rng.gen_range(lo..hi)).collect(),
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                return self.var(name, shape, Init::Normal { std });
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.push((name.to_string(), var));
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn all_vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    /// Serializes every variable into one safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites existing variables by name from a safetensors file.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in self.vars.iter() {
            let t = map
                .get(name)
                .ok_or_else(|| Error::State(format!("checkpoint missing tensor '{name}'")))?;
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies matching variables from another store, rewriting name prefixes.
    pub fn copy_from(&mut self, other: &VarStore, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in self.vars.iter() {
            if let Some(rest) = name.strip_prefix(dst_prefix) {
                let src_name = format!("{src_prefix}{rest}");
                if let Some(src) = other.get(&src_name) {
                    var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    /// Copies variables between two prefixes of the same store, e.g. to
    /// initialize a second encoder from a trained one.
    pub fn copy_within(&self, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in self.vars.iter() {
            if let Some(rest) = name.strip_prefix(dst_prefix) {
                let src_name = format!("{src_prefix}{rest}");
                if let Some((_, src)) = self.vars.iter().find(|(n, _)| *n == src_name) {
                    var.set(&src.as_tensor().copy()?)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    /// Byte-level snapshot of every parameter, for freeze contracts.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<u8>)>> {
        self.vars
            .iter()
            .map(|(n, v)| {
                let bytes: Vec<u8> = v
                    .as_tensor()
                    .to_dtype(DType::F64)?
                    .flatten_all()?
                    .to_vec1::<f64>()?
                    .iter()
                    .flat_map(|x| x.to_le_bytes())
                    .collect();
                Ok((n.clone(), bytes))
            })
            .collect()
    }
}

fn conv_cfg(stride: usize, padding: usize) -> Conv2dConfig {
    Conv2dConfig {
        padding,
        stride,
        dilation: 1,
        groups: 1,
        cudnn_fwd_algo: None,
    }
}

pub fn conv2d(
    vs: &mut VarStore,
    name: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Result<Conv2d> {
    let w = vs.var(
        &format!("{name}.weight"),
        (out_c, in_c, k, k),
        Init::Kaiming { fan_in: in_c * k * k },
    )?;
    let b = if bias {
        Some(vs.var(&format!("{name}.bias"), out_c, Init::Const(0.0))?)
    } else {
        None
    };
    Ok(Conv2d::new(w, b, conv_cfg(stride, padding)))
}

pub fn linear(vs: &mut VarStore, name: &str, in_d: usize, out_d: usize, bias: bool) -> Result<Linear> {
    let std = (1.0 / in_d as f64).sqrt();
    let w = vs.var(&format!("{name}.weight"), (out_d, in_d), Init::Normal { std })?;
    let b = if bias {
        Some(vs.var(&format!("{name}.bias"), out_d, Init::Const(0.0))?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

pub fn layer_norm(vs: &mut VarStore, name: &str, dim: usize) -> Result<LayerNorm> {
    let w = vs.var(&format!("{name}.weight"), dim, Init::Const(1.0))?;
    let b = vs.var(&format!("{name}.bias"), dim, Init::Const(0.0))?;
    Ok(LayerNorm::new(w, b, 1e-5))
}

fn norm_groups(channels: usize) -> usize {
    for g in [8usize, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

pub fn group_norm(vs: &mut VarStore, name: &str, channels: usize) -> Result<GroupNorm> {
    let w = vs.var(&format!("{name}.weight"), channels, Init::Const(1.0))?;
    let b = vs.var(&format!("{name}.bias"), channels, Init::Const(0.0))?;
    Ok(GroupNorm::new(w, b, channels, norm_groups(channels), 1e-6)?)
}

/// Two 3x3 convolutions with group norms and SiLU, plus a (possibly
/// projected) skip connection.
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(vs: &mut VarStore, name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(vs, &format!("{name}.norm1"), in_c)?,
            conv1: conv2d(vs, &format!("{name}.conv1"), in_c, out_c, 3, 1, 1, true)?,
            norm2: group_norm(vs, &format!("{name}.norm2"), out_c)?,
            conv2: conv2d(vs, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1, true)?,
            skip: if in_c != out_c {
                Some(conv2d(vs, &format!("{name}.skip"), in_c, out_c, 1, 1, 0, true)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&candle_nn::ops::silu(&self.norm1.forward(x)?)?)?;
        let h = self.conv2.forward(&candle_nn::ops::silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Scaled dot-product attention with head splitting.
///
/// `q`: `(B, T, C)`, `k`/`v`: `(B, S, C)`; scores are divided by `sqrt(tau)`.
/// Returns the fused output `(B, T, C)` and the per-head attention
/// probabilities `(B, h, T, S)`.
pub fn multihead_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    tau: f64,
) -> Result<(Tensor, Tensor)> {
    let (b, t, c) = q.dims3()?;
    let (_, s, ck) = k.dims3()?;
    if c % heads != 0 || ck != c {
        return Err(Error::dim(format!(
            "attention width {c} incompatible with {heads} heads / key width {ck}"
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Domain("attention scaling factor must be positive".into()));
    }
    let dh = c / heads;
    let split = |x: &Tensor, n: usize| -> Result<Tensor> {
        // (B, N, C) -> (B, h, N, dh)
        Ok(x.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let qh = split(q, t)?;
    let kh = split(k, s)?;
    let vh = split(v, s)?;
    let scores = (qh.matmul(&kh.transpose(D::Minus2, D::Minus1)?)? / tau.sqrt())?;
    let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = probs.matmul(&vh)?; // (B, h, T, dh)
    let out = out.transpose(1, 2)?.contiguous()?.reshape((b, t, c))?;
    Ok((out, probs))
}

/// Average-pools a token sequence spatially until it has at most
/// `max_tokens` tokens. Returns the (possibly unchanged) sequence.
pub fn pool_tokens(x: &Tensor, spatial: (usize, usize), max_tokens: usize) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    let (h, w) = spatial;
    if t <= max_tokens {
        return Ok(x.clone());
    }
    if h * w != t {
        return Err(Error::dim("token count does not match spatial dims"));
    }
    let mut stride = 2usize;
    while (h / stride) * (w / stride) > max_tokens {
        stride *= 2;
    }
    let grid = x.transpose(1, 2)?.reshape((b, c, h, w))?;
    let pooled = grid.avg_pool2d(stride)?;
    let (_, _, ph, pw) = pooled.dims4()?;
    Ok(pooled.reshape((b, c, ph * pw))?.transpose(1, 2)?.contiguous()?)
}

/// Pre-norm Transformer block with optional key/value token pooling for
/// large grids.
pub struct TransformerBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    max_kv_tokens: usize,
}

impl TransformerBlock {
    pub fn new(vs: &mut VarStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "transformer width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            ln1: layer_norm(vs, &format!("{name}.ln1"), dim)?,
            wq: linear(vs, &format!("{name}.wq"), dim, dim, true)?,
            wk: linear(vs, &format!("{name}.wk"), dim, dim, true)?,
            wv: linear(vs, &format!("{name}.wv"), dim, dim, true)?,
            wo: linear(vs, &format!("{name}.wo"), dim, dim, true)?,
            ln2: layer_norm(vs, &format!("{name}.ln2"), dim)?,
            fc1: linear(vs, &format!("{name}.fc1"), dim, 4 * dim, true)?,
            fc2: linear(vs, &format!("{name}.fc2"), 4 * dim, dim, true)?,
            heads,
            max_kv_tokens: 1024,
        })
    }

    /// `x`: `(B, T, D)`. `spatial` enables key/value pooling above 32x32
    /// tokens.
    pub fn forward(&self, x: &Tensor, spatial: Option<(usize, usize)>) -> Result<Tensor> {
        let (_, _, d) = x.dims3()?;
        let normed = self.ln1.forward(x)?;
        let q = self.wq.forward(&normed)?;
        let kv_src = match spatial {
            Some(sp) => pool_tokens(&normed, sp, self.max_kv_tokens)?,
            None => normed.clone(),
        };
        let k = self.wk.forward(&kv_src)?;
        let v = self.wv.forward(&kv_src)?;
        let dh = d / self.heads;
        let (attn, _) = multihead_attention(&q, &k, &v, self.heads, dh as f64)?;
        let x = (x + self.wo.forward(&attn)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok((x + h)?)
    }
}

/// Single-head self-attention over the spatial grid of a `(B, C, H, W)`
/// feature map.
pub struct AttnBlock2d {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl AttnBlock2d {
    pub fn new(vs: &mut VarStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: group_norm(vs, &format!("{name}.norm"), channels)?,
            q: conv2d(vs, &format!("{name}.q"), channels, channels, 1, 1, 0, true)?,
            k: conv2d(vs, &format!("{name}.k"), channels, channels, 1, 1, 0, true)?,
            v: conv2d(vs, &format!("{name}.v"), channels, channels, 1, 1, 0, true)?,
            proj: conv2d(vs, &format!("{name}.proj"), channels, channels, 1, 1, 0, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = self.norm.forward(x)?;
        let to_tokens = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
        };
        let q = to_tokens(self.q.forward(&n)?)?;
        let k = to_tokens(self.k.forward(&n)?)?;
        let v = to_tokens(self.v.forward(&n)?)?;
        let (out, _) = multihead_attention(&q, &k, &v, 1, c as f64)?;
        let out = out.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

/// 2x nearest-neighbor upsample followed by a 3x3 convolution.
pub struct Upsample2x {
    conv: Conv2d,
}

impl Upsample2x {
    pub fn new(vs: &mut VarStore, name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            conv: conv2d(vs, &format!("{name}.conv"), in_c, out_c, 3, 1, 1, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?)
    }
}

/// Convolution whose weight is divided by its spectral norm estimate.
///
/// The power-iteration vector is updated explicitly via
/// [`SpectralConv2d::power_iterate`]; the forward pass itself is pure.
pub struct SpectralConv2d {
    weight: Tensor,
    bias: Tensor,
    u: Tensor,
    stride: usize,
    padding: usize,
}

impl SpectralConv2d {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight = vs.var(
            &format!("{name}.weight"),
            (out_c, in_c, k, k),
            Init::Kaiming { fan_in: in_c * k * k },
        )?;
        let bias = vs.var(&format!("{name}.bias"), out_c, Init::Const(0.0))?;
        let u0: Vec<f64> = (0..out_c).map(|i| ((i as f64) * 0.7391 + 0.31).sin()).collect();
        let u = Tensor::from_vec(u0, out_c, vs.device())?.to_dtype(vs.dtype())?;
        let norm = u.sqr()?.sum_all()?.sqrt()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        Ok(Self {
            weight,
            bias,
            u: (u / norm)?,
            stride,
            padding,
        })
    }

    fn w_mat(&self) -> Result<Tensor> {
        let (o, i, kh, kw) = self.weight.dims4()?;
        Ok(self.weight.reshape((o, i * kh * kw))?)
    }

    fn sigma(&self) -> Result<f64> {
        let w = self.w_mat()?.detach();
        let (o, _) = w.dims2()?;
        let u = self.u.reshape((1, o))?;
        let v = u.matmul(&w)?;
        let vn = (&v / v.sqr()?.sum_all()?.sqrt()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1e-12))?;
        let wu = w.matmul(&vn.t()?)?;
        let sigma = wu.sqr()?.sum_all()?.sqrt()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        Ok(sigma.max(1e-12))
    }

    /// One power-iteration step on the cached singular vector estimate.
    pub fn power_iterate(&mut self) -> Result<()> {
        let w = self.w_mat()?.detach();
        let (o, _) = w.dims2()?;
        let u = self.u.reshape((1, o))?;
        let v = u.matmul(&w)?;
        let vn = (&v / v.sqr()?.sum_all()?.sqrt()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1e-12))?;
        let wu = w.matmul(&vn.t()?)?.reshape(o)?;
        let norm = wu.sqr()?.sum_all()?.sqrt()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1e-12);
        self.u = (wu / norm)?.detach();
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let sigma = self.sigma()?;
        let w = (&self.weight / sigma)?;
        let y = x.conv2d(&w, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)?)
    }
}
