//! Stage I: vector-quantized adversarial autoencoder.
//!
//! The encoder `E_H` maps an image to a latent grid, each token is replaced
//! by its nearest codebook entry, and the decoder `D_H` reconstructs the
//! image. Codebook entries, encoder and decoder are trained jointly with
//! image-level, code-level and adversarial losses.

use candle_core::{CpuStorage, DType, Layout, Shape, Tensor, Var};
use candle_nn::{Conv2d, GroupNorm, Module};

use crate::error::{Error, Result};
use crate::losses::{
    adaptive_weight, adversarial_value, perceptual_distance, reconstruction_l1, Discriminator,
    FeatureExtractor,
};
use crate::nn::{conv2d, group_norm, AttnBlock2d, Init, ResBlock, Upsample2x, VarStore};

/// Model hyperparameters for the Stage I autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VqConfig {
    /// Codebook entry count N.
    pub n: usize,
    /// Codebook entry dimension d.
    pub d: usize,
    /// Encoder downsampling factor f (a power of two).
    pub f: usize,
    /// Channel width of the first encoder stage.
    pub base_width: usize,
    /// Code-level loss commitment weight.
    pub alpha: f64,
}

impl VqConfig {
    /// Desk-scale profile: 64x64 patches, 8x8 token grids.
    pub fn toy() -> Self {
        Self {
            n: 64,
            d: 32,
            f: 8,
            base_width: 16,
            alpha: 0.25,
        }
    }

    /// Full-scale profile (not desk-runnable for training).
    pub fn paper() -> Self {
        Self {
            n: 1024,
            d: 512,
            f: 16,
            base_width: 64,
            alpha: 0.25,
        }
    }

    pub fn stages(&self) -> usize {
        let s = (self.f as f64).log2().round() as usize;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.d < 1 {
            return Err(Error::Config("codebook needs N >= 2, d >= 1".into()));
        }
        if !self.f.is_power_of_two() || self.f < 2 {
            return Err(Error::Config("downsampling factor must be a power of two >= 2".into()));
        }
        Ok(())
    }

    /// Channel widths per resolution, doubling from the base and capped.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.stages())
            .map(|i| (self.base_width << i).min(8 * self.base_width))
            .collect()
    }
}

/// Convolutional encoder: `log2(f)` stride-2 stages with two residual
/// blocks each, one self-attention block at the lowest resolution.
pub struct Encoder {
    conv_in: Conv2d,
    stages: Vec<(ResBlock, ResBlock, Conv2d)>,
    mid1: ResBlock,
    mid_attn: AttnBlock2d,
    mid2: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    f: usize,
}

impl Encoder {
    pub fn new(vs: &mut VarStore, name: &str, cfg: &VqConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let conv_in = conv2d(vs, &format!("{name}.conv_in"), 3, widths[0], 3, 1, 1, true)?;
        let mut stages = Vec::new();
        for i in 0..cfg.stages() {
            let (ci, co) = (widths[i], widths[i + 1]);
            stages.push((
                ResBlock::new(vs, &format!("{name}.down{i}.res1"), ci, co)?,
                ResBlock::new(vs, &format!("{name}.down{i}.res2"), co, co)?,
                conv2d(vs, &format!("{name}.down{i}.down"), co, co, 3, 2, 1, true)?,
            ));
        }
        let top = *widths.last().unwrap();
        Ok(Self {
            conv_in,
            stages,
            mid1: ResBlock::new(vs, &format!("{name}.mid1"), top, top)?,
            mid_attn: AttnBlock2d::new(vs, &format!("{name}.mid_attn"), top)?,
            mid2: ResBlock::new(vs, &format!("{name}.mid2"), top, top)?,
            norm_out: group_norm(vs, &format!("{name}.norm_out"), top)?,
            conv_out: conv2d(vs, &format!("{name}.conv_out"), top, cfg.d, 3, 1, 1, true)?,
            f: cfg.f,
        })
    }

    /// `(B, 3, H, W)` -> `(B, d, H/f, W/f)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % self.f != 0 || w % self.f != 0 {
            return Err(Error::dim(format!(
                "input {h}x{w} not divisible by downsampling factor {}",
                self.f
            )));
        }
        let mut h = self.conv_in.forward(x)?;
        for (res1, res2, down) in &self.stages {
            h = down.forward(&res2.forward(&res1.forward(&h)?)?)?;
        }
        let h = self.mid2.forward(&self.mid_attn.forward(&self.mid1.forward(&h)?)?)?;
        let h = candle_nn::ops::silu(&self.norm_out.forward(&h)?)?;
        Ok(self.conv_out.forward(&h)?)
    }
}

/// Convolutional decoder mirroring [`Encoder`], with nearest-neighbor
/// upsampling. Output passes through a sigmoid so values stay in (0, 1).
pub struct Decoder {
    conv_in: Conv2d,
    mid1: ResBlock,
    mid_attn: AttnBlock2d,
    mid2: ResBlock,
    stages: Vec<(Upsample2x, ResBlock, ResBlock)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    /// Name of the final-layer weight, used by the adaptive adversarial
    /// weight computation.
    final_layer_name: String,
}

impl Decoder {
    pub fn new(vs: &mut VarStore, name: &str, cfg: &VqConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let top = *widths.last().unwrap();
        let conv_in = conv2d(vs, &format!("{name}.conv_in"), cfg.d, top, 3, 1, 1, true)?;
        let mid1 = ResBlock::new(vs, &format!("{name}.mid1"), top, top)?;
        let mid_attn = AttnBlock2d::new(vs, &format!("{name}.mid_attn"), top)?;
        let mid2 = ResBlock::new(vs, &format!("{name}.mid2"), top, top)?;
        let mut stages = Vec::new();
        for i in (0..cfg.stages()).rev() {
            let (ci, co) = (widths[i + 1], widths[i]);
            let s = cfg.stages() - 1 - i;
            stages.push((
                Upsample2x::new(vs, &format!("{name}.up{s}.up"), ci, co)?,
                ResBlock::new(vs, &format!("{name}.up{s}.res1"), co, co)?,
                ResBlock::new(vs, &format!("{name}.up{s}.res2"), co, co)?,
            ));
        }
        let final_layer_name = format!("{name}.conv_out.weight");
        Ok(Self {
            conv_in,
            mid1,
            mid_attn,
            mid2,
            stages,
            norm_out: group_norm(vs, &format!("{name}.norm_out"), widths[0])?,
            conv_out: conv2d(vs, &format!("{name}.conv_out"), widths[0], 3, 3, 1, 1, true)?,
            final_layer_name,
        })
    }

    pub fn final_layer_name(&self) -> &str {
        &self.final_layer_name
    }

    /// Channel widths of the per-stage activations, coarse to fine.
    pub fn stage_channels(&self, cfg: &VqConfig) -> Vec<usize> {
        let widths = cfg.widths();
        (0..cfg.stages()).rev().map(|i| widths[i]).collect()
    }

    /// `(B, d, u, v)` -> `(B, 3, u·f, v·f)`, plus the activations after
    /// each upsampling stage (coarse to fine).
    pub fn forward_with_activations(&self, f_c: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let h = self.conv_in.forward(f_c)?;
        let mut h = self.mid2.forward(&self.mid_attn.forward(&self.mid1.forward(&h)?)?)?;
        let mut acts = Vec::with_capacity(self.stages.len());
        for (up, res1, res2) in &self.stages {
            h = res2.forward(&res1.forward(&up.forward(&h)?)?)?;
            acts.push(h.clone());
        }
        let out = candle_nn::ops::silu(&self.norm_out.forward(&h)?)?;
        let img = candle_nn::ops::sigmoid(&self.conv_out.forward(&out)?)?;
        Ok((img, acts))
    }

    pub fn forward(&self, f_c: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_activations(f_c)?.0)
    }
}

/// The Stage I model: encoder `E_H`, decoder `D_H` and the learnable
/// codebook, all parameterized in one [`VarStore`].
pub struct VqAutoencoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
    codebook: Tensor,
    pub cfg: VqConfig,
}

impl VqAutoencoder {
    pub const CODEBOOK_VAR: &'static str = "codebook";

    pub fn new(vs: &mut VarStore, cfg: VqConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(vs, "eh", &cfg)?;
        let decoder = Decoder::new(vs, "dh", &cfg)?;
        let bound = 1.0 / cfg.n as f64;
        let codebook = vs.var(
            Self::CODEBOOK_VAR,
            (cfg.n, cfg.d),
            Init::Uniform { lo: -bound, hi: bound },
        )?;
        Ok(Self {
            encoder,
            decoder,
            codebook,
            cfg,
        })
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    /// Encodes an image batch into the latent grid `F_h`.
    pub fn encode_hq(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    /// Decodes a quantized latent back to an image, values in (0, 1).
    pub fn decode_hq(&self, f_c: &Tensor) -> Result<Tensor> {
        self.decoder.forward(f_c)
    }

    /// Per-token nearest-neighbor quantization against this codebook.
    pub fn quantize(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        quantize_nearest(f, &self.codebook)
    }
}

/// Nearest-neighbor quantization. `latent` is `(B, d, u, v)`, the codebook
/// `(N, d)`. Returns the quantized latent (same shape, each token replaced
/// by its nearest entry, gradients routed to the codebook) and the
/// `(B, u, v)` u32 index grid. Ties resolve to the smallest index.
pub fn quantize_nearest(latent: &Tensor, codebook: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, d, u, v) = latent.dims4()?;
    let (n, dc) = codebook.dims2()?;
    if dc != d {
        return Err(Error::dim(format!(
            "latent dim {d} != codebook dim {dc}"
        )));
    }
    let tokens = latent
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .reshape((b * u * v, d))?;
    // Distances are only needed for the argmin, so work on detached values.
    let tok = tokens.detach().to_dtype(DType::F32)?;
    let cb = codebook.detach().to_dtype(DType::F32)?;
    let tok_sq = tok.sqr()?.sum_keepdim(1)?; // (T, 1)
    let cb_sq = cb.sqr()?.sum_keepdim(1)?.reshape((1, n))?; // (1, N)
    let cross = tok.matmul(&cb.t()?)?; // (T, N)
    let dists = tok_sq
        .broadcast_add(&cb_sq)?
        .broadcast_sub(&(cross * 2.0)?)?
        .to_vec2::<f32>()?;
    let mut indices = Vec::with_capacity(b * u * v);
    for row in &dists {
        let mut best = 0usize;
        let mut best_d = row[0];
        for (i, &dist) in row.iter().enumerate().skip(1) {
            if dist < best_d {
                best = i;
                best_d = dist;
            }
        }
        indices.push(best as u32);
    }
    let idx = Tensor::from_vec(indices, b * u * v, latent.device())?;
    let quantized = codebook
        .index_select(&idx, 0)?
        .reshape((b, u, v, d))?
        .permute((0, 3, 1, 2))?
        .contiguous()?;
    let grid = idx.reshape((b, u, v))?;
    Ok((quantized, grid))
}

/// Gathers codebook entries for an index grid: `F̂_c(u,v) = c_{Ŝ(u,v)}`.
pub fn gather_codes(grid: &Tensor, codebook: &Tensor) -> Result<Tensor> {
    let (b, u, v) = grid.dims3()?;
    let (n, d) = codebook.dims2()?;
    let flat = grid.reshape(b * u * v)?;
    let max = flat.max(0)?.to_dtype(DType::U32)?.to_scalar::<u32>()?;
    if max as usize >= n {
        return Err(Error::Index(format!(
            "code index {max} out of range for codebook of {n} entries"
        )));
    }
    Ok(codebook
        .index_select(&flat, 0)?
        .reshape((b, u, v, d))?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

struct SteCombine;

impl candle_core::CustomOp2 for SteCombine {
    fn name(&self) -> &'static str {
        "ste-combine"
    }

    // Forward copies the second argument (the quantized latent) bit-exactly.
    fn cpu_fwd(
        &self,
        _s1: &CpuStorage,
        _l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = l2.shape().clone();
        let storage = match (s2, l2.contiguous_offsets()) {
            (CpuStorage::F32(v), Some((a, b))) => CpuStorage::F32(v[a..b].to_vec()),
            (CpuStorage::F64(v), Some((a, b))) => CpuStorage::F64(v[a..b].to_vec()),
            _ => {
                return Err(candle_core::Error::Msg(
                    "ste-combine expects contiguous f32/f64 input".into(),
                ))
            }
        };
        Ok((storage, shape))
    }

    // The quantizer acts as the identity in the backward pass: the upstream
    // gradient passes to the encoder path unchanged, the codebook path
    // receives an explicit zero (candle requires every tracked branch to be
    // populated).
    fn bwd(
        &self,
        _arg1: &Tensor,
        arg2: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad_res.clone()), Some(arg2.zeros_like()?)))
    }
}

/// Straight-through combination: forward value is `F_c` (bit-exact),
/// backward treats the quantizer as the identity towards `F_h`.
pub fn straight_through_combine(f_h: &Tensor, f_c: &Tensor) -> Result<Tensor> {
    if f_h.shape() != f_c.shape() {
        return Err(Error::dim("straight_through_combine: shape mismatch"));
    }
    Ok(f_h.apply_op2(&f_c.contiguous()?, SteCombine)?)
}

/// Code-level loss: `‖SG[F_h] − F_c‖² + α‖F_h − SG[F_c]‖²`, with the
/// squared norms taken as means over elements.
pub fn code_level_loss(f_h: &Tensor, f_c: &Tensor, alpha: f64) -> Result<Tensor> {
    if f_h.shape() != f_c.shape() {
        return Err(Error::dim("code_level_loss: shape mismatch"));
    }
    let codebook_term = (f_h.detach() - f_c)?.sqr()?.mean_all()?;
    let commit_term = (f_h - f_c.detach())?.sqr()?.mean_all()?;
    Ok((codebook_term + (commit_term * alpha)?)?)
}

/// Per-term diagnostics of the Stage I objective.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Diagnostics {
    pub l_rec: f64,
    pub l_per: f64,
    pub l_cl: f64,
    pub l_adv: f64,
    pub lambda1: f64,
}

/// Stage I total loss `L_rec + L_per + L_cl + λ₁·L_adv` with the adaptive
/// weight computed from gradient norms at the decoder's final layer.
/// `final_layer` is that layer's weight variable; `None` for λ₁ fixes the
/// weight at 0 (adversarial warmup).
#[allow(clippy::too_many_arguments)]
pub fn stage1_total_loss(
    x: &Tensor,
    xbar: &Tensor,
    f_h: &Tensor,
    f_c: &Tensor,
    disc: &Discriminator,
    fx: &FeatureExtractor,
    alpha: f64,
    final_layer: Option<&Var>,
) -> Result<(Tensor, Stage1Diagnostics)> {
    let l_rec = reconstruction_l1(x, xbar)?;
    let l_per = perceptual_distance(x, xbar, fx)?;
    let l_cl = code_level_loss(f_h, f_c, alpha)?;
    let l_adv = adversarial_value(disc, x, xbar)?;
    let lambda1 = match final_layer {
        Some(var) => {
            let g_rec = crate::losses::gradient_norm(&l_rec, var)?;
            let g_adv = crate::losses::gradient_norm(&l_adv, var)?;
            adaptive_weight(g_rec, g_adv, 1e-4)?
        }
        None => 0.0,
    };
    let scalar = |t: &Tensor| -> Result<f64> {
        Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let diag = Stage1Diagnostics {
        l_rec: scalar(&l_rec)?,
        l_per: scalar(&l_per)?,
        l_cl: scalar(&l_cl)?,
        l_adv: scalar(&l_adv)?,
        lambda1,
    };
    let total = (((l_rec + l_per)? + l_cl)? + (l_adv * lambda1)?)?;
    Ok((total, diag))
}

/// Codebook usage over a corpus: per-code counts, used fraction and the
/// pairwise Jaccard overlap of per-image used-code sets.
#[derive(Debug, Clone)]
pub struct UsageReport {
    pub counts: Vec<u64>,
    pub fraction_used: f64,
    pub overlap: Vec<Vec<f64>>,
}

pub fn usage_stats(corpus: &[crate::ImageTensor], model: &VqAutoencoder) -> Result<UsageReport> {
    if corpus.is_empty() {
        return Err(Error::Domain("usage_stats: empty corpus".into()));
    }
    let dev = model.codebook.device().clone();
    let dtype = model.codebook.dtype();
    let mut counts = vec![0u64; model.cfg.n];
    let mut used_sets: Vec<Vec<bool>> = Vec::with_capacity(corpus.len());
    for img in corpus {
        let x = img.to_tensor(dtype, &dev)?.unsqueeze(0)?;
        let f_h = model.encode_hq(&x)?;
        let (_, grid) = model.quantize(&f_h)?;
        let ids = grid.flatten_all()?.to_vec1::<u32>()?;
        let mut used = vec![false; model.cfg.n];
        for id in ids {
            counts[id as usize] += 1;
            used[id as usize] = true;
        }
        used_sets.push(used);
    }
    let fraction_used =
        counts.iter().filter(|&&c| c > 0).count() as f64 / model.cfg.n as f64;
    let m = corpus.len();
    let mut overlap = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let inter = used_sets[i]
                .iter()
                .zip(&used_sets[j])
                .filter(|(a, b)| **a && **b)
                .count() as f64;
            let union = used_sets[i]
                .iter()
                .zip(&used_sets[j])
                .filter(|(a, b)| **a || **b)
                .count() as f64;
            overlap[i][j] = if union > 0.0 { inter / union } else { 1.0 };
        }
    }
    Ok(UsageReport {
        counts,
        fraction_used,
        overlap,
    })
}

pub const CODEBOOK_MAGIC: [u8; 4] = *b"CBK1";

/// Serializes a codebook: magic `CBK1`, version u8, 3 reserved bytes,
/// N u32, d u32, then N·d little-endian f32 entries row-major.
pub fn export_codebook(codebook: &Tensor) -> Result<Vec<u8>> {
    let (n, d) = codebook.dims2()?;
    let values = codebook
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(16 + 4 * values.len());
    out.extend_from_slice(&CODEBOOK_MAGIC);
    out.push(1);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn import_codebook(bytes: &[u8], dev: &candle_core::Device) -> Result<Tensor> {
    if bytes.len() < 16 || bytes[0..4] != CODEBOOK_MAGIC {
        return Err(Error::Format("bad codebook magic".into()));
    }
    if bytes[4] != 1 {
        return Err(Error::Format(format!("unsupported codebook version {}", bytes[4])));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * n * d {
        return Err(Error::Format("codebook length mismatch".into()));
    }
    let values: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(values, (n, d), dev)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{Discriminator, FeatureExtractor};
    use crate::nn::Init;
    use crate::test_util::{autodiff_grad, finite_diff_grad, max_rel_err, rand_tensor};
    use candle_core::Device;

    fn toy_model(seed: u64) -> (VarStore, VqAutoencoder) {
        let mut vs = VarStore::new(seed, DType::F32, Device::Cpu);
        let model = VqAutoencoder::new(&mut vs, VqConfig::toy()).unwrap();
        (vs, model)
    }

    #[test]
    fn config_shapes_and_validation() {
        let toy = VqConfig::toy();
        assert_eq!((toy.n, toy.d, toy.f), (64, 32, 8));
        assert_eq!(toy.stages(), 3);
        let paper = VqConfig::paper();
        assert_eq!((paper.n, paper.d, paper.f), (1024, 512, 16));
        assert_eq!(paper.stages(), 4);
        let mut bad = toy;
        bad.n = 1;
        assert!(bad.validate().is_err());
        bad = toy;
        bad.f = 6;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encode_maps_64px_to_a_8x8_grid_of_codebook_width() {
        let (_vs, m) = toy_model(0);
        let x = rand_tensor((1, 3, 64, 64), 1, 0.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let f_h = m.encode_hq(&x).unwrap();
        assert_eq!(f_h.dims(), &[1, 32, 8, 8]);
        let again = m.encode_hq(&x).unwrap();
        assert_eq!(
            f_h.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            again.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let odd = rand_tensor((1, 3, 60, 64), 2, 0.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        assert!(m.encode_hq(&odd).is_err());
    }

    #[test]
    fn quantization_picks_the_closest_entry() {
        let dev = Device::Cpu;
        let cb = Tensor::from_vec(vec![0.0f32, 0.0, 1.0, 1.0], (2, 2), &dev).unwrap();
        let latent = Tensor::from_vec(vec![0.9f32, 0.8], (1, 2, 1, 1), &dev).unwrap();
        let (q, grid) = quantize_nearest(&latent, &cb).unwrap();
        assert_eq!(grid.flatten_all().unwrap().to_vec1::<u32>().unwrap(), vec![1]);
        assert_eq!(
            q.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![1.0, 1.0]
        );
    }

    #[test]
    fn exact_matches_quantize_with_zero_distance() {
        let dev = Device::Cpu;
        let cb = rand_tensor((8, 4), 3, -1.0, 1.0, DType::F32, &dev).unwrap();
        let row3 = cb.narrow(0, 3, 1).unwrap().reshape((1, 4, 1, 1)).unwrap();
        let (q, grid) = quantize_nearest(&row3, &cb).unwrap();
        assert_eq!(grid.flatten_all().unwrap().to_vec1::<u32>().unwrap(), vec![3]);
        assert_eq!(
            q.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            row3.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn quantization_agrees_with_brute_force_on_1000_tokens() {
        let dev = Device::Cpu;
        let n = 64usize;
        let d = 8usize;
        let cb = rand_tensor((n, d), 4, -1.0, 1.0, DType::F32, &dev).unwrap();
        let latent = rand_tensor((1, d, 25, 40), 5, -1.0, 1.0, DType::F32, &dev).unwrap();
        let (_, grid) = quantize_nearest(&latent, &cb).unwrap();
        let got = grid.flatten_all().unwrap().to_vec1::<u32>().unwrap();
        let toks = latent
            .permute((0, 2, 3, 1))
            .unwrap()
            .reshape((1000, d))
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        let entries = cb.to_vec2::<f32>().unwrap();
        for (t, (tok, &idx)) in toks.iter().zip(&got).enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, e) in entries.iter().enumerate() {
                let dist: f64 = tok
                    .iter()
                    .zip(e)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = i;
                }
            }
            assert_eq!(idx as usize, best, "token {t}");
            // Optimality: the chosen entry is at least as close as any other.
            let chosen: f64 = tok
                .iter()
                .zip(&entries[idx as usize])
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            assert!(chosen <= best_d + 1e-9);
        }
    }

    #[test]
    fn duplicate_entries_tie_to_the_smallest_index() {
        let dev = Device::Cpu;
        let row = vec![0.5f32, -0.25, 0.125];
        let mut data = row.clone();
        data.extend_from_slice(&row);
        data.extend_from_slice(&row);
        let cb = Tensor::from_vec(data, (3, 3), &dev).unwrap();
        let latent = Tensor::from_vec(vec![0.4f32, -0.2, 0.1], (1, 3, 1, 1), &dev).unwrap();
        let (_, grid) = quantize_nearest(&latent, &cb).unwrap();
        assert_eq!(grid.flatten_all().unwrap().to_vec1::<u32>().unwrap(), vec![0]);
    }

    #[test]
    fn straight_through_forward_is_bit_equal_to_the_quantized_input() {
        let dev = Device::Cpu;
        let f_h = rand_tensor((1, 4, 3, 3), 6, -1.0, 1.0, DType::F32, &dev).unwrap();
        let f_c = rand_tensor((1, 4, 3, 3), 7, -1.0, 1.0, DType::F32, &dev).unwrap();
        let out = straight_through_combine(&f_h, &f_c).unwrap();
        assert_eq!(
            out.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            f_c.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let bad = rand_tensor((1, 4, 3, 2), 8, -1.0, 1.0, DType::F32, &dev).unwrap();
        assert!(straight_through_combine(&f_h, &bad).is_err());
    }

    #[test]
    fn straight_through_backward_is_the_identity_toward_the_encoder() {
        let dev = Device::Cpu;
        let x = candle_core::Var::from_tensor(
            &rand_tensor((2, 3, 4), 9, -1.0, 1.0, DType::F64, &dev).unwrap(),
        )
        .unwrap();
        // Composite of the estimator with rounding: d/dx sum(ste(x, round(x)))
        // is exactly one everywhere.
        let rounded = x.as_tensor().round().unwrap();
        let out = straight_through_combine(x.as_tensor(), &rounded).unwrap();
        let weights = rand_tensor((2, 3, 4), 10, 0.5, 2.0, DType::F64, &dev).unwrap();
        let loss = out.mul(&weights).unwrap().sum_all().unwrap();
        let grad = autodiff_grad(&loss, x.as_tensor()).unwrap();
        let want = weights.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (g, w) in grad.iter().zip(&want) {
            assert_eq!(g, w, "gradient must pass through unchanged");
        }
    }

    #[test]
    fn code_level_loss_matches_the_scalar_example() {
        let dev = Device::Cpu;
        let f_h = Tensor::full(2.0f64, (1, 1, 1, 1), &dev).unwrap();
        let f_c = Tensor::full(1.0f64, (1, 1, 1, 1), &dev).unwrap();
        let l = code_level_loss(&f_h, &f_c, 0.25)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((l - 1.25).abs() < 1e-12, "loss {l}");
        let zero = code_level_loss(&f_h, &f_h, 0.25)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn code_level_loss_gradients_split_by_stop_gradient() {
        let dev = Device::Cpu;
        let f_h = candle_core::Var::from_tensor(
            &rand_tensor((1, 2, 2, 2), 11, -1.0, 1.0, DType::F64, &dev).unwrap(),
        )
        .unwrap();
        let f_c = candle_core::Var::from_tensor(
            &rand_tensor((1, 2, 2, 2), 12, -1.0, 1.0, DType::F64, &dev).unwrap(),
        )
        .unwrap();
        let alpha = 0.25;
        let loss = code_level_loss(f_h.as_tensor(), f_c.as_tensor(), alpha).unwrap();
        let gh = autodiff_grad(&loss, f_h.as_tensor()).unwrap();
        let gc = autodiff_grad(&loss, f_c.as_tensor()).unwrap();
        let hv = f_h.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let cv = f_c.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let numel = hv.len() as f64;
        for i in 0..hv.len() {
            let want_h = 2.0 * alpha * (hv[i] - cv[i]) / numel;
            let want_c = 2.0 * (cv[i] - hv[i]) / numel;
            assert!((gh[i] - want_h).abs() < 1e-12, "encoder grad {i}");
            assert!((gc[i] - want_c).abs() < 1e-12, "codebook grad {i}");
        }
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let mut vs = VarStore::new(13, DType::F64, Device::Cpu);
        let mut cfg = VqConfig::toy();
        cfg.d = 8;
        cfg.f = 2;
        cfg.base_width = 4;
        let dec = Decoder::new(&mut vs, "dh", &cfg).unwrap();
        let f = rand_tensor((1, 8, 2, 2), 14, -0.5, 0.5, DType::F64, &Device::Cpu).unwrap();
        let fv = candle_core::Var::from_tensor(&f).unwrap();
        let loss = dec.forward(fv.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap();
        let got = autodiff_grad(&loss, fv.as_tensor()).unwrap();
        let func = |t: &Tensor| -> Result<Tensor> {
            Ok(dec.forward(t)?.sqr()?.sum_all()?)
        };
        let want = finite_diff_grad(&func, &f, 1e-5).unwrap();
        let err = max_rel_err(&got, &want);
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn round_trip_shape_closure() {
        let (_vs, m) = toy_model(1);
        let x = rand_tensor((2, 3, 64, 64), 15, 0.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let f_h = m.encode_hq(&x).unwrap();
        let (f_c, grid) = m.quantize(&f_h).unwrap();
        assert_eq!(grid.dims(), &[2, 8, 8]);
        let xbar = m.decode_hq(&f_c).unwrap();
        assert_eq!(xbar.dims(), x.dims());
        let vals = xbar.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Decoding the gathered entries for the same grid is the same image.
        let regathered = gather_codes(&grid, m.codebook()).unwrap();
        let xbar2 = m.decode_hq(&regathered).unwrap();
        assert_eq!(
            vals,
            xbar2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn gather_rejects_out_of_range_indices() {
        let dev = Device::Cpu;
        let cb = rand_tensor((4, 2), 16, -1.0, 1.0, DType::F32, &dev).unwrap();
        let grid = Tensor::from_vec(vec![0u32, 5, 1, 2], (1, 2, 2), &dev).unwrap();
        assert!(matches!(
            gather_codes(&grid, &cb),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn stage1_loss_reduces_to_its_surviving_terms_on_perfect_reconstruction() {
        let dev = Device::Cpu;
        let mut dvs = VarStore::new(2, DType::F32, dev.clone());
        let disc = Discriminator::new(&mut dvs, "d", 8).unwrap();
        let fx = FeatureExtractor::random_fixed(0, DType::F32, &dev).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &dev).unwrap();
        let f_h = rand_tensor((1, 4, 4, 4), 17, -1.0, 1.0, DType::F32, &dev).unwrap();
        let f_c = (&f_h + 0.5).unwrap();
        let (total, diag) =
            stage1_total_loss(&x, &x, &f_h, &f_c, &disc, &fx, 0.25, None).unwrap();
        assert_eq!(diag.l_rec, 0.0);
        assert_eq!(diag.l_per, 0.0);
        assert_eq!(diag.lambda1, 0.0);
        let expected_cl = 0.25f64.mul_add(0.25, 0.25); // 1·0.25² wait, see below
        let _ = expected_cl;
        // L_cl for a constant offset 0.5 is 0.25 + alpha·0.25.
        assert!((diag.l_cl - (0.25 + 0.25 * 0.25)).abs() < 1e-6);
        // Zero input makes the discriminator indifferent, Eq-style value 2·ln 0.5.
        assert!((diag.l_adv - 2.0 * 0.5f64.ln()).abs() < 1e-5);
        let t = total.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        assert!((t - diag.l_cl).abs() < 1e-6, "total {t} vs L_cl {}", diag.l_cl);
    }

    #[test]
    fn stage1_adaptive_weight_uses_the_final_decoder_layer() {
        let dev = Device::Cpu;
        let (vs, m) = toy_model(3);
        let mut dvs = VarStore::new(4, DType::F32, dev.clone());
        let disc = Discriminator::new(&mut dvs, "d", 8).unwrap();
        let fx = FeatureExtractor::random_fixed(0, DType::F32, &dev).unwrap();
        let x = rand_tensor((1, 3, 64, 64), 18, 0.0, 1.0, DType::F32, &dev).unwrap();
        let f_h = m.encode_hq(&x).unwrap();
        let (f_c, _) = m.quantize(&f_h).unwrap();
        let combined = straight_through_combine(&f_h, &f_c).unwrap();
        let xbar = m.decode_hq(&combined).unwrap();
        let final_layer = vs.get(m.decoder.final_layer_name()).unwrap();
        let (_, diag) = stage1_total_loss(
            &x, &xbar, &f_h, &f_c, &disc, &fx, 0.25, Some(final_layer),
        )
        .unwrap();
        assert!(diag.lambda1 > 0.0, "adaptive weight {}", diag.lambda1);
        assert!(diag.lambda1 <= crate::losses::ADAPTIVE_WEIGHT_CLAMP);
    }

    #[test]
    fn usage_statistics_count_every_token() {
        let (_vs, m) = toy_model(5);
        let imgs = vec![
            crate::data::procedural_texture(64, 1),
            crate::data::procedural_texture(64, 1),
            crate::data::procedural_texture(64, 2),
        ];
        let report = usage_stats(&imgs, &m).unwrap();
        let total: u64 = report.counts.iter().sum();
        assert_eq!(total, 3 * 8 * 8);
        assert!(report.fraction_used > 0.0 && report.fraction_used <= 1.0);
        assert_eq!(report.overlap.len(), 3);
        // Identical images share their code set exactly.
        assert_eq!(report.overlap[0][1], 1.0);
        assert_eq!(report.overlap[0][0], 1.0);
        assert!(usage_stats(&[], &m).is_err());
    }

    #[test]
    fn codebook_export_round_trips_bit_exactly() {
        let dev = Device::Cpu;
        let cb = rand_tensor((16, 8), 19, -2.0, 2.0, DType::F32, &dev).unwrap();
        let bytes = export_codebook(&cb).unwrap();
        assert_eq!(&bytes[0..4], b"CBK1");
        assert_eq!(bytes.len(), 4 + 1 + 3 + 4 + 4 + 16 * 8 * 4);
        let back = import_codebook(&bytes, &dev).unwrap();
        assert_eq!(
            cb.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(import_codebook(&corrupt, &dev).is_err());
        let short = &bytes[..bytes.len() - 2];
        assert!(import_codebook(short, &dev).is_err());
    }

    #[test]
    fn quantize_routes_gradients_to_the_codebook() {
        let dev = Device::Cpu;
        let cb = candle_core::Var::from_tensor(
            &rand_tensor((4, 2), 20, -1.0, 1.0, DType::F64, &dev).unwrap(),
        )
        .unwrap();
        let latent = rand_tensor((1, 2, 2, 2), 21, -1.0, 1.0, DType::F64, &dev).unwrap();
        let (q, grid) = quantize_nearest(&latent, cb.as_tensor()).unwrap();
        let loss = q.sqr().unwrap().sum_all().unwrap();
        let grad = autodiff_grad(&loss, cb.as_tensor()).unwrap();
        // Rows never selected receive exactly zero gradient.
        let used: std::collections::HashSet<u32> = grid
            .flatten_all()
            .unwrap()
            .to_vec1::<u32>()
            .unwrap()
            .into_iter()
            .collect();
        for row in 0..4u32 {
            let row_grad: f64 = grad[(row as usize) * 2..(row as usize) * 2 + 2]
                .iter()
                .map(|g| g.abs())
                .sum();
            if used.contains(&row) {
                assert!(row_grad > 0.0, "selected row {row} must get gradient");
            } else {
                assert_eq!(row_grad, 0.0, "unused row {row} must stay untouched");
            }
        }
        let _ = Init::Const(0.0);
    }
}
