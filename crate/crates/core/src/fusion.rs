//! Stage III: hierarchical prior fusion.
//!
//! The decoder `D_H` runs on predicted codes while its upsampling-stage
//! activations are captured, channel-halved by 1x1 projections into a
//! prior pyramid, and fused into a separate enhancement path through
//! multi-head cross-attention. The enhancement network consumes only the
//! decoded image, so no extra bits travel alongside the bitstream.

use candle_core::{DType, Tensor, Var};
use candle_nn::{Conv2d, LayerNorm, Linear, Module};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::losses::{
    adaptive_weight, adversarial_value, gradient_norm, perceptual_distance, reconstruction_l1,
    Discriminator, FeatureExtractor,
};
use crate::lookup::CodePredictor;
use crate::nn::{
    conv2d, layer_norm, linear, multihead_attention, pool_tokens, ResBlock, TransformerBlock,
    Upsample2x, VarStore,
};
use crate::vq::{gather_codes, VqAutoencoder, VqConfig};

/// Channel-halved decoder activations, coarse to fine.
#[derive(Debug, Clone)]
pub struct PriorPyramid {
    pub levels: Vec<Tensor>,
}

/// Fusion network hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HpinConfig {
    /// Number of prior scales fused via cross-attention (the finest ones).
    pub scales: usize,
    /// Attention heads per fused scale, coarse to fine.
    pub heads: Vec<usize>,
    /// Transformer blocks preceding each fusion.
    pub blocks_per_scale: usize,
}

impl HpinConfig {
    pub fn default_heads() -> Self {
        Self {
            scales: 3,
            heads: vec![4, 2, 2],
            blocks_per_scale: 2,
        }
    }

    pub fn toy() -> Self {
        Self::default_heads()
    }

    pub fn paper() -> Self {
        Self::default_heads()
    }
}

/// One scale's cross-attention module. Queries come from the enhancement
/// path, keys and values from the prior pyramid; all projections are
/// bias-free and the result merges residually.
pub struct Mcm {
    norm_m: LayerNorm,
    norm_p: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
    /// Softmax temperature, the per-head key dimension.
    pub tau: f64,
    max_kv_tokens: usize,
}

impl Mcm {
    /// `c_m` is the enhancement-path width (queries and output), `c_p` the
    /// prior width at this scale.
    pub fn new(vs: &mut VarStore, name: &str, c_m: usize, c_p: usize, heads: usize) -> Result<Self> {
        if c_m % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {c_m} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            norm_m: layer_norm(vs, &format!("{name}.norm_m"), c_m)?,
            norm_p: layer_norm(vs, &format!("{name}.norm_p"), c_p)?,
            wq: linear(vs, &format!("{name}.wq"), c_m, c_m, false)?,
            wk: linear(vs, &format!("{name}.wk"), c_p, c_m, false)?,
            wv: linear(vs, &format!("{name}.wv"), c_p, c_m, false)?,
            wo: linear(vs, &format!("{name}.wo"), c_m, c_m, false)?,
            heads,
            tau: (c_m / heads) as f64,
            max_kv_tokens: 1024,
        })
    }

    /// Cross-attention fusion of feature maps with equal spatial dims:
    /// `m` is `(B, C_m, H, W)`, `p` is `(B, C_p, H, W)`; returns the shape
    /// of `m`. Prior tokens above the pooling threshold are average-pooled
    /// to bound attention cost.
    pub fn fuse(&self, m: &Tensor, p: &Tensor) -> Result<Tensor> {
        let (b, c_m, h, w) = m.dims4()?;
        let (pb, c_p, ph, pw) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::dim(format!(
                "mcm fuse: feature {h}x{w} vs prior {ph}x{pw} (batch {b} vs {pb})"
            )));
        }
        let m_tok = m.reshape((b, c_m, h * w))?.transpose(1, 2)?.contiguous()?;
        let p_tok = p.reshape((b, c_p, h * w))?.transpose(1, 2)?.contiguous()?;
        let q = self.wq.forward(&self.norm_m.forward(&m_tok)?)?;
        let p_norm = self.norm_p.forward(&p_tok)?;
        let kv_src = pool_tokens(&p_norm, (h, w), self.max_kv_tokens)?;
        let k = self.wk.forward(&kv_src)?;
        let v = self.wv.forward(&kv_src)?;
        let (att, _) = multihead_attention(&q, &k, &v, self.heads, self.tau)?;
        let out = self.wo.forward(&att)?;
        let out = out.transpose(1, 2)?.reshape((b, c_m, h, w))?;
        Ok((m + out)?)
    }

    /// Attention probabilities `(B, h, T, S)` alongside the fused map, for
    /// inspecting row-stochasticity.
    pub fn attention_probs(&self, m: &Tensor, p: &Tensor) -> Result<Tensor> {
        let (b, c_m, h, w) = m.dims4()?;
        let (_, c_p, _, _) = p.dims4()?;
        let m_tok = m.reshape((b, c_m, h * w))?.transpose(1, 2)?.contiguous()?;
        let p_tok = p.reshape((b, c_p, h * w))?.transpose(1, 2)?.contiguous()?;
        let q = self.wq.forward(&self.norm_m.forward(&m_tok)?)?;
        let p_norm = self.norm_p.forward(&p_tok)?;
        let kv_src = pool_tokens(&p_norm, (h, w), self.max_kv_tokens)?;
        let k = self.wk.forward(&kv_src)?;
        let v = self.wv.forward(&kv_src)?;
        let (_, probs) = multihead_attention(&q, &k, &v, self.heads, self.tau)?;
        Ok(probs)
    }
}

/// Cross-attention fusion as a free function.
pub fn mcm_fuse(m: &Tensor, p: &Tensor, mcm: &Mcm) -> Result<Tensor> {
    mcm.fuse(m, p)
}

struct HpinStage {
    up: Upsample2x,
    res: ResBlock,
    blocks: Vec<TransformerBlock>,
    mcm: Option<Mcm>,
}

/// The enhancement network. Mirrors the decoder's upsampling ladder but
/// with its own weights; the finest `scales` stages run Transformer blocks
/// and fuse the matching prior level via [`Mcm`].
pub struct HpinModel {
    conv_in: Conv2d,
    stages: Vec<HpinStage>,
    conv_out: Conv2d,
    prior_projs: Vec<Conv2d>,
    /// Index of the first stage that carries an MCM.
    mcm_start: usize,
    final_layer_name: String,
    pub cfg: HpinConfig,
    pub vq_cfg: VqConfig,
}

impl HpinModel {
    pub fn new(vs: &mut VarStore, name: &str, vq_cfg: VqConfig, cfg: HpinConfig) -> Result<Self> {
        vq_cfg.validate()?;
        let n_stages = vq_cfg.stages();
        if cfg.scales == 0 || cfg.scales > n_stages {
            return Err(Error::Config(format!(
                "fusion scales {} out of range for {} upsampling stages",
                cfg.scales, n_stages
            )));
        }
        if cfg.heads.len() != cfg.scales {
            return Err(Error::Config("one head count per fused scale required".into()));
        }
        let widths = vq_cfg.widths();
        let top = widths[n_stages];
        let conv_in = conv2d(vs, &format!("{name}.conv_in"), vq_cfg.d, top, 1, 1, 0, true)?;
        let mcm_start = n_stages - cfg.scales;
        let mut stages = Vec::with_capacity(n_stages);
        let mut prior_projs = Vec::with_capacity(cfg.scales);
        for s in 0..n_stages {
            let ci = widths[n_stages - s];
            let co = widths[n_stages - 1 - s];
            let up = Upsample2x::new(vs, &format!("{name}.up{s}.up"), ci, co)?;
            let res = ResBlock::new(vs, &format!("{name}.up{s}.res"), co, co)?;
            let (blocks, mcm) = if s >= mcm_start {
                let scale = s - mcm_start;
                let heads = cfg.heads[scale];
                let mut blocks = Vec::with_capacity(cfg.blocks_per_scale);
                for bi in 0..cfg.blocks_per_scale {
                    blocks.push(TransformerBlock::new(
                        vs,
                        &format!("{name}.up{s}.blk{bi}"),
                        co,
                        heads,
                    )?);
                }
                if co % 2 != 0 {
                    return Err(Error::Config(format!(
                        "prior projection needs an even source width, got {co}"
                    )));
                }
                prior_projs.push(conv2d(
                    vs,
                    &format!("{name}.prior{scale}"),
                    co,
                    co / 2,
                    1,
                    1,
                    0,
                    true,
                )?);
                let mcm = Mcm::new(vs, &format!("{name}.up{s}.mcm"), co, co / 2, heads)?;
                (blocks, Some(mcm))
            } else {
                (Vec::new(), None)
            };
            stages.push(HpinStage { up, res, blocks, mcm });
        }
        let conv_out = conv2d(vs, &format!("{name}.conv_out"), widths[0], 3, 3, 1, 1, true)?;
        Ok(Self {
            conv_in,
            stages,
            conv_out,
            prior_projs,
            mcm_start,
            final_layer_name: format!("{name}.conv_out.weight"),
            cfg,
            vq_cfg,
        })
    }

    pub fn final_layer_name(&self) -> &str {
        &self.final_layer_name
    }

    /// Projects captured decoder activations into the prior pyramid. The
    /// decoder itself stays untouched; only the 1x1 projections are
    /// learnable. Expects one activation per decoder stage, coarse to fine.
    pub fn extract_priors(&self, dh_activations: &[Tensor]) -> Result<PriorPyramid> {
        let n_stages = self.vq_cfg.stages();
        if dh_activations.len() != n_stages {
            return Err(Error::State(format!(
                "expected {n_stages} decoder activations, got {}",
                dh_activations.len()
            )));
        }
        let mut levels = Vec::with_capacity(self.cfg.scales);
        for (scale, proj) in self.prior_projs.iter().enumerate() {
            let act = &dh_activations[self.mcm_start + scale];
            levels.push(proj.forward(&act.detach())?);
        }
        Ok(PriorPyramid { levels })
    }

    /// Enhancement forward pass: the degraded-image latent `(B, d, u, v)`
    /// rises through the upsampling ladder, fusing each prior level, and
    /// ends as a `(B, 3, u·f, v·f)` image in (0, 1).
    pub fn forward(&self, f_l: &Tensor, priors: &PriorPyramid) -> Result<Tensor> {
        if priors.levels.len() != self.cfg.scales {
            return Err(Error::dim(format!(
                "expected {} prior levels, got {}",
                self.cfg.scales,
                priors.levels.len()
            )));
        }
        let mut h = self.conv_in.forward(f_l)?;
        for (s, stage) in self.stages.iter().enumerate() {
            h = stage.res.forward(&stage.up.forward(&h)?)?;
            if let Some(mcm) = &stage.mcm {
                let (b, c, hh, ww) = h.dims4()?;
                let mut tok = h.reshape((b, c, hh * ww))?.transpose(1, 2)?.contiguous()?;
                for blk in &stage.blocks {
                    tok = blk.forward(&tok, Some((hh, ww)))?;
                }
                let m_i = tok.transpose(1, 2)?.reshape((b, c, hh, ww))?;
                h = mcm.fuse(&m_i, &priors.levels[s - self.mcm_start])?;
            }
        }
        Ok(candle_nn::ops::sigmoid(&self.conv_out.forward(&h)?)?)
    }
}

/// Full decoder-side enhancement of one decoded image. Consumes nothing
/// but the image and frozen model state, so the transmitted bitstream is
/// unchanged by enhancement.
pub fn hpin_decode(
    x_tilde: &ImageTensor,
    predictor: &CodePredictor,
    vq: &VqAutoencoder,
    hpin: &HpinModel,
) -> Result<ImageTensor> {
    let dev = vq.codebook().device().clone();
    let dtype = vq.codebook().dtype();
    let x = x_tilde
        .to_tensor(dtype, &dev)
        .map_err(|e| e.in_stage("input"))?
        .unsqueeze(0)?;
    let f_l = predictor.encode_lq(&x).map_err(|e| e.in_stage("encode"))?;
    let logits = predictor
        .logits_from_latent(&f_l)
        .map_err(|e| e.in_stage("predict"))?;
    let codes = crate::lookup::argmax_codes(&logits).map_err(|e| e.in_stage("predict"))?;
    let f_c = gather_codes(&codes, vq.codebook()).map_err(|e| e.in_stage("gather"))?;
    let (_, acts) = vq
        .decoder
        .forward_with_activations(&f_c)
        .map_err(|e| e.in_stage("decode"))?;
    let priors = hpin.extract_priors(&acts).map_err(|e| e.in_stage("priors"))?;
    let out = hpin.forward(&f_l, &priors).map_err(|e| e.in_stage("fuse"))?;
    ImageTensor::from_tensor(&out.squeeze(0)?).map_err(|e| e.in_stage("output"))
}

/// Per-term diagnostics of the Stage III objective.
#[derive(Debug, Clone, Copy)]
pub struct Stage3Diagnostics {
    pub l_s2: f64,
    pub l_rec: f64,
    pub l_per: f64,
    pub l_adv: f64,
    pub lambda3: f64,
}

/// Stage III total loss `L_s2 + L'_rec + L'_per + λ₃·L'_adv`, with λ₃
/// computed from gradient norms at the enhancement network's output head.
/// `None` for `final_layer` fixes λ₃ at 0 (warmup).
pub fn stage3_loss(
    x: &Tensor,
    x_hat: &Tensor,
    stage2_total: &Tensor,
    disc: &Discriminator,
    fx: &FeatureExtractor,
    final_layer: Option<&Var>,
) -> Result<(Tensor, Stage3Diagnostics)> {
    if x.shape() != x_hat.shape() {
        return Err(Error::dim("stage3_loss: shape mismatch"));
    }
    let l_rec = reconstruction_l1(x, x_hat)?;
    let l_per = perceptual_distance(x, x_hat, fx)?;
    let l_adv = adversarial_value(disc, x, x_hat)?;
    let lambda3 = match final_layer {
        Some(var) => {
            let g_rec = gradient_norm(&l_rec, var)?;
            let g_adv = gradient_norm(&l_adv, var)?;
            adaptive_weight(g_rec, g_adv, 1e-4)?
        }
        None => 0.0,
    };
    let scalar = |t: &Tensor| -> Result<f64> {
        Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let diag = Stage3Diagnostics {
        l_s2: scalar(stage2_total)?,
        l_rec: scalar(&l_rec)?,
        l_per: scalar(&l_per)?,
        l_adv: scalar(&l_adv)?,
        lambda3,
    };
    let total = (((stage2_total + l_rec)? + l_per)? + (l_adv * lambda3)?)?;
    Ok((total, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lookup::LookupConfig;
    use crate::test_util::rand_tensor;
    use candle_core::Device;

    fn f32_vec(t: &Tensor) -> Vec<f32> {
        t.to_dtype(DType::F32)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
    }

    fn f64_vec(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
    }

    fn toy_stack(seed: u64) -> (VarStore, VqAutoencoder, CodePredictor, HpinModel) {
        let mut vs = VarStore::new(seed, DType::F32, Device::Cpu);
        let vq = VqAutoencoder::new(&mut vs, VqConfig::toy()).unwrap();
        let pred = CodePredictor::new(&mut vs, VqConfig::toy(), LookupConfig::toy()).unwrap();
        let hpin = HpinModel::new(&mut vs, "hpin", VqConfig::toy(), HpinConfig::toy()).unwrap();
        (vs, vq, pred, hpin)
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let mut vs = VarStore::new(1, DType::F32, Device::Cpu);
        let mcm = Mcm::new(&mut vs, "m", 8, 4, 2).unwrap();
        let m = rand_tensor((2, 8, 4, 4), 2, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let p = rand_tensor((2, 4, 4, 4), 3, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let probs = mcm.attention_probs(&m, &p).unwrap();
        assert_eq!(probs.dims(), &[2, 2, 16, 16]);
        let sums = f64_vec(&probs.sum(candle_core::D::Minus1).unwrap());
        for s in sums {
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
        assert!(f64_vec(&probs).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn fusion_is_invariant_to_joint_key_value_permutation() {
        let mut vs = VarStore::new(4, DType::F32, Device::Cpu);
        let mcm = Mcm::new(&mut vs, "m", 8, 6, 2).unwrap();
        let m = rand_tensor((1, 8, 3, 3), 5, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let p = rand_tensor((1, 6, 3, 3), 6, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let base = mcm.fuse(&m, &p).unwrap();
        // Permute the prior's spatial tokens; keys and values move together.
        let perm: Vec<u32> = vec![4, 0, 8, 2, 6, 1, 7, 3, 5];
        let idx = Tensor::from_vec(perm, 9, &Device::Cpu).unwrap();
        let p_perm = p
            .reshape((1, 6, 9))
            .unwrap()
            .index_select(&idx, 2)
            .unwrap()
            .reshape((1, 6, 3, 3))
            .unwrap();
        let permuted = mcm.fuse(&m, &p_perm).unwrap();
        let a = f64_vec(&base);
        let b = f64_vec(&permuted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn single_token_fusion_has_a_closed_form() {
        // With one spatial token the softmax weight is 1, so the fused
        // output minus the residual is norm(p)·Wv·Wo regardless of m.
        let mut vs = VarStore::new(7, DType::F32, Device::Cpu);
        let mcm = Mcm::new(&mut vs, "m", 8, 4, 2).unwrap();
        let p = rand_tensor((1, 4, 1, 1), 8, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let m1 = rand_tensor((1, 8, 1, 1), 9, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let m2 = rand_tensor((1, 8, 1, 1), 10, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let d1 = (mcm.fuse(&m1, &p).unwrap() - &m1).unwrap();
        let d2 = (mcm.fuse(&m2, &p).unwrap() - &m2).unwrap();
        let a = f64_vec(&d1);
        let b = f64_vec(&d2);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "pre-residual output depends on m: {x} vs {y}");
        }
    }

    #[test]
    fn fusion_rejects_mismatched_spatial_dims() {
        let mut vs = VarStore::new(11, DType::F32, Device::Cpu);
        let mcm = Mcm::new(&mut vs, "m", 8, 4, 2).unwrap();
        let m = rand_tensor((1, 8, 4, 4), 12, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let p = rand_tensor((1, 4, 2, 2), 13, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(mcm.fuse(&m, &p), Err(Error::Dimension(_))));
        assert!(matches!(
            Mcm::new(&mut vs, "m2", 9, 4, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn priors_halve_the_decoder_channels() {
        let (_vs, vq, _pred, hpin) = toy_stack(1);
        let f_c = rand_tensor((1, 32, 8, 8), 14, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let (img, acts) = vq.decoder.forward_with_activations(&f_c).unwrap();
        assert_eq!(img.dims(), &[1, 3, 64, 64]);
        assert_eq!(acts.len(), 3);
        let priors = hpin.extract_priors(&acts).unwrap();
        assert_eq!(priors.levels.len(), 3);
        for (act, prior) in acts.iter().zip(&priors.levels) {
            let (_, c_a, h_a, w_a) = act.dims4().unwrap();
            let (_, c_p, h_p, w_p) = prior.dims4().unwrap();
            assert_eq!(c_p, c_a / 2, "prior must halve the channel count");
            assert_eq!((h_p, w_p), (h_a, w_a), "spatial dims must match");
        }
        // Capturing twice in eval mode yields identical priors.
        let (_, acts2) = vq.decoder.forward_with_activations(&f_c).unwrap();
        let priors2 = hpin.extract_priors(&acts2).unwrap();
        for (a, b) in priors.levels.iter().zip(&priors2.levels) {
            assert_eq!(f32_vec(a), f32_vec(b));
        }
        assert!(matches!(
            hpin.extract_priors(&acts[..2]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn priors_carry_no_gradient_into_the_decoder() {
        let (vs, vq, _pred, hpin) = toy_stack(2);
        let f_c = rand_tensor((1, 32, 8, 8), 15, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let (_, acts) = vq.decoder.forward_with_activations(&f_c).unwrap();
        let priors = hpin.extract_priors(&acts).unwrap();
        let loss = priors.levels[0].sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let dh_final = vs.get(vq.decoder.final_layer_name()).unwrap();
        assert!(
            grads.get(dh_final.as_tensor()).is_none(),
            "decoder weights must sit behind the stop-gradient"
        );
        // The projection itself is trainable.
        let proj = vs.get("hpin.prior0.weight").unwrap();
        assert!(grads.get(proj.as_tensor()).is_some());
    }

    #[test]
    fn enhancement_preserves_shape_and_determinism() {
        let (_vs, vq, pred, hpin) = toy_stack(3);
        let x = crate::data::procedural_texture(64, 5);
        let out = hpin_decode(&x, &pred, &vq, &hpin).unwrap();
        assert_eq!((out.height(), out.width()), (64, 64));
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = hpin_decode(&x, &pred, &vq, &hpin).unwrap();
        assert_eq!(out.data(), again.data());
    }

    #[test]
    fn enhancement_failures_carry_a_stage_label() {
        let (_vs, vq, pred, hpin) = toy_stack(4);
        // 60 is not divisible by the downsampling factor 8.
        let bad = crate::ImageTensor::new(60, 64, vec![0.5; 3 * 60 * 64]).unwrap();
        let err = hpin_decode(&bad, &pred, &vq, &hpin).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("encode"), "missing stage label in: {msg}");
    }

    #[test]
    fn stage3_loss_terms_collapse_on_a_perfect_output() {
        let dev = Device::Cpu;
        let mut dvs = VarStore::new(5, DType::F32, dev.clone());
        let disc = crate::losses::Discriminator::new(&mut dvs, "d", 8).unwrap();
        let fx = crate::losses::FeatureExtractor::random_fixed(0, DType::F32, &dev).unwrap();
        let x = rand_tensor((1, 3, 32, 32), 16, 0.0, 1.0, DType::F32, &dev).unwrap();
        let s2 = Tensor::full(0.75f32, (), &dev).unwrap();
        let (total, diag) = stage3_loss(&x, &x, &s2, &disc, &fx, None).unwrap();
        assert_eq!(diag.l_rec, 0.0);
        assert_eq!(diag.l_per, 0.0);
        assert_eq!(diag.lambda3, 0.0);
        assert!((diag.l_s2 - 0.75).abs() < 1e-7);
        let t = total.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        assert!((t - 0.75).abs() < 1e-6, "total {t}");
    }

    #[test]
    fn stage3_adaptive_weight_reads_the_output_head() {
        let dev = Device::Cpu;
        let (vs, vq, pred, hpin) = toy_stack(6);
        let mut dvs = VarStore::new(7, DType::F32, dev.clone());
        let disc = crate::losses::Discriminator::new(&mut dvs, "d", 8).unwrap();
        let fx = crate::losses::FeatureExtractor::random_fixed(0, DType::F32, &dev).unwrap();
        let x = crate::data::procedural_texture(64, 8)
            .to_tensor(DType::F32, &dev)
            .unwrap()
            .unsqueeze(0)
            .unwrap();
        let f_l = pred.encode_lq(&x).unwrap();
        let codes = pred.predict_codes(&x).unwrap();
        let f_c = gather_codes(&codes, vq.codebook()).unwrap();
        let (_, acts) = vq.decoder.forward_with_activations(&f_c).unwrap();
        let priors = hpin.extract_priors(&acts).unwrap();
        let x_hat = hpin.forward(&f_l, &priors).unwrap();
        let s2 = Tensor::zeros((), DType::F32, &dev).unwrap();
        let head = vs.get(hpin.final_layer_name()).unwrap();
        let (_, diag) = stage3_loss(&x, &x_hat, &s2, &disc, &fx, Some(head)).unwrap();
        assert!(diag.lambda3 > 0.0, "adaptive weight {}", diag.lambda3);
        assert!(diag.lambda3 <= crate::losses::ADAPTIVE_WEIGHT_CLAMP);
    }

    #[test]
    fn hpin_config_validation_catches_shape_mismatches() {
        let mut vs = VarStore::new(8, DType::F32, Device::Cpu);
        let mut cfg = HpinConfig::toy();
        cfg.scales = 5;
        assert!(HpinModel::new(&mut vs, "h1", VqConfig::toy(), cfg).is_err());
        let mut cfg = HpinConfig::toy();
        cfg.heads = vec![4, 2];
        assert!(HpinModel::new(&mut vs, "h2", VqConfig::toy(), cfg).is_err());
        // Wrong prior count at forward time.
        let (_vs2, _vq, _pred, hpin) = toy_stack(9);
        let f_l = rand_tensor((1, 32, 8, 8), 17, -1.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        let empty = PriorPyramid { levels: Vec::new() };
        assert!(hpin.forward(&f_l, &empty).is_err());
    }
}
