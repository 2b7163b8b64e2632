//! Stage II: Transformer-based code-sequence prediction.
//!
//! A second encoder `E_L`, initialized from the Stage I encoder, embeds a
//! degraded image. A Transformer over the latent token grid then predicts
//! the high-quality code index for each position, so decoding can bypass
//! the unreliable nearest-neighbor match on degraded features.

use candle_core::{DType, Tensor};
use candle_nn::{LayerNorm, Linear, Module};

use crate::error::{Error, Result};
use crate::nn::{layer_norm, linear, Init, TransformerBlock, VarStore};
use crate::vq::{Encoder, VqConfig};

/// Stage II model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LookupConfig {
    pub layers: usize,
    pub heads: usize,
    /// Largest latent grid the positional embedding covers.
    pub max_grid: (usize, usize),
    /// Weight of the cross-entropy term in the total loss.
    pub lambda2: f64,
}

impl LookupConfig {
    pub fn toy() -> Self {
        Self {
            layers: 4,
            heads: 4,
            max_grid: (8, 8),
            lambda2: 0.5,
        }
    }

    pub fn paper() -> Self {
        Self {
            layers: 9,
            heads: 8,
            max_grid: (16, 16),
            lambda2: 0.5,
        }
    }
}

/// The code predictor: `E_L` plus a Transformer head over latent tokens.
pub struct CodePredictor {
    pub encoder: Encoder,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
    pub cfg: LookupConfig,
    pub vq_cfg: VqConfig,
}

impl CodePredictor {
    /// Name prefix of the degraded-image encoder's variables.
    pub const ENCODER_PREFIX: &'static str = "el.";
    /// Prefix of the Stage I encoder it is initialized from.
    pub const SOURCE_PREFIX: &'static str = "eh.";

    pub fn new(vs: &mut VarStore, vq_cfg: VqConfig, cfg: LookupConfig) -> Result<Self> {
        if vq_cfg.d % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "latent dim {} not divisible by {} heads",
                vq_cfg.d, cfg.heads
            )));
        }
        let encoder = Encoder::new(vs, "el", &vq_cfg)?;
        let (mu, mv) = cfg.max_grid;
        let pos = vs.var(
            "lookup.pos",
            (mu * mv, vq_cfg.d),
            Init::Normal { std: 0.02 },
        )?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            blocks.push(TransformerBlock::new(
                vs,
                &format!("lookup.blk{i}"),
                vq_cfg.d,
                cfg.heads,
            )?);
        }
        Ok(Self {
            encoder,
            pos,
            blocks,
            ln_f: layer_norm(vs, "lookup.ln_f", vq_cfg.d)?,
            head: linear(vs, "lookup.head", vq_cfg.d, vq_cfg.n, true)?,
            cfg,
            vq_cfg,
        })
    }

    /// Copies the Stage I encoder weights into `E_L`. Call once after both
    /// models exist in the same store, before Stage II training.
    pub fn init_from_stage1(&self, vs: &VarStore) -> Result<()> {
        let copied = vs.copy_within(Self::SOURCE_PREFIX, Self::ENCODER_PREFIX)?;
        if copied == 0 {
            return Err(Error::State(
                "no Stage I encoder weights found to initialize the lookup encoder".into(),
            ));
        }
        Ok(())
    }

    /// Embeds a degraded image into the latent grid `F_l`, `(B, d, u, v)`.
    pub fn encode_lq(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    fn pos_slice(&self, u: usize, v: usize) -> Result<Tensor> {
        let (mu, mv) = self.cfg.max_grid;
        if u > mu || v > mv {
            return Err(Error::dim(format!(
                "latent grid {u}x{v} exceeds positional embedding {mu}x{mv}"
            )));
        }
        let mut idx = Vec::with_capacity(u * v);
        for r in 0..u {
            for c in 0..v {
                idx.push((r * mv + c) as u32);
            }
        }
        let idx = Tensor::from_vec(idx, u * v, self.pos.device())?;
        Ok(self.pos.index_select(&idx, 0)?)
    }

    /// Per-token code logits from a latent grid: `(B, d, u, v)` ->
    /// `(B, u, v, N)`.
    pub fn logits_from_latent(&self, f_l: &Tensor) -> Result<Tensor> {
        let (b, d, u, v) = f_l.dims4()?;
        let mut tokens = f_l
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((b, u * v, d))?;
        tokens = tokens.broadcast_add(&self.pos_slice(u, v)?.unsqueeze(0)?)?;
        for blk in &self.blocks {
            tokens = blk.forward(&tokens, Some((u, v)))?;
        }
        let tokens = self.ln_f.forward(&tokens)?;
        Ok(self.head.forward(&tokens)?.reshape((b, u, v, self.vq_cfg.n))?)
    }

    /// Full prediction path: degraded image -> code logits and `F_l`.
    pub fn forward(&self, x_lq: &Tensor) -> Result<(Tensor, Tensor)> {
        let f_l = self.encode_lq(x_lq)?;
        let logits = self.logits_from_latent(&f_l)?;
        Ok((logits, f_l))
    }

    /// Argmax code grid `(B, u, v)` u32; ties take the smallest index.
    pub fn predict_codes(&self, x_lq: &Tensor) -> Result<Tensor> {
        let (logits, _) = self.forward(x_lq)?;
        argmax_codes(&logits)
    }
}

/// Row-wise argmax over the last axis of `(B, u, v, N)` logits, with ties
/// resolved to the smallest index.
pub fn argmax_codes(logits: &Tensor) -> Result<Tensor> {
    let (b, u, v, n) = logits.dims4()?;
    let rows = logits
        .to_dtype(DType::F32)?
        .reshape((b * u * v, n))?
        .to_vec2::<f32>()?;
    let mut out = Vec::with_capacity(b * u * v);
    for row in &rows {
        let mut best = 0usize;
        let mut best_v = row[0];
        for (i, &x) in row.iter().enumerate().skip(1) {
            if x > best_v {
                best = i;
                best_v = x;
            }
        }
        out.push(best as u32);
    }
    Ok(Tensor::from_vec(out, (b, u, v), logits.device())?)
}

/// Mean token cross-entropy (natural log) of `(B, u, v, N)` logits against
/// a `(B, u, v)` u32 target grid.
pub fn code_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (b, u, v, n) = logits.dims4()?;
    let (tb, tu, tv) = targets.dims3()?;
    if (tb, tu, tv) != (b, u, v) {
        return Err(Error::dim("code_cross_entropy: grid shape mismatch"));
    }
    let flat = logits.reshape((b * u * v, n))?;
    let log_probs = candle_nn::ops::log_softmax(&flat, 1)?;
    let tgt = targets.reshape(b * u * v)?;
    let picked = log_probs
        .gather(&tgt.unsqueeze(1)?.to_dtype(DType::U32)?, 1)?
        .squeeze(1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Per-term diagnostics of the Stage II objective.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Diagnostics {
    pub l_qf: f64,
    pub l_ce: f64,
    /// Fraction of tokens whose argmax matches the target code.
    pub token_accuracy: f64,
}

/// Stage II loss `L_qf + λ₂·L_ce` where `L_qf = ‖F_l − SG(F_c)‖²` (mean
/// convention) pulls the degraded-image features toward the quantized
/// targets, and `L_ce` supervises the predicted code distribution.
pub fn stage2_loss(
    logits: &Tensor,
    target_codes: &Tensor,
    f_l: &Tensor,
    f_c: &Tensor,
    lambda2: f64,
) -> Result<(Tensor, Stage2Diagnostics)> {
    if f_l.shape() != f_c.shape() {
        return Err(Error::dim("stage2_loss: latent shape mismatch"));
    }
    let l_qf = (f_l - f_c.detach())?.sqr()?.mean_all()?;
    let l_ce = code_cross_entropy(logits, target_codes)?;
    let pred = argmax_codes(logits)?.flatten_all()?.to_vec1::<u32>()?;
    let tgt = target_codes.flatten_all()?.to_vec1::<u32>()?;
    let hits = pred.iter().zip(&tgt).filter(|(a, b)| a == b).count();
    let diag = Stage2Diagnostics {
        l_qf: l_qf.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        l_ce: l_ce.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        token_accuracy: hits as f64 / tgt.len() as f64,
    };
    let total = (&l_qf + (&l_ce * lambda2)?)?;
    Ok((total, diag))
}
