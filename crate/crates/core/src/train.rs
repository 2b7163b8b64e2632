//! Optimizer, schedules and the three-stage training loops.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{ImageTensor, TrainingPair};
use crate::error::{Error, Result};
use crate::fusion::{HpinConfig, HpinModel};
use crate::lookup::{CodePredictor, LookupConfig};
use crate::losses::{
    adaptive_weight, adversarial_pair_losses, adversarial_value, gradient_norm,
    perceptual_distance, reconstruction_l1, Discriminator, FeatureExtractor,
};
use crate::nn::VarStore;
use crate::vq::{code_level_loss, straight_through_combine, VqAutoencoder, VqConfig};

/// Adam with explicit, serializable state.
pub struct Adam {
    params: Vec<Var>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: Vec<Var>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            params,
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        if self.m.is_empty() {
            for p in &self.params {
                self.m.push(p.as_tensor().zeros_like()?);
                self.v.push(p.as_tensor().zeros_like()?);
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else {
                continue;
            };
            // detached, otherwise the moment buffers would keep every
            // step's computation graph alive
            let g = g.detach();
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            p.set(&(p.as_tensor() - update)?)?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }

    /// Serializes step count and moment estimates, little-endian f32.
    pub fn state_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for t in self.m.iter().chain(self.v.iter()) {
            let vals = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            out.extend_from_slice(&(vals.len() as u64).to_le_bytes());
            for x in vals {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn load_state(&mut self, bytes: &[u8]) -> Result<()> {
        let u64_at = |o: usize| -> Result<u64> {
            bytes
                .get(o..o + 8)
                .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
                .ok_or_else(|| Error::Format("optimizer state truncated".into()))
        };
        self.step = u64_at(0)?;
        let n = u64_at(8)? as usize;
        if n != self.params.len() {
            return Err(Error::State(format!(
                "optimizer state holds {n} tensors, model has {}",
                self.params.len()
            )));
        }
        let mut off = 16;
        let mut read_tensors = |expect_shapes: bool| -> Result<Vec<Tensor>> {
            let mut out = Vec::with_capacity(n);
            for (i, p) in self.params.iter().enumerate() {
                let len = u64_at(off)? as usize;
                off += 8;
                if expect_shapes && len != p.elem_count() {
                    return Err(Error::State(format!(
                        "optimizer state tensor {i} has {len} elements, parameter has {}",
                        p.elem_count()
                    )));
                }
                let slice = bytes
                    .get(off..off + 4 * len)
                    .ok_or_else(|| Error::Format("optimizer state truncated".into()))?;
                off += 4 * len;
                let vals: Vec<f32> = slice
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = Tensor::from_vec(vals, p.shape(), p.device())?.to_dtype(p.dtype())?;
                out.push(t);
            }
            Ok(out)
        };
        self.m = read_tensors(true)?;
        self.v = read_tensors(true)?;
        Ok(())
    }
}

/// Cosine decay from `base` to `floor` over `total` steps.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        return floor;
    }
    let t = step as f64 / total as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Constant rate halved at 80% and again at 90% of the schedule.
pub fn step_decay_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step as f64 / total as f64;
    if t >= 0.9 {
        base * 0.25
    } else if t >= 0.8 {
        base * 0.5
    } else {
        base
    }
}

/// Per-stage schedule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageSchedule {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Steps before the adversarial term switches on (stages 1 and 3).
    pub adv_warmup: usize,
}

/// Full run configuration. Hashing its TOML form ties checkpoints to the
/// settings that produced them.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub vq: VqConfig,
    pub lookup: LookupConfig,
    pub hpin: HpinConfig,
    pub patch_size: usize,
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    pub stage3: StageSchedule,
    /// Interval for re-seeding codebook entries that went unused.
    pub reinit_interval: usize,
    /// Steps between validation passes.
    pub eval_interval: usize,
    /// Validation passes without improvement before stopping a stage.
    pub patience: usize,
}

impl RunConfig {
    /// Desk-scale settings: minutes, not GPU-days.
    pub fn toy(seed: u64) -> Self {
        Self {
            profile: "toy".into(),
            seed,
            vq: VqConfig::toy(),
            lookup: LookupConfig::toy(),
            hpin: HpinConfig::toy(),
            patch_size: 64,
            stage1: StageSchedule {
                steps: 160,
                batch: 4,
                lr: 2e-3,
                adv_warmup: 120,
            },
            stage2: StageSchedule {
                steps: 120,
                batch: 4,
                lr: 1e-3,
                adv_warmup: 0,
            },
            stage3: StageSchedule {
                steps: 40,
                batch: 2,
                lr: 1e-3,
                adv_warmup: 30,
            },
            reinit_interval: 40,
            eval_interval: 20,
            patience: 4,
        }
    }

    /// Published-scale settings; listed for completeness, not desk-runnable.
    pub fn paper(seed: u64) -> Self {
        Self {
            profile: "paper".into(),
            seed,
            vq: VqConfig::paper(),
            lookup: LookupConfig::paper(),
            hpin: HpinConfig::paper(),
            patch_size: 256,
            stage1: StageSchedule {
                steps: 500_000,
                batch: 8,
                lr: 1e-5,
                adv_warmup: 1000,
            },
            stage2: StageSchedule {
                steps: 300_000,
                batch: 8,
                lr: 1e-5,
                adv_warmup: 0,
            },
            stage3: StageSchedule {
                steps: 200_000,
                batch: 2,
                lr: 1e-5,
                adv_warmup: 1000,
            },
            reinit_interval: 2000,
            eval_interval: 5000,
            patience: 10,
        }
    }

    pub fn by_profile(profile: &str, seed: u64) -> Result<Self> {
        match profile {
            "toy" => Ok(Self::toy(seed)),
            "paper" => Ok(Self::paper(seed)),
            other => Err(Error::Config(format!("unknown profile '{other}'"))),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }
}

/// All three stage models over one shared variable store.
pub struct Pipeline {
    pub vs: VarStore,
    pub vq: VqAutoencoder,
    pub predictor: CodePredictor,
    pub hpin: HpinModel,
    pub cfg: RunConfig,
}

impl Pipeline {
    pub fn new(cfg: &RunConfig, device: &Device) -> Result<Self> {
        let mut vs = VarStore::new(cfg.seed, DType::F32, device.clone());
        let vq = VqAutoencoder::new(&mut vs, cfg.vq)?;
        let predictor = CodePredictor::new(&mut vs, cfg.vq, cfg.lookup)?;
        let hpin = HpinModel::new(&mut vs, "hpin", cfg.vq, cfg.hpin.clone())?;
        Ok(Self {
            vs,
            vq,
            predictor,
            hpin,
            cfg: cfg.clone(),
        })
    }
}

/// Variables whose names start with any of the given prefixes.
pub fn vars_with_prefixes(vs: &VarStore, prefixes: &[&str]) -> Vec<Var> {
    vs.all_vars()
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(_, v)| v.clone())
        .collect()
}

pub const STAGE1_PREFIXES: [&str; 3] = ["eh.", "dh.", "codebook"];
pub const STAGE2_PREFIXES: [&str; 2] = ["el.", "lookup."];
pub const STAGE3_PREFIXES: [&str; 3] = ["el.", "lookup.", "hpin."];

/// Outcome of one stage's training.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: usize,
    pub losses: Vec<f64>,
    pub early_stopped: bool,
    pub best_val: Option<f64>,
    /// (step, score) for each validation pass; stage-specific scale,
    /// lower is better.
    pub val_history: Vec<(usize, f64)>,
}

fn stack_images(images: &[&ImageTensor], dtype: DType, dev: &Device) -> Result<Tensor> {
    let parts = images
        .iter()
        .map(|img| Ok(img.to_tensor(dtype, dev)?.unsqueeze(0)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

fn sample_batch<'a, T>(rng: &mut ChaCha12Rng, items: &'a [T], batch: usize) -> Vec<&'a T> {
    (0..batch).map(|_| &items[rng.gen_range(0..items.len())]).collect()
}

struct EarlyStop {
    best: f64,
    since_best: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            since_best: 0,
            patience,
        }
    }

    /// Feeds one validation value (lower is better); true means stop.
    fn update(&mut self, val: f64) -> bool {
        if val < self.best - 1e-6 {
            self.best = val;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.patience > 0 && self.since_best >= self.patience
    }
}

/// Re-seeds codebook rows whose usage count stayed zero with random tokens
/// from the current batch of encoder outputs. Returns how many rows moved.
pub fn reinit_dead_codes(
    codebook: &Var,
    counts: &[u64],
    f_h: &Tensor,
    rng: &mut ChaCha12Rng,
) -> Result<usize> {
    let (n, d) = codebook.as_tensor().dims2()?;
    if counts.len() != n {
        return Err(Error::dim("usage counts do not match codebook size"));
    }
    let dead: Vec<usize> = (0..n).filter(|&i| counts[i] == 0).collect();
    if dead.is_empty() {
        return Ok(0);
    }
    let (b, dd, u, v) = f_h.dims4()?;
    if dd != d {
        return Err(Error::dim("latent dim does not match codebook"));
    }
    let tokens = f_h
        .detach()
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .reshape((b * u * v, d))?
        .to_dtype(DType::F32)?
        .to_vec2::<f32>()?;
    let mut rows = codebook
        .as_tensor()
        .to_dtype(DType::F32)?
        .to_vec2::<f32>()?;
    for &i in &dead {
        let tok = &tokens[rng.gen_range(0..tokens.len())];
        rows[i].copy_from_slice(tok);
    }
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let new = Tensor::from_vec(flat, (n, d), codebook.device())?.to_dtype(codebook.dtype())?;
    codebook.set(&new)?;
    Ok(dead.len())
}

/// How often the adaptive adversarial weight is re-measured. The two extra
/// backward passes it costs are not worth paying every step.
const ADAPTIVE_EVERY: usize = 5;

/// Stage I: trains encoder, decoder and codebook on high-quality patches.
pub fn train_stage1(
    p: &Pipeline,
    patches: &[ImageTensor],
    val: &[ImageTensor],
) -> Result<TrainReport> {
    if patches.is_empty() {
        return Err(Error::Data("stage 1: empty training set".into()));
    }
    let sched = p.cfg.stage1;
    let dev = p.vs.device().clone();
    let dtype = DType::F32;
    let fx = FeatureExtractor::random_fixed(crate::metrics::PROXY_SEED, dtype, &dev)?;
    let mut disc_vs = VarStore::new(p.cfg.seed ^ 0xd15c, dtype, dev.clone());
    let mut disc = Discriminator::new(&mut disc_vs, "disc", 16)?;
    let mut gen_opt = Adam::new(
        vars_with_prefixes(&p.vs, &STAGE1_PREFIXES),
        sched.lr,
        0.9,
        0.999,
        1e-8,
    );
    let mut disc_opt = Adam::new(disc_vs.trainable(), sched.lr, 0.9, 0.999, 1e-8);
    let final_layer = p
        .vs
        .get(p.vq.decoder.final_layer_name())
        .ok_or_else(|| Error::State("decoder final layer variable missing".into()))?
        .clone();
    let mut rng = ChaCha12Rng::seed_from_u64(p.cfg.seed ^ 0x51a6e1);
    let mut losses = Vec::with_capacity(sched.steps);
    let mut usage = vec![0u64; p.cfg.vq.n];
    let mut lambda1 = 0.0f64;
    let mut stopper = EarlyStop::new(p.cfg.patience);
    let mut early_stopped = false;
    let mut steps_run = 0;
    let mut val_history = Vec::new();
    for step in 0..sched.steps {
        gen_opt.set_lr(cosine_lr(sched.lr, sched.lr * 0.1, step, sched.steps));
        let batch = sample_batch(&mut rng, patches, sched.batch);
        let x = stack_images(&batch, dtype, &dev)?;
        let f_h = p.vq.encode_hq(&x)?;
        let (f_c, grid) = p.vq.quantize(&f_h)?;
        for id in grid.flatten_all()?.to_vec1::<u32>()? {
            usage[id as usize] += 1;
        }
        let ste = straight_through_combine(&f_h, &f_c)?;
        let xbar = p.vq.decode_hq(&ste)?;
        let l_rec = reconstruction_l1(&x, &xbar)?;
        let l_per = perceptual_distance(&x, &xbar, &fx)?;
        let l_cl = code_level_loss(&f_h, &f_c, p.cfg.vq.alpha)?;
        let adv_on = step >= sched.adv_warmup;
        let mut total = ((&l_rec + &l_per)? + &l_cl)?;
        if adv_on {
            if step % ADAPTIVE_EVERY == 0 || lambda1 == 0.0 {
                let l_adv = adversarial_value(&disc, &x, &xbar)?;
                let g_rec = gradient_norm(&l_rec, &final_layer)?;
                let g_adv = gradient_norm(&l_adv, &final_layer)?;
                lambda1 = adaptive_weight(g_rec, g_adv, 1e-4)?;
            }
            let (_, gen_adv) = adversarial_pair_losses(&disc, &x, &xbar)?;
            total = (total + (gen_adv * lambda1)?)?;
        }
        let grads = total.backward()?;
        gen_opt.step(&grads)?;
        losses.push(total.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        if adv_on {
            let (disc_loss, _) = adversarial_pair_losses(&disc, &x, &xbar.detach())?;
            let dgrads = disc_loss.backward()?;
            disc_opt.step(&dgrads)?;
            disc.power_iterate()?;
        }
        if p.cfg.reinit_interval > 0 && (step + 1) % p.cfg.reinit_interval == 0 {
            reinit_dead_codes(
                p.vs.get(VqAutoencoder::CODEBOOK_VAR).unwrap(),
                &usage,
                &f_h,
                &mut rng,
            )?;
            usage.iter_mut().for_each(|c| *c = 0);
        }
        steps_run = step + 1;
        if !val.is_empty() && p.cfg.eval_interval > 0 && (step + 1) % p.cfg.eval_interval == 0 {
            let v = validate_stage1(p, val)?;
            val_history.push((step + 1, v));
            if stopper.update(v) {
                early_stopped = true;
                break;
            }
        }
    }
    Ok(TrainReport {
        steps_run,
        losses,
        early_stopped,
        best_val: if stopper.best.is_finite() { Some(stopper.best) } else { None },
        val_history,
    })
}

/// Mean reconstruction L1 over a validation set.
pub fn validate_stage1(p: &Pipeline, val: &[ImageTensor]) -> Result<f64> {
    let dev = p.vs.device().clone();
    let mut sum = 0.0;
    for img in val {
        let x = img.to_tensor(DType::F32, &dev)?.unsqueeze(0)?;
        let f_h = p.vq.encode_hq(&x)?;
        let (f_c, _) = p.vq.quantize(&f_h)?;
        let xbar = p.vq.decode_hq(&f_c)?;
        sum += reconstruction_l1(&x, &xbar)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
    }
    Ok(sum / val.len() as f64)
}

/// Stage II: trains the lookup encoder and Transformer on degraded/clean
/// pairs while codebook and decoder stay frozen. Call
/// [`CodePredictor::init_from_stage1`] first.
pub fn train_stage2(
    p: &Pipeline,
    pairs: &[TrainingPair],
    val: &[TrainingPair],
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::Data("stage 2: empty training set".into()));
    }
    let sched = p.cfg.stage2;
    let dev = p.vs.device().clone();
    let mut opt = Adam::new(
        vars_with_prefixes(&p.vs, &STAGE2_PREFIXES),
        sched.lr,
        0.9,
        0.999,
        1e-8,
    );
    let mut rng = ChaCha12Rng::seed_from_u64(p.cfg.seed ^ 0x51a6e2);
    let mut losses = Vec::with_capacity(sched.steps);
    let mut stopper = EarlyStop::new(p.cfg.patience);
    let mut early_stopped = false;
    let mut steps_run = 0;
    let mut val_history = Vec::new();
    for step in 0..sched.steps {
        opt.set_lr(step_decay_lr(sched.lr, step, sched.steps));
        let batch = sample_batch(&mut rng, pairs, sched.batch);
        let lq: Vec<&ImageTensor> = batch.iter().map(|pr| &pr.lq).collect();
        let hq: Vec<&ImageTensor> = batch.iter().map(|pr| &pr.hq).collect();
        let x_lq = stack_images(&lq, DType::F32, &dev)?;
        let x_hq = stack_images(&hq, DType::F32, &dev)?;
        let f_h = p.vq.encode_hq(&x_hq)?.detach();
        let (f_c, grid) = p.vq.quantize(&f_h)?;
        let (logits, f_l) = p.predictor.forward(&x_lq)?;
        let (total, _) =
            crate::lookup::stage2_loss(&logits, &grid, &f_l, &f_c.detach(), p.cfg.lookup.lambda2)?;
        let grads = total.backward()?;
        opt.step(&grads)?;
        losses.push(total.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        steps_run = step + 1;
        if !val.is_empty() && p.cfg.eval_interval > 0 && (step + 1) % p.cfg.eval_interval == 0 {
            let v = validate_stage2(p, val)?;
            val_history.push((step + 1, v));
            if stopper.update(v) {
                early_stopped = true;
                break;
            }
        }
    }
    Ok(TrainReport {
        steps_run,
        losses,
        early_stopped,
        best_val: if stopper.best.is_finite() { Some(stopper.best) } else { None },
        val_history,
    })
}

/// Negative token accuracy over a validation set (lower is better).
pub fn validate_stage2(p: &Pipeline, val: &[TrainingPair]) -> Result<f64> {
    let dev = p.vs.device().clone();
    let mut hits = 0usize;
    let mut total = 0usize;
    for pair in val {
        let x_lq = pair.lq.to_tensor(DType::F32, &dev)?.unsqueeze(0)?;
        let x_hq = pair.hq.to_tensor(DType::F32, &dev)?.unsqueeze(0)?;
        let f_h = p.vq.encode_hq(&x_hq)?;
        let (_, grid) = p.vq.quantize(&f_h)?;
        let pred = p.predictor.predict_codes(&x_lq)?;
        let a = pred.flatten_all()?.to_vec1::<u32>()?;
        let b = grid.flatten_all()?.to_vec1::<u32>()?;
        hits += a.iter().zip(&b).filter(|(x, y)| x == y).count();
        total += b.len();
    }
    Ok(-(hits as f64) / total as f64)
}

/// Stage III: trains the enhancement network (and fine-tunes the lookup
/// path) while codebook and decoder stay frozen.
pub fn train_stage3(
    p: &Pipeline,
    pairs: &[TrainingPair],
    val: &[TrainingPair],
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::Data("stage 3: empty training set".into()));
    }
    let sched = p.cfg.stage3;
    let dev = p.vs.device().clone();
    let dtype = DType::F32;
    let fx = FeatureExtractor::random_fixed(crate::metrics::PROXY_SEED, dtype, &dev)?;
    let mut disc_vs = VarStore::new(p.cfg.seed ^ 0xd15c3, dtype, dev.clone());
    let mut disc = Discriminator::new(&mut disc_vs, "disc", 16)?;
    let mut opt = Adam::new(
        vars_with_prefixes(&p.vs, &STAGE3_PREFIXES),
        sched.lr,
        0.9,
        0.999,
        1e-8,
    );
    let mut disc_opt = Adam::new(disc_vs.trainable(), sched.lr, 0.9, 0.999, 1e-8);
    let final_layer = p
        .vs
        .get(p.hpin.final_layer_name())
        .ok_or_else(|| Error::State("enhancement head variable missing".into()))?
        .clone();
    let mut rng = ChaCha12Rng::seed_from_u64(p.cfg.seed ^ 0x51a6e3);
    let mut losses = Vec::with_capacity(sched.steps);
    let mut lambda3 = 0.0f64;
    let mut stopper = EarlyStop::new(p.cfg.patience);
    let mut early_stopped = false;
    let mut steps_run = 0;
    let mut val_history = Vec::new();
    for step in 0..sched.steps {
        let batch = sample_batch(&mut rng, pairs, sched.batch);
        let lq: Vec<&ImageTensor> = batch.iter().map(|pr| &pr.lq).collect();
        let hq: Vec<&ImageTensor> = batch.iter().map(|pr| &pr.hq).collect();
        let x_lq = stack_images(&lq, dtype, &dev)?;
        let x = stack_images(&hq, dtype, &dev)?;
        let f_h = p.vq.encode_hq(&x)?.detach();
        let (f_c, grid) = p.vq.quantize(&f_h)?;
        let (logits, f_l) = p.predictor.forward(&x_lq)?;
        let (l_s2, _) =
            crate::lookup::stage2_loss(&logits, &grid, &f_l, &f_c.detach(), p.cfg.lookup.lambda2)?;
        // Decode the ground-truth codes through the frozen decoder; its
        // activations enter the priors detached.
        let (_, acts) = p.vq.decoder.forward_with_activations(&f_c.detach())?;
        let priors = p.hpin.extract_priors(&acts)?;
        let x_hat = p.hpin.forward(&f_l, &priors)?;
        let l_rec = reconstruction_l1(&x, &x_hat)?;
        let l_per = perceptual_distance(&x, &x_hat, &fx)?;
        let adv_on = step >= sched.adv_warmup;
        let mut total = ((l_s2 + &l_rec)? + l_per)?;
        if adv_on {
            if step % ADAPTIVE_EVERY == 0 || lambda3 == 0.0 {
                let l_adv = adversarial_value(&disc, &x, &x_hat)?;
                let g_rec = gradient_norm(&l_rec, &final_layer)?;
                let g_adv = gradient_norm(&l_adv, &final_layer)?;
                lambda3 = adaptive_weight(g_rec, g_adv, 1e-4)?;
            }
            let (_, gen_adv) = adversarial_pair_losses(&disc, &x, &x_hat)?;
            total = (total + (gen_adv * lambda3)?)?;
        }
        let grads = total.backward()?;
        opt.step(&grads)?;
        losses.push(total.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        if adv_on {
            let (disc_loss, _) = adversarial_pair_losses(&disc, &x, &x_hat.detach())?;
            let dgrads = disc_loss.backward()?;
            disc_opt.step(&dgrads)?;
            disc.power_iterate()?;
        }
        steps_run = step + 1;
        if !val.is_empty() && p.cfg.eval_interval > 0 && (step + 1) % p.cfg.eval_interval == 0 {
            let v = validate_stage3(p, val)?;
            val_history.push((step + 1, v));
            if stopper.update(v) {
                early_stopped = true;
                break;
            }
        }
    }
    Ok(TrainReport {
        steps_run,
        losses,
        early_stopped,
        best_val: if stopper.best.is_finite() { Some(stopper.best) } else { None },
        val_history,
    })
}

/// Mean enhanced-image L1 against ground truth over a validation set.
pub fn validate_stage3(p: &Pipeline, val: &[TrainingPair]) -> Result<f64> {
    let mut sum = 0.0;
    for pair in val {
        let out = crate::fusion::hpin_decode(&pair.lq, &p.predictor, &p.vq, &p.hpin)?;
        let dev = p.vs.device().clone();
        let a = pair.hq.to_tensor(DType::F32, &dev)?.unsqueeze(0)?;
        let b = out.to_tensor(DType::F32, &dev)?.unsqueeze(0)?;
        sum += reconstruction_l1(&a, &b)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
    }
    Ok(sum / val.len() as f64)
}
