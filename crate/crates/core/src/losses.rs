//! Shared loss machinery: L1 reconstruction, fixed-feature perceptual
//! distance, patch discriminator with the paired adversarial objectives and
//! the adaptive weight formula used by stages I and III.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, Module};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{SpectralConv2d, VarStore};

/// Upper clamp applied to the adaptive adversarial weight.
pub const ADAPTIVE_WEIGHT_CLAMP: f64 = 1e4;
const PROB_EPS: f64 = 1e-6;

/// Fixed (non-trainable) convolutional feature stack standing in for a
/// pretrained perceptual network. Five stride-2 stages; features are tapped
/// after stages 2, 3 and 4.
pub struct FeatureExtractor {
    convs: Vec<Conv2d>,
    taps: Vec<usize>,
}

impl FeatureExtractor {
    pub const WIDTHS: [usize; 5] = [16, 32, 32, 64, 64];

    /// Builds the extractor with fixed, seeded random weights.
    pub fn random_fixed(seed: u64, dtype: DType, dev: &Device) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut in_c = 3;
        for &out_c in Self::WIDTHS.iter() {
            let fan_in = in_c * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let n = out_c * in_c * 9;
            let mut w = Vec::with_capacity(n);
            while w.len() < n {
                let u1: f64 = rng.gen_range(1e-12f64..1.0);
                let u2: f64 = rng.gen_range(0.0f64..1.0);
                let r = (-2.0 * u1.ln()).sqrt();
                w.push(std * r * (std::f64::consts::TAU * u2).cos());
            }
            let weight = Tensor::from_vec(w, (out_c, in_c, 3, 3), dev)?.to_dtype(dtype)?;
            convs.push(Conv2d::new(
                weight,
                None,
                Conv2dConfig {
                    padding: 1,
                    stride: 2,
                    dilation: 1,
                    groups: 1,
                    cudnn_fwd_algo: None,
                },
            ));
            in_c = out_c;
        }
        Ok(Self {
            convs,
            taps: vec![1, 2, 3], // zero-based: after stages 2, 3, 4
        })
    }

    /// Loads extractor weights from a safetensors blob (tensor names
    /// `fx.0.weight` .. `fx.4.weight`).
    pub fn from_file(path: &Path, dtype: DType, dev: &Device) -> Result<Self> {
        let map = candle_core::safetensors::load(path, dev)?;
        let mut convs = Vec::new();
        for i in 0..Self::WIDTHS.len() {
            let name = format!("fx.{i}.weight");
            let w = map
                .get(&name)
                .ok_or_else(|| Error::State(format!("feature extractor blob missing '{name}'")))?
                .to_dtype(dtype)?;
            convs.push(Conv2d::new(
                w,
                None,
                Conv2dConfig {
                    padding: 1,
                    stride: 2,
                    dilation: 1,
                    groups: 1,
                    cudnn_fwd_algo: None,
                },
            ));
        }
        Ok(Self {
            convs,
            taps: vec![1, 2, 3],
        })
    }

    /// Tap-layer features for a `(B, 3, H, W)` batch.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            h = candle_nn::ops::leaky_relu(&conv.forward(&h)?, 0.2)?;
            if self.taps.contains(&i) {
                out.push(h.clone());
            }
        }
        Ok(out)
    }
}

/// Mean absolute difference over all elements.
pub fn reconstruction_l1(x: &Tensor, xhat: &Tensor) -> Result<Tensor> {
    if x.shape() != xhat.shape() {
        return Err(Error::dim("reconstruction_l1: shape mismatch"));
    }
    Ok((x - xhat)?.abs()?.mean_all()?)
}

/// Sum over tap layers of the mean squared feature difference.
pub fn perceptual_distance(x: &Tensor, y: &Tensor, fx: &FeatureExtractor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::dim("perceptual_distance: shape mismatch"));
    }
    let fa = fx.features(x)?;
    let fb = fx.features(y)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fa.iter().zip(fb.iter()) {
        let d = (a - b)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::State("feature extractor produced no taps".into()))
}

/// Patch-based discriminator: strided spectral-norm convolutions with a
/// sigmoid map output in (0, 1).
pub struct Discriminator {
    layers: Vec<SpectralConv2d>,
}

impl Discriminator {
    pub fn new(vs: &mut VarStore, name: &str, base_width: usize) -> Result<Self> {
        let w = base_width;
        let layers = vec![
            SpectralConv2d::new(vs, &format!("{name}.0"), 3, w, 4, 2, 1)?,
            SpectralConv2d::new(vs, &format!("{name}.1"), w, 2 * w, 4, 2, 1)?,
            SpectralConv2d::new(vs, &format!("{name}.2"), 2 * w, 4 * w, 4, 2, 1)?,
            SpectralConv2d::new(vs, &format!("{name}.3"), 4 * w, 1, 3, 1, 1)?,
        ];
        Ok(Self { layers })
    }

    /// Probability map in the open interval (0, 1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = candle_nn::ops::leaky_relu(&h, 0.2)?;
            }
        }
        let p = candle_nn::ops::sigmoid(&h)?;
        Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
    }

    /// One power-iteration refresh of every spectral-norm estimate.
    pub fn power_iterate(&mut self) -> Result<()> {
        for layer in self.layers.iter_mut() {
            layer.power_iterate()?;
        }
        Ok(())
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// The discriminator objective value `log D(x) + log(1 − D(x̂))` (the
/// quantity the discriminator maximizes), averaged over the patch map.
pub fn adversarial_value(disc: &Discriminator, x: &Tensor, xhat: &Tensor) -> Result<Tensor> {
    let dx = disc.forward(x)?;
    let dh = disc.forward(xhat)?;
    check_finite(&dx, "discriminator output")?;
    let a = dx.log()?.mean_all()?;
    let b = (dh.neg()? + 1.0)?.log()?.mean_all()?;
    Ok((a + b)?)
}

/// Training losses of the adversarial pair: the discriminator minimizes the
/// negated objective; the generator minimizes the non-saturating
/// `−log D(x̂)`.
pub fn adversarial_pair_losses(
    disc: &Discriminator,
    x: &Tensor,
    xhat: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if x.shape() != xhat.shape() {
        return Err(Error::dim("adversarial_pair_losses: shape mismatch"));
    }
    let disc_loss = adversarial_value(disc, x, &xhat.detach())?.neg()?;
    let dh = disc.forward(xhat)?;
    check_finite(&dh, "discriminator output")?;
    let gen_loss = dh.log()?.mean_all()?.neg()?;
    Ok((disc_loss, gen_loss))
}

/// Adaptive adversarial weight: `‖∇rec‖ / (‖∇adv‖ + ε)`, clamped to
/// `[0, 1e4]`.
pub fn adaptive_weight(grad_rec_norm: f64, grad_adv_norm: f64, eps: f64) -> Result<f64> {
    if grad_rec_norm < 0.0 || grad_adv_norm < 0.0 {
        return Err(Error::Domain("gradient norms must be nonnegative".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Domain("epsilon must be positive".into()));
    }
    Ok((grad_rec_norm / (grad_adv_norm + eps)).clamp(0.0, ADAPTIVE_WEIGHT_CLAMP))
}

/// Euclidean norm of `∂loss/∂var`, computed by a dedicated backward pass.
pub fn gradient_norm(loss: &Tensor, var: &Var) -> Result<f64> {
    let grads = loss.backward()?;
    match grads.get(var.as_tensor()) {
        Some(g) => Ok(g
            .to_dtype(DType::F64)?
            .sqr()?
            .sum_all()?
            .to_scalar::<f64>()?
            .sqrt()),
        None => Ok(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarStore;
    use crate::test_util::{autodiff_grad, finite_diff_grad, max_rel_err, rand_tensor};
    use candle_core::Device;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn disc(seed: u64) -> Discriminator {
        let mut vs = VarStore::new(seed, DType::F32, Device::Cpu);
        Discriminator::new(&mut vs, "d", 8).unwrap()
    }

    #[test]
    fn l1_closed_forms_and_symmetry() {
        let dev = Device::Cpu;
        let x = rand_tensor((1, 3, 8, 8), 1, 0.0, 1.0, DType::F32, &dev).unwrap();
        assert_eq!(scalar(&reconstruction_l1(&x, &x).unwrap()), 0.0);
        let y = (&x + 0.1).unwrap();
        let d = scalar(&reconstruction_l1(&x, &y).unwrap());
        assert!((d - 0.1).abs() < 1e-6, "offset distance {d}");
        let z = rand_tensor((1, 3, 8, 8), 2, 0.0, 1.0, DType::F32, &dev).unwrap();
        let a = scalar(&reconstruction_l1(&x, &z).unwrap());
        let b = scalar(&reconstruction_l1(&z, &x).unwrap());
        assert!((a - b).abs() < 1e-7);
        let bad = rand_tensor((1, 3, 4, 4), 3, 0.0, 1.0, DType::F32, &dev).unwrap();
        assert!(reconstruction_l1(&x, &bad).is_err());
    }

    #[test]
    fn perceptual_distance_is_a_squared_feature_metric() {
        let dev = Device::Cpu;
        let fx = FeatureExtractor::random_fixed(0, DType::F32, &dev).unwrap();
        let x = rand_tensor((1, 3, 32, 32), 4, 0.0, 1.0, DType::F32, &dev).unwrap();
        assert_eq!(scalar(&perceptual_distance(&x, &x, &fx).unwrap()), 0.0);
        let y = rand_tensor((1, 3, 32, 32), 5, 0.0, 1.0, DType::F32, &dev).unwrap();
        assert!(scalar(&perceptual_distance(&x, &y, &fx).unwrap()) > 0.0);
        let tex = crate::data::procedural_texture(32, 6)
            .to_tensor(DType::F32, &dev)
            .unwrap()
            .unsqueeze(0)
            .unwrap();
        let shifted = tex
            .narrow(3, 4, 28)
            .unwrap()
            .pad_with_zeros(3, 0, 4)
            .unwrap();
        assert!(scalar(&perceptual_distance(&tex, &shifted, &fx).unwrap()) > 0.0);
    }

    #[test]
    fn extractor_features_are_bit_stable() {
        let dev = Device::Cpu;
        let fx = FeatureExtractor::random_fixed(3, DType::F32, &dev).unwrap();
        let x = rand_tensor((1, 3, 32, 32), 7, 0.0, 1.0, DType::F32, &dev).unwrap();
        let a = fx.features(&x).unwrap();
        let b = fx.features(&x).unwrap();
        assert_eq!(a.len(), 3);
        for (fa, fb) in a.iter().zip(&b) {
            let va = fa.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let vb = fb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn indifferent_discriminator_scores_two_log_half() {
        // Zero inputs pass through zero-bias convolutions unchanged, so the
        // sigmoid sits exactly at one half.
        let d = disc(1);
        let zeros = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let p = d.forward(&zeros).unwrap();
        let pv = p.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(pv.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let value = scalar(&adversarial_value(&d, &zeros, &zeros).unwrap());
        assert!(
            (value - 2.0 * 0.5f64.ln()).abs() < 1e-5,
            "objective {value} vs {}",
            2.0 * 0.5f64.ln()
        );
        let (d_loss, g_loss) = adversarial_pair_losses(&d, &zeros, &zeros).unwrap();
        assert!((scalar(&d_loss) + value).abs() < 1e-5);
        assert!((scalar(&g_loss) - (-0.5f64.ln())).abs() < 1e-5);
    }

    #[test]
    fn confident_discriminator_drives_generator_loss_to_zero() {
        let d = disc(2);
        let x = rand_tensor((1, 3, 32, 32), 8, 0.0, 1.0, DType::F32, &Device::Cpu).unwrap();
        // -log D(xhat) shrinks monotonically as D(xhat) -> 1; the clamp at
        // 1 - 1e-6 bounds the loss near zero.
        let probs = Tensor::full(1.0f32 - 1e-6, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let near_zero = probs
            .log()
            .unwrap()
            .mean_all()
            .unwrap()
            .neg()
            .unwrap();
        assert!(scalar(&near_zero) < 1e-5);
        let (_, g_loss) = adversarial_pair_losses(&d, &x, &x).unwrap();
        assert!(scalar(&g_loss).is_finite());
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let d = disc(3);
        let x = rand_tensor((1, 3, 8, 8), 9, 0.2, 0.8, DType::F64, &Device::Cpu).unwrap();
        let mut vs64 = VarStore::new(3, DType::F64, Device::Cpu);
        let d64 = Discriminator::new(&mut vs64, "d", 8).unwrap();
        let _ = d;
        let xv = candle_core::Var::from_tensor(&x).unwrap();
        let (_, g_loss) = adversarial_pair_losses(&d64, &x, xv.as_tensor()).unwrap();
        let got = autodiff_grad(&g_loss, xv.as_tensor()).unwrap();
        let f = |t: &Tensor| -> crate::error::Result<Tensor> {
            let (_, g) = adversarial_pair_losses(&d64, &x, t)?;
            Ok(g)
        };
        let want = finite_diff_grad(&f, &x, 1e-5).unwrap();
        let err = max_rel_err(&got, &want);
        assert!(err < 1e-3, "max relative gradient error {err}");
    }

    #[test]
    fn adaptive_weight_matches_the_arithmetic() {
        assert_eq!(adaptive_weight(0.0, 123.0, 1e-4).unwrap(), 0.0);
        let w = adaptive_weight(1.0, 1.0, 1e-4).unwrap();
        assert!((w - 0.999_900_009_999).abs() < 1e-9, "weight {w}");
        assert_eq!(adaptive_weight(2.0, 0.0, 1e-4).unwrap(), ADAPTIVE_WEIGHT_CLAMP);
        assert!(adaptive_weight(-1.0, 0.0, 1e-4).is_err());
        assert!(adaptive_weight(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn adaptive_weight_is_nearly_scale_invariant() {
        let (gr, ga, eps) = (0.7, 0.3, 1e-4);
        let base = adaptive_weight(gr, ga, eps).unwrap();
        for k in [0.5, 1.5, 2.0] {
            let scaled = adaptive_weight(k * gr, k * ga, eps).unwrap();
            let bound = base * eps / (k * ga + eps);
            assert!(
                (scaled - base).abs() <= bound + 1e-12,
                "k={k}: |{scaled} - {base}| > {bound}"
            );
        }
    }

    #[test]
    fn gradient_norm_matches_a_hand_derivative() {
        // loss = sum(w * c) has gradient c with respect to w.
        let w = candle_core::Var::from_vec(vec![1.0f64, 2.0, 3.0], 3, &Device::Cpu).unwrap();
        let c = Tensor::from_vec(vec![3.0f64, 4.0, 12.0], 3, &Device::Cpu).unwrap();
        let loss = w.as_tensor().mul(&c).unwrap().sum_all().unwrap();
        let n = gradient_norm(&loss, &w).unwrap();
        assert!((n - 13.0).abs() < 1e-10, "norm {n}");
        // A variable outside the graph contributes no gradient.
        let unused = candle_core::Var::from_vec(vec![1.0f64], 1, &Device::Cpu).unwrap();
        assert_eq!(gradient_norm(&loss, &unused).unwrap(), 0.0);
    }
}
