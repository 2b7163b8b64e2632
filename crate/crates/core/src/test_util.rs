//! Helpers shared across unit tests.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::data::ImageTensor;
use crate::error::Result;

/// Uniform random image in [0, 1].
pub fn rand_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..3 * height * width).map(|_| rng.gen_range(0.0..=1.0)).collect();
    ImageTensor::new(height, width, data).unwrap()
}

/// Uniform random tensor in [lo, hi].
pub fn rand_tensor<S: Into<candle_core::Shape>>(
    shape: S,
    seed: u64,
    lo: f64,
    hi: f64,
    dtype: DType,
    dev: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.elem_count()).map(|_| rng.gen_range(lo..=hi)).collect();
    Ok(Tensor::from_vec(data, shape, dev)?.to_dtype(dtype)?)
}

/// Central finite differences of a scalar-valued tensor function, computed
/// elementwise at `x`.
pub fn finite_diff_grad(
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f64,
) -> Result<Vec<f64>> {
    let base = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let shape = x.shape().clone();
    let dev = x.device().clone();
    let dtype = x.dtype();
    let mut grads = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let xp = Tensor::from_vec(plus, shape.clone(), &dev)?.to_dtype(dtype)?;
        let xm = Tensor::from_vec(minus, shape.clone(), &dev)?.to_dtype(dtype)?;
        let fp = f(&xp)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let fm = f(&xm)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        grads.push((fp - fm) / (2.0 * eps));
    }
    Ok(grads)
}

/// Autodiff gradient of a scalar loss with respect to `x` (which must be a
/// `Var`'s tensor for candle to track it), flattened to f64.
pub fn autodiff_grad(loss: &Tensor, x: &Tensor) -> Result<Vec<f64>> {
    let grads = loss.backward()?;
    let g = grads
        .get(x)
        .expect("input participates in the graph")
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Ok(g)
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor to keep near-zero entries from exploding the ratio.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
