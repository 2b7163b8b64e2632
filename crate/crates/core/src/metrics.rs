//! Image quality metrics and rate-distortion evaluation.

use candle_core::{DType, Device};

use crate::codec::{bpp_of, Compressor, RdPoint};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;

/// PSNR in dB for images in [0, 1]. Identical inputs return the 100 dB cap
/// rather than infinity, and values above the cap clamp to it.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::dim("psnr: size mismatch"));
    }
    let mut sum = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = (*x - *y) as f64;
        sum += d * d;
    }
    let mse = sum / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((-10.0 * mse.log10()).min(100.0))
}

const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let sigma = 1.5f64;
    let mut k = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - (SSIM_WINDOW as f64 - 1.0) / 2.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// One image plane in f64 with separable valid-mode Gaussian filtering.
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn filter(&self, k: &[f64; SSIM_WINDOW]) -> Plane {
        let ow = self.w - SSIM_WINDOW + 1;
        // Horizontal pass.
        let mut tmp = vec![0.0; ow * self.h];
        for y in 0..self.h {
            for x in 0..ow {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    acc += kv * self.data[y * self.w + x + i];
                }
                tmp[y * ow + x] = acc;
            }
        }
        let oh = self.h - SSIM_WINDOW + 1;
        let mut out = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    acc += kv * tmp[(y + i) * ow + x];
                }
                out[y * ow + x] = acc;
            }
        }
        Plane { w: ow, h: oh, data: out }
    }

    fn downsample2(&self) -> Plane {
        // Ceil halving with edge replication so odd sides keep their last
        // sample, matching the 161-pixel five-scale threshold.
        let ow = self.w.div_ceil(2);
        let oh = self.h.div_ceil(2);
        let mut out = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                let x1 = (2 * x + 1).min(self.w - 1);
                let y1 = (2 * y + 1).min(self.h - 1);
                out[y * ow + x] = 0.25
                    * (self.data[2 * y * self.w + 2 * x]
                        + self.data[2 * y * self.w + x1]
                        + self.data[y1 * self.w + 2 * x]
                        + self.data[y1 * self.w + x1]);
            }
        }
        Plane { w: ow, h: oh, data: out }
    }
}

/// Mean luminance (l) and contrast-structure (cs) terms of SSIM over one
/// plane pair at one scale.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64; SSIM_WINDOW]) -> (f64, f64) {
    let mu_a = a.filter(k);
    let mu_b = b.filter(k);
    let sq = |p: &Plane| Plane {
        w: p.w,
        h: p.h,
        data: p.data.iter().map(|v| v * v).collect(),
    };
    let mul = |p: &Plane, q: &Plane| Plane {
        w: p.w,
        h: p.h,
        data: p.data.iter().zip(&q.data).map(|(x, y)| x * y).collect(),
    };
    let e_aa = sq(a).filter(k);
    let e_bb = sq(b).filter(k);
    let e_ab = mul(a, b).filter(k);
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    let n = mu_a.data.len();
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let var_a = (e_aa.data[i] - ma * ma).max(0.0);
        let var_b = (e_bb.data[i] - mb * mb).max(0.0);
        let cov = e_ab.data[i] - ma * mb;
        l_sum += (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        cs_sum += (2.0 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2);
    }
    (l_sum / n as f64, cs_sum / n as f64)
}

/// Number of usable MS-SSIM scales for a given image size. The finest
/// scale must still hold the 11x11 window after repeated halving; five
/// scales need at least 161 pixels on the short side.
pub fn msssim_scales(width: usize, height: usize) -> usize {
    let mut side = width.min(height);
    let mut scales = 0;
    while scales < 5 && side >= SSIM_WINDOW {
        scales += 1;
        side = side.div_ceil(2);
    }
    scales
}

/// Multi-scale SSIM for images in [0, 1], averaged over channels, computed
/// in f64. Images smaller than 161 px on a side use fewer scales with the
/// weights renormalized; images smaller than the 11x11 window are an error.
pub fn ms_ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::dim("ms_ssim: size mismatch"));
    }
    let scales = msssim_scales(a.width, a.height);
    if scales == 0 {
        return Err(Error::Domain(format!(
            "ms_ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} input, got {}x{}",
            a.width, a.height
        )));
    }
    let weight_sum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let k = gaussian_kernel();
    let mut total = 0.0f64;
    for c in 0..3 {
        let plane = |img: &ImageTensor| Plane {
            w: img.width,
            h: img.height,
            data: img.data[c * img.width * img.height..(c + 1) * img.width * img.height]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        };
        let mut pa = plane(a);
        let mut pb = plane(b);
        let mut score = 1.0f64;
        for s in 0..scales {
            let (l, cs) = ssim_terms(&pa, &pb, &k);
            let w = MSSSIM_WEIGHTS[s] / weight_sum;
            if s + 1 == scales {
                score *= (l * cs).max(0.0).powf(w);
            } else {
                score *= cs.max(0.0).powf(w);
                pa = pa.downsample2();
                pb = pb.downsample2();
            }
        }
        total += score;
    }
    Ok(total / 3.0)
}

/// Seed of the fixed feature extractor behind [`perceptual_proxy`]. Pinned
/// so proxy values are comparable across runs and machines.
pub const PROXY_SEED: u64 = 0x5eed_fee7;

/// Feature-space distance under a fixed random extractor. Symmetric,
/// zero on identical inputs, lower is better.
pub fn perceptual_proxy(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let dev = Device::Cpu;
    let fx = FeatureExtractor::random_fixed(PROXY_SEED, DType::F32, &dev)?;
    let ta = a.to_tensor(DType::F32, &dev)?.unsqueeze(0)?;
    let tb = b.to_tensor(DType::F32, &dev)?.unsqueeze(0)?;
    let d = crate::losses::perceptual_distance(&ta, &tb, &fx)?;
    Ok(d.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// All three metrics for one reference/result pair.
pub fn evaluate_pair(reference: &ImageTensor, result: &ImageTensor) -> Result<(f64, f64, f64)> {
    Ok((
        psnr(reference, result)?,
        ms_ssim(reference, result)?,
        perceptual_proxy(reference, result)?,
    ))
}

/// Runs a codec over a corpus and averages rate and quality into one
/// rate-distortion point. The optional `enhance` hook post-processes each
/// decoded image before measurement.
pub fn evaluate_corpus(
    images: &[ImageTensor],
    codec: &dyn Compressor,
    enhance: Option<&dyn Fn(&ImageTensor) -> Result<ImageTensor>>,
) -> Result<RdPoint> {
    if images.is_empty() {
        return Err(Error::Domain("evaluate_corpus: empty corpus".into()));
    }
    let mut bpp = 0.0;
    let mut sum_psnr = 0.0;
    let mut sum_msssim = 0.0;
    let mut sum_proxy = 0.0;
    for img in images {
        let bits = codec.compress(img)?;
        bpp += bpp_of(&bits, img.width, img.height, true)?;
        let mut dec = codec.decompress(&bits)?;
        if let Some(f) = enhance {
            dec = f(&dec)?;
        }
        let (p, m, x) = evaluate_pair(img, &dec)?;
        sum_psnr += p;
        sum_msssim += m;
        sum_proxy += x;
    }
    let n = images.len() as f64;
    Ok(RdPoint {
        rate_param: codec.rate_param(),
        bpp: bpp / n,
        psnr: sum_psnr / n,
        ms_ssim: sum_msssim / n,
        perceptual_proxy: sum_proxy / n,
    })
}

/// Renders rate-distortion points as the CSV table used for plotting.
pub fn rd_curve_csv(rows: &[(String, RdPoint)]) -> String {
    let mut out = String::from("method,rate_param,bpp,psnr,ms_ssim,perc_proxy\n");
    for (method, p) in rows {
        out.push_str(&format!(
            "{method},{:.6},{:.6},{:.4},{:.6},{:.6}\n",
            p.rate_param, p.bpp, p.psnr, p.ms_ssim, p.perceptual_proxy
        ));
    }
    out
}
