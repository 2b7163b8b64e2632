//! Image corpus ingestion, patch cropping, augmentation and training-pair
//! construction.
//!
//! All operations here are pure functions of `(inputs, seed)`; per-sample
//! seeds are derived deterministically from `(global seed, sample index)`
//! so prefetching never changes results.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::codec::Compressor;
use crate::error::{Error, Result};

/// An H×W×3 image with values in `[0, 1]`, stored planar (CHW).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    /// Planar CHW samples in [0, 1].
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    /// Builds an image from planar CHW data. Values must lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::dim(format!(
                "expected {} values for {height}x{width}x3, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("image values must lie in [0,1]".into()));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from planar CHW data, clamping values into `[0, 1]`.
    pub fn from_raw_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
            if !v.is_finite() {
                *v = 0.0;
            }
        }
        Self::new(height, width, data)
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Converts to a `(3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, dev: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (3, self.height, self.width), dev)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads back a `(3, H, W)` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::dim(format!("expected 3 channels, got {c}")));
        }
        let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_raw_clamped(h, w, v)
    }

    /// Stacks images of identical dimensions into a `(B, 3, H, W)` batch.
    pub fn stack(images: &[Self], dtype: DType, dev: &Device) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Domain("cannot stack an empty image list".into()));
        }
        let ts = images
            .iter()
            .map(|im| im.to_tensor(dtype, dev))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// Splits a `(B, 3, H, W)` batch back into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<Self>> {
        let (b, _, _, _) = t.dims4()?;
        (0..b).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    pub fn vflip(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, self.height - 1 - y, x));
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::dim(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(self.get(c, top + y, left + x));
                }
            }
        }
        Self::new(height, width, data)
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("resize target must be nonzero"));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
                let y0 = (fy.floor() as usize).min(self.height - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                let wy = fy - y0 as f32;
                for x in 0..width {
                    let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
                    let x0 = (fx.floor() as usize).min(self.width - 1);
                    let x1 = (x0 + 1).min(self.width - 1);
                    let wx = fx - x0 as f32;
                    let v = self.get(c, y0, x0) * (1.0 - wy) * (1.0 - wx)
                        + self.get(c, y0, x1) * (1.0 - wy) * wx
                        + self.get(c, y1, x0) * wy * (1.0 - wx)
                        + self.get(c, y1, x1) * wy * wx;
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, data)
    }

    /// Loads a PNG file. Lossy source formats are rejected.
    pub fn load_png(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        if ext != "png" {
            return Err(Error::Data(format!(
                "refusing lossy or unknown source format '{ext}' (PNG-class sources only): {}",
                path.display()
            )));
        }
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("failed to read {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    (self.get(0, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
                    (self.get(1, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
                    (self.get(2, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)
            .map_err(|e| Error::Data(format!("failed to write {}: {e}", path.display())))
    }
}

/// Parameters of a random patch crop.
#[derive(Debug, Clone, Copy)]
pub struct PatchSpec {
    pub size: usize,
    pub count: usize,
    pub seed: u64,
}

/// A degraded/ground-truth training pair.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub lq: ImageTensor,
    pub hq: ImageTensor,
    pub rate_param: f32,
}

/// splitmix64 step, used to derive per-sample seeds from (global, index).
pub fn derive_seed(global: u64, index: u64) -> u64 {
    let mut z = global
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Crops `spec.count` square patches with corners uniform over the valid
/// positions. Deterministic for a fixed seed.
pub fn crop_patches(source: &ImageTensor, spec: &PatchSpec) -> Result<Vec<ImageTensor>> {
    if spec.size > source.height() || spec.size > source.width() {
        return Err(Error::dim(format!(
            "patch size {} exceeds source {}x{}",
            spec.size,
            source.height(),
            source.width()
        )));
    }
    if spec.count == 0 {
        return Err(Error::Domain("patch count must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let max_y = source.height() - spec.size;
    let max_x = source.width() - spec.size;
    (0..spec.count)
        .map(|_| {
            let top = rng.gen_range(0..=max_y);
            let left = rng.gen_range(0..=max_x);
            source.crop(top, left, spec.size, spec.size)
        })
        .collect()
}

/// The concrete transform choices of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOps {
    pub hflip: bool,
    pub vflip: bool,
    /// `Some((fraction, top_frac, left_frac))` applies a crop of
    /// `fraction·size` at the given relative position, then resizes back.
    pub crop: Option<(f32, f32, f32)>,
}

impl AugmentOps {
    /// Draws the transform choices for a seed. The draw order is fixed so
    /// results never depend on which transforms end up applied.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let hflip = rng.gen_bool(0.5);
        let vflip = rng.gen_bool(0.5);
        let do_crop = rng.gen_bool(0.5);
        let fraction = rng.gen_range(0.8f32..=1.0);
        let top = rng.gen_range(0.0f32..1.0);
        let left = rng.gen_range(0.0f32..1.0);
        Self {
            hflip,
            vflip,
            crop: do_crop.then_some((fraction, top, left)),
        }
    }

    pub const IDENTITY: Self = Self {
        hflip: false,
        vflip: false,
        crop: None,
    };
}

/// Applies an explicit set of augmentation choices.
pub fn augment_with(patch: &ImageTensor, ops: &AugmentOps) -> Result<ImageTensor> {
    let mut out = patch.clone();
    if ops.hflip {
        out = out.hflip();
    }
    if ops.vflip {
        out = out.vflip();
    }
    if let Some((fraction, top_frac, left_frac)) = ops.crop {
        let (h, w) = (out.height(), out.width());
        let ch = ((h as f32 * fraction).round() as usize).clamp(1, h);
        let cw = ((w as f32 * fraction).round() as usize).clamp(1, w);
        let top = ((h - ch) as f32 * top_frac).floor() as usize;
        let left = ((w - cw) as f32 * left_frac).floor() as usize;
        out = out.crop(top, left, ch, cw)?.resize_bilinear(h, w)?;
    }
    Ok(out)
}

/// Random flips and crop-resize, deterministic per seed.
pub fn augment(patch: &ImageTensor, seed: u64) -> Result<ImageTensor> {
    augment_with(patch, &AugmentOps::sample(seed))
}

/// Runs each HQ patch through the compressor (at its configured operating
/// point) and pairs it with the decoded result.
pub fn build_pairs(
    hq_patches: &[ImageTensor],
    compressor: &dyn Compressor,
    rate_param: f32,
) -> Result<Vec<TrainingPair>> {
    hq_patches
        .iter()
        .enumerate()
        .map(|(index, hq)| {
            let lq = compressor
                .compress(hq)
                .and_then(|b| compressor.decompress(&b))
                .map_err(|e| Error::PatchCodec {
                    index,
                    source: Box::new(e),
                })?;
            Ok(TrainingPair {
                lq,
                hq: hq.clone(),
                rate_param,
            })
        })
        .collect()
}

/// Train/test split label in a corpus manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A corpus manifest: one `split,path` line per image, `#` comments allowed.
#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub entries: Vec<(Split, PathBuf)>,
}

impl CorpusManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (split, path) = line.split_once(',').ok_or_else(|| {
                Error::Data(format!("manifest line {}: expected 'split,path'", lineno + 1))
            })?;
            let split = match split.trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::Data(format!(
                        "manifest line {}: unknown split '{other}'",
                        lineno + 1
                    )))
                }
            };
            entries.push((split, PathBuf::from(path.trim())));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (split, path) in &self.entries {
            let label = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            s.push_str(&format!("{label},{}\n", path.display()));
        }
        s
    }

    pub fn paths(&self, split: Split) -> Vec<&Path> {
        self.entries
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, p)| p.as_path())
            .collect()
    }
}

/// Procedural texture generator used for desk-scale experiments.
///
/// Images are tiled from 16x16 cells, each drawn from a finite family of
/// grid-aligned patterns: flat levels, square-wave stripes (horizontal,
/// vertical, diagonal; periods 4 and 8 px), and checkerboards (cells 2 and
/// 4 px), in one of four channel tints. Two properties make this family a
/// good desk-scale stand-in for textured imagery: the set of distinct 8x8
/// pixel blocks it produces is small enough for a 64-entry codebook to
/// cover, and the fine structure (periods 2-4 px) is exactly what a
/// downsampling baseline codec cannot carry, so enhancement has something
/// real to restore.
pub fn procedural_texture(size: usize, seed: u64) -> ImageTensor {
    const CELL: usize = 16;
    const TINTS: [[f32; 3]; 4] = [
        [1.0, 1.0, 1.0],
        [1.0, 0.35, 0.35],
        [0.35, 1.0, 0.35],
        [0.35, 0.35, 1.0],
    ];
    const FLAT_LEVELS: [f32; 4] = [0.2, 0.4, 0.6, 0.8];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let cells = size.div_ceil(CELL);
    // per-cell pattern choice: (kind, variant, tint)
    let choices: Vec<(u8, u8, usize)> = (0..cells * cells)
        .map(|_| {
            let kind = rng.gen_range(0..5u8);
            let variant = rng.gen_range(0..4u8);
            let tint = rng.gen_range(0..TINTS.len());
            (kind, variant, tint)
        })
        .collect();
    let square = |t: usize, p: usize| if t % p < p / 2 { 1.0f32 } else { -1.0 };
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (kind, variant, tint) = choices[(y / CELL) * cells + x / CELL];
            // periods divide the cell size, so patterns are anchored to
            // absolute coordinates and stay aligned with the token grid
            let p = if variant % 2 == 0 { 4 } else { 8 };
            let (s, tint) = match kind {
                0 => (0.0, [1.0, 1.0, 1.0]),
                1 => (square(y, p), TINTS[tint]),
                2 => (square(x, p), TINTS[tint]),
                3 => (square(x + y, p), TINTS[tint]),
                _ => {
                    let c = p / 2;
                    (if (x / c + y / c) % 2 == 0 { 1.0 } else { -1.0 }, TINTS[tint])
                }
            };
            for ch in 0..3 {
                let val = if kind == 0 {
                    FLAT_LEVELS[variant as usize]
                } else {
                    0.5 + 0.3 * tint[ch] * s
                };
                data[(ch * size + y) * size + x] = val;
            }
        }
    }
    ImageTensor::new(size, size, data).expect("generated texture is in range")
}
