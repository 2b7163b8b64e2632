//! Deterministic degradation codec: downsample by an integer scale,
//! uniform-quantize to `bits` bits, bit-pack; decoding upsamples bilinearly.

use super::{Bitstream, Compressor, CODEC_ID_STUB};
use crate::data::ImageTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct StubCodec {
    scale: usize,
    bits: u8,
    rate_param: f32,
}

impl StubCodec {
    pub fn new(scale: usize, bits: u8) -> Result<Self> {
        if !(1..=15).contains(&scale) {
            return Err(Error::Config("stub scale must be in 1..=15".into()));
        }
        if !(1..=8).contains(&bits) {
            return Err(Error::Config("stub bits must be in 1..=8".into()));
        }
        Ok(Self {
            scale,
            bits,
            rate_param: 0.0,
        })
    }

    pub fn with_rate_param(mut self, rate_param: f32) -> Self {
        self.rate_param = rate_param;
        self
    }

    /// Operating points addressable via `--rate-index`: scale 2 with
    /// 1..=8 bits.
    pub fn from_rate_index(k: u8) -> Result<Self> {
        if k > 7 {
            return Err(Error::Config(format!("stub rate-index {k} out of range 0..=7")));
        }
        Self::new(2, k + 1)
    }

    /// Rebuilds the codec that wrote a bitstream from the packed
    /// scale/bits byte stored in its header.
    pub fn from_encoded_rate(b: u8) -> Result<Self> {
        Self::new((b >> 4) as usize, b & 0x0f)
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    fn encode_rate_index(&self) -> u8 {
        ((self.scale as u8) << 4) | self.bits
    }

    fn levels(&self) -> f32 {
        ((1u32 << self.bits) - 1) as f32
    }
}

impl Compressor for StubCodec {
    fn name(&self) -> &str {
        "stub"
    }

    fn codec_id(&self) -> u8 {
        CODEC_ID_STUB
    }

    fn rate_param(&self) -> f32 {
        self.rate_param
    }

    fn rate_index(&self) -> u8 {
        self.encode_rate_index()
    }

    fn compress(&self, x: &ImageTensor) -> Result<Bitstream> {
        let (h, w) = (x.height(), x.width());
        if h % self.scale != 0 || w % self.scale != 0 {
            return Err(Error::dim(format!(
                "image {h}x{w} not divisible by stub scale {}",
                self.scale
            )));
        }
        let (dh, dw) = (h / self.scale, w / self.scale);
        let levels = self.levels();
        let area = (self.scale * self.scale) as f32;
        let total_symbols = 3 * dh * dw;
        let mut payload = vec![0u8; (total_symbols * self.bits as usize + 7) / 8];
        let mut bitpos = 0usize;
        for c in 0..3 {
            for by in 0..dh {
                for bx in 0..dw {
                    let mut acc = 0.0f32;
                    for dy in 0..self.scale {
                        for dx in 0..self.scale {
                            acc += x.get(c, by * self.scale + dy, bx * self.scale + dx);
                        }
                    }
                    let q = ((acc / area) * levels).round() as u32;
                    for bit in 0..self.bits {
                        if (q >> bit) & 1 == 1 {
                            payload[bitpos / 8] |= 1 << (bitpos % 8);
                        }
                        bitpos += 1;
                    }
                }
            }
        }
        Ok(Bitstream {
            codec_id: CODEC_ID_STUB,
            width: w as u16,
            height: h as u16,
            rate_index: self.encode_rate_index(),
            payload,
        })
    }

    fn decompress(&self, b: &Bitstream) -> Result<ImageTensor> {
        if b.codec_id != CODEC_ID_STUB {
            return Err(Error::Codec(format!(
                "bitstream codec-id {} does not match stub ({CODEC_ID_STUB})",
                b.codec_id
            )));
        }
        if b.rate_index != self.encode_rate_index() {
            return Err(Error::Codec(format!(
                "bitstream rate-index {} does not match stub operating point {}",
                b.rate_index,
                self.encode_rate_index()
            )));
        }
        let (h, w) = (b.height as usize, b.width as usize);
        if h % self.scale != 0 || w % self.scale != 0 {
            return Err(Error::Format("header dims incompatible with stub scale".into()));
        }
        let (dh, dw) = (h / self.scale, w / self.scale);
        let total_symbols = 3 * dh * dw;
        let needed = (total_symbols * self.bits as usize + 7) / 8;
        if b.payload.len() != needed {
            return Err(Error::Format(format!(
                "stub payload length {} != expected {needed}",
                b.payload.len()
            )));
        }
        let levels = self.levels();
        let mut small = vec![0.0f32; total_symbols];
        let mut bitpos = 0usize;
        for v in small.iter_mut() {
            let mut q = 0u32;
            for bit in 0..self.bits {
                if (b.payload[bitpos / 8] >> (bitpos % 8)) & 1 == 1 {
                    q |= 1 << bit;
                }
                bitpos += 1;
            }
            *v = q as f32 / levels;
        }
        let small = ImageTensor::new(dh, dw, small)?;
        small.resize_bilinear(h, w)
    }
}
