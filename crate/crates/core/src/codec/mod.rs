//! Pluggable baseline compressor abstraction and rate accounting.
//!
//! The enhancement pipeline is decoder-side only, so any compressor that
//! honors [`Compressor`] can sit in front of it. Two reference
//! implementations ship with the crate: a deterministic degradation
//! [`StubCodec`] and a small learned [`MiniCodec`].

mod mini;
mod range;
mod stub;

pub use mini::{MiniCodec, MiniCodecConfig};
pub use range::{RangeDecoder, RangeEncoder, CDF_TOTAL};
pub use stub::StubCodec;

use crate::data::ImageTensor;
use crate::error::{Error, Result};

pub const BITSTREAM_MAGIC: [u8; 4] = *b"CRS0";
pub const BITSTREAM_VERSION: u8 = 1;
pub const CODEC_ID_STUB: u8 = 1;
pub const CODEC_ID_MINI: u8 = 2;

/// Self-describing coded representation of one image.
///
/// Serialized layout (little-endian): magic `CRS0` (4 bytes), version `u8`,
/// codec-id `u8`, width `u16`, height `u16`, rate-index `u8`, reserved `u8`,
/// payload-length `u32`, payload bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub codec_id: u8,
    pub width: u16,
    pub height: u16,
    pub rate_index: u8,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub const HEADER_LEN: usize = 16;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::HEADER_LEN + self.payload.len());
        out.extend_from_slice(&BITSTREAM_MAGIC);
        out.push(BITSTREAM_VERSION);
        out.push(self.codec_id);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.rate_index);
        out.push(0); // reserved
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < Self::HEADER_LEN {
            return Err(Error::Format("bitstream shorter than header".into()));
        }
        if bytes[0..4] != BITSTREAM_MAGIC {
            return Err(Error::Format("bad magic, expected CRS0".into()));
        }
        if bytes[4] != BITSTREAM_VERSION {
            return Err(Error::Format(format!(
                "unsupported bitstream version {}",
                bytes[4]
            )));
        }
        let codec_id = bytes[5];
        let width = u16::from_le_bytes([bytes[6], bytes[7]]);
        let height = u16::from_le_bytes([bytes[8], bytes[9]]);
        let rate_index = bytes[10];
        let payload_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() != Self::HEADER_LEN + payload_len {
            return Err(Error::Format(format!(
                "truncated bitstream: header promises {payload_len} payload bytes, {} present",
                bytes.len().saturating_sub(Self::HEADER_LEN)
            )));
        }
        Ok(Self {
            codec_id,
            width,
            height,
            rate_index,
            payload: bytes[Self::HEADER_LEN..].to_vec(),
        })
    }
}

/// A frozen image compressor at a fixed operating point.
pub trait Compressor {
    fn name(&self) -> &str;
    fn codec_id(&self) -> u8;
    /// Nominal rate-distortion trade-off parameter of this operating point.
    fn rate_param(&self) -> f32;
    fn rate_index(&self) -> u8;
    fn compress(&self, x: &ImageTensor) -> Result<Bitstream>;
    fn decompress(&self, b: &Bitstream) -> Result<ImageTensor>;
}

/// Rate-distortion objective `R + λ·MSE` with `R` in bits per pixel.
pub fn rd_loss(x: &ImageTensor, x_dec: &ImageTensor, rate_bits: f32, lambda: f32) -> Result<f32> {
    if !x.same_dims(x_dec) {
        return Err(Error::dim("rd_loss: shape mismatch"));
    }
    if rate_bits < 0.0 || lambda < 0.0 {
        return Err(Error::Domain("rate and lambda must be nonnegative".into()));
    }
    let mse = x
        .data()
        .iter()
        .zip(x_dec.data())
        .map(|(a, b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum::<f64>()
        / x.data().len() as f64;
    Ok(rate_bits + lambda * mse as f32)
}

/// Bits per pixel of a bitstream. Header bytes excluded unless requested.
pub fn bpp_of(b: &Bitstream, width: usize, height: usize, include_header: bool) -> Result<f64> {
    if width * height == 0 {
        return Err(Error::Domain("bpp_of: zero pixel area".into()));
    }
    let bytes = b.payload.len() + if include_header { Bitstream::HEADER_LEN } else { 0 };
    Ok(8.0 * bytes as f64 / (width * height) as f64)
}

/// One point on a rate-distortion / rate-perception curve.
#[derive(Debug, Clone, Copy)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub perceptual_proxy: f64,
    pub rate_param: f32,
}
