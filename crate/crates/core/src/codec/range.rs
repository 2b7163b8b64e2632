//! Byte-oriented range coder (LZMA-style carry handling) over 16-bit
//! cumulative frequency tables.

use crate::error::{Error, Result};

/// All frequency tables must sum to exactly this value.
pub const CDF_TOTAL: u32 = 1 << 16;

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            first: true,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                // the very first byte is a placeholder and is suppressed
                if self.first {
                    self.first = false;
                } else {
                    self.out.push(temp.wrapping_add(carry));
                }
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Encodes a symbol occupying `[cum_lo, cum_hi)` of a table totaling
    /// [`CDF_TOTAL`].
    pub fn encode(&mut self, cum_lo: u32, cum_hi: u32) {
        debug_assert!(cum_lo < cum_hi && cum_hi <= CDF_TOTAL);
        let r = self.range / CDF_TOTAL;
        self.low += (r as u64) * (cum_lo as u64);
        self.range = r * (cum_hi - cum_lo);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    r: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut dec = Self {
            code: 0,
            range: u32::MAX,
            r: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::Format("range coder input exhausted".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Returns the cumulative-frequency position of the next symbol; the
    /// caller locates the symbol and must then call [`Self::update`].
    pub fn decode_cum(&mut self) -> u32 {
        self.r = self.range / CDF_TOTAL;
        (self.code / self.r).min(CDF_TOTAL - 1)
    }

    pub fn update(&mut self, cum_lo: u32, cum_hi: u32) -> Result<()> {
        self.code -= self.r * cum_lo;
        self.range = self.r * (cum_hi - cum_lo);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }
}

/// Turns a positive weight vector into an exact [`CDF_TOTAL`] cumulative
/// table with every symbol frequency at least 1.
pub fn quantize_cdf(weights: &[f64]) -> Result<Vec<u32>> {
    if weights.is_empty() {
        return Err(Error::Domain("empty weight vector".into()));
    }
    let n = weights.len() as u32;
    if n >= CDF_TOTAL {
        return Err(Error::Domain("too many symbols for CDF precision".into()));
    }
    let sum: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let budget = CDF_TOTAL - n; // one slot reserved per symbol
    let mut freqs: Vec<u32> = weights
        .iter()
        .map(|w| {
            let share = if sum > 0.0 { w.max(0.0) / sum } else { 1.0 / n as f64 };
            1 + (share * budget as f64).floor() as u32
        })
        .collect();
    let mut total: u32 = freqs.iter().sum();
    // Push the rounding remainder into the heaviest bin.
    let argmax = (0..freqs.len())
        .max_by(|&a, &b| weights[a].partial_cmp(&weights[b]).unwrap())
        .unwrap();
    if total <= CDF_TOTAL {
        freqs[argmax] += CDF_TOTAL - total;
    } else {
        let mut excess = total - CDF_TOTAL;
        for f in freqs.iter_mut() {
            let take = (*f - 1).min(excess);
            *f -= take;
            excess -= take;
            if excess == 0 {
                break;
            }
        }
        if excess > 0 {
            return Err(Error::Numeric("cannot normalize CDF".into()));
        }
    }
    total = freqs.iter().sum();
    debug_assert_eq!(total, CDF_TOTAL);
    let mut cdf = Vec::with_capacity(freqs.len() + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for f in freqs {
        acc += f;
        cdf.push(acc);
    }
    Ok(cdf)
}

/// Locates the symbol whose `[cdf[s], cdf[s+1])` interval contains `cum`.
pub fn cdf_find(cdf: &[u32], cum: u32) -> usize {
    match cdf.binary_search(&cum) {
        Ok(i) => {
            // `cum` equals a boundary: it belongs to the interval starting there,
            // but equal adjacent entries cannot occur (freqs >= 1).
            i.min(cdf.len() - 2)
        }
        Err(i) => i - 1,
    }
}
