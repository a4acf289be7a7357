//! Bit-exact entropy coder (64-bit rANS with 32-bit renormalization) over
//! 16-bit quantized CDFs, plus the deterministic CDF construction shared by
//! encoder and decoder.
//!
//! Symbols are residuals r = value − round(mean) in [−127, 127]; residuals
//! outside that support use an escape symbol followed by a sign bit and the
//! Elias-gamma code of the excess magnitude, all carried as bypass bits.

use crate::error::{IcmError, Result};

pub const CDF_BITS: u32 = 16;
pub const CDF_TOTAL: u32 = 1 << CDF_BITS;
pub const SYM_MIN: i64 = -127;
pub const SYM_MAX: i64 = 127;
/// 255 in-support residuals plus the escape bucket.
pub const NUM_SYMBOLS: usize = (SYM_MAX - SYM_MIN + 1) as usize + 1;
pub const ESCAPE_SYM: usize = NUM_SYMBOLS - 1;

const RANS_L: u64 = 1 << 31;
const BYPASS_HALF: u32 = CDF_TOTAL / 2;

fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Deterministic 16-bit quantized CDF for the residual distribution of a
/// Gaussian with the given mean and scale after rounding. Returns `NUM_SYMBOLS
/// + 1` cumulative counts from 0 to `CDF_TOTAL`; every bin has count >= 1.
pub fn build_cdf(mean: f64, scale: f64) -> Vec<u32> {
    // residual r = round(v) - round(mean); v - mean ~ N(0, scale)
    let frac = mean.round() - mean;
    let mut probs = [0.0f64; NUM_SYMBOLS];
    let mut mass = 0.0;
    for (i, p) in probs.iter_mut().enumerate().take(NUM_SYMBOLS - 1) {
        let r = SYM_MIN + i as i64;
        let hi = norm_cdf((r as f64 + frac + 0.5) / scale);
        let lo = norm_cdf((r as f64 + frac - 0.5) / scale);
        *p = (hi - lo).max(0.0);
        mass += *p;
    }
    probs[ESCAPE_SYM] = (1.0 - mass).max(0.0);

    // Every symbol gets one guaranteed count; the remaining budget is split
    // proportionally and the rounding slack goes to the largest bin.
    let budget = (CDF_TOTAL as usize - NUM_SYMBOLS) as f64;
    let mut counts = [0u32; NUM_SYMBOLS];
    let mut total: u32 = 0;
    let mut argmax = 0;
    for i in 0..NUM_SYMBOLS {
        counts[i] = 1 + (probs[i] * budget).floor() as u32;
        total += counts[i];
        if probs[i] > probs[argmax] {
            argmax = i;
        }
    }
    debug_assert!(total <= CDF_TOTAL);
    counts[argmax] += CDF_TOTAL - total;

    let mut cdf = Vec::with_capacity(NUM_SYMBOLS + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for &c in &counts {
        acc += c;
        cdf.push(acc);
    }
    cdf
}

/// Residual symbol index for a value under a given mean, or the escape symbol.
pub fn residual_symbol(value: i64, mean: f64) -> (usize, i64) {
    let r = value - mean.round() as i64;
    if (SYM_MIN..=SYM_MAX).contains(&r) {
        ((r - SYM_MIN) as usize, r)
    } else {
        (ESCAPE_SYM, r)
    }
}

pub fn symbol_to_residual(sym: usize) -> i64 {
    SYM_MIN + sym as i64
}

/// One coding step: either a CDF-coded symbol or a raw bypass bit.
#[derive(Debug, Clone, Copy)]
enum Step {
    Sym { cum: u32, freq: u32 },
    Bit(bool),
}

/// LIFO entropy encoder: record steps in decode order, then `finish` codes
/// them in reverse so the decoder reads the payload front to back.
#[derive(Default)]
pub struct RangeEncoder {
    steps: Vec<Step>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_symbol(&mut self, cdf: &[u32], sym: usize) {
        let (cum, next) = (cdf[sym], cdf[sym + 1]);
        self.steps.push(Step::Sym { cum, freq: next - cum });
    }

    pub fn put_bit(&mut self, bit: bool) {
        self.steps.push(Step::Bit(bit));
    }

    /// Sign + Elias-gamma code of a positive magnitude, as bypass bits.
    pub fn put_escape(&mut self, residual: i64) {
        debug_assert!(!(SYM_MIN..=SYM_MAX).contains(&residual));
        self.put_bit(residual < 0);
        let mag = (residual.unsigned_abs() - SYM_MAX as u64) as u64; // >= 1
        let nbits = 64 - mag.leading_zeros();
        for _ in 1..nbits {
            self.put_bit(false);
        }
        for i in (0..nbits).rev() {
            self.put_bit((mag >> i) & 1 == 1);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        let mut state: u64 = RANS_L;
        let mut words: Vec<u32> = Vec::new();
        for step in self.steps.iter().rev() {
            let (cum, freq) = match *step {
                Step::Sym { cum, freq } => (cum, freq),
                Step::Bit(b) => (if b { BYPASS_HALF } else { 0 }, BYPASS_HALF),
            };
            let x_max = ((RANS_L >> CDF_BITS) << 32) * freq as u64;
            while state >= x_max {
                words.push(state as u32);
                state >>= 32;
            }
            state = ((state / freq as u64) << CDF_BITS) + (state % freq as u64) + cum as u64;
        }
        let mut out = Vec::with_capacity(8 + 4 * words.len());
        out.extend_from_slice(&state.to_le_bytes());
        for w in words.iter().rev() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }
}

pub struct RangeDecoder<'a> {
    state: u64,
    payload: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(payload: &'a [u8]) -> Result<Self> {
        if payload.len() < 8 || (payload.len() - 8) % 4 != 0 {
            return Err(IcmError::CorruptStream("payload too short".into()));
        }
        let state = u64::from_le_bytes(payload[..8].try_into().unwrap());
        Ok(RangeDecoder { state, payload, pos: 8 })
    }

    fn refill(&mut self) -> Result<()> {
        while self.state < RANS_L {
            if self.pos + 4 > self.payload.len() {
                return Err(IcmError::CorruptStream("truncated payload".into()));
            }
            let w = u32::from_le_bytes(self.payload[self.pos..self.pos + 4].try_into().unwrap());
            self.pos += 4;
            self.state = (self.state << 32) | w as u64;
        }
        Ok(())
    }

    pub fn get_symbol(&mut self, cdf: &[u32]) -> Result<usize> {
        let slot = (self.state & (CDF_TOTAL as u64 - 1)) as u32;
        // cdf is strictly increasing (every count >= 1)
        let sym = match cdf.binary_search(&slot) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let (cum, freq) = (cdf[sym], cdf[sym + 1] - cdf[sym]);
        self.state = freq as u64 * (self.state >> CDF_BITS) + slot as u64 - cum as u64;
        self.refill()?;
        Ok(sym)
    }

    pub fn get_bit(&mut self) -> Result<bool> {
        let slot = (self.state & (CDF_TOTAL as u64 - 1)) as u32;
        let bit = slot >= BYPASS_HALF;
        let cum = if bit { BYPASS_HALF } else { 0 };
        self.state = BYPASS_HALF as u64 * (self.state >> CDF_BITS) + slot as u64 - cum as u64;
        self.refill()?;
        Ok(bit)
    }

    pub fn get_escape(&mut self) -> Result<i64> {
        let neg = self.get_bit()?;
        let mut zeros = 0u32;
        while !self.get_bit()? {
            zeros += 1;
            if zeros > 62 {
                return Err(IcmError::CorruptStream("bad escape code".into()));
            }
        }
        let mut mag: u64 = 1;
        for _ in 0..zeros {
            mag = (mag << 1) | self.get_bit()? as u64;
        }
        let r = (mag + SYM_MAX as u64) as i64;
        Ok(if neg { -r } else { r })
    }
}
