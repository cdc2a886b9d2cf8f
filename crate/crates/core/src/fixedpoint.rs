//! Fixed-point formats and the integer decomposition used by bit-serial
//! crossbar arithmetic.
//!
//! Weights are split into unsigned `slice_width`-bit slices (one crossbar
//! per slice), with the sign carried by a differential pair of channels.
//! Inputs are streamed as unsigned chunks of their two's-complement bit
//! pattern; the top bit of the most significant stream carries weight
//! `-2^(input_bits - 1)`. Because a crossbar cannot be driven with a
//! negative voltage, that correction is evaluated as a separate pass over
//! the sign bits (see [`shift_and_add`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A binary fixed-point format: `total_bits` wide with `frac_bits` after the point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxpFormat {
    pub total_bits: u32,
    pub frac_bits: u32,
    pub signed: bool,
}

impl FxpFormat {
    pub fn new(total_bits: u32, frac_bits: u32, signed: bool) -> Result<Self> {
        if !(1..=32).contains(&total_bits) {
            return Err(Error::Format(format!("total_bits must be in 1..=32, got {total_bits}")));
        }
        if frac_bits >= total_bits {
            return Err(Error::Format(format!(
                "frac_bits ({frac_bits}) must be below total_bits ({total_bits})"
            )));
        }
        Ok(Self {
            total_bits,
            frac_bits,
            signed,
        })
    }

    /// Signed `Qtotal.frac`, e.g. `FxpFormat::q(16, 13)`.
    pub fn q(total_bits: u32, frac_bits: u32) -> Self {
        Self::new(total_bits, frac_bits, true).expect("invalid fixed-point format")
    }

    pub fn min_code(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.total_bits - 1))
        } else {
            0
        }
    }

    pub fn max_code(&self) -> i64 {
        if self.signed {
            (1i64 << (self.total_bits - 1)) - 1
        } else {
            (1i64 << self.total_bits) - 1
        }
    }

    /// Value of one least-significant bit.
    pub fn step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn min_value(&self) -> f64 {
        self.min_code() as f64 * self.step()
    }

    pub fn max_value(&self) -> f64 {
        self.max_code() as f64 * self.step()
    }

    /// Round-to-nearest-even with silent saturation.
    pub fn quantize(&self, x: f64) -> i64 {
        self.quantize_flagged(x).0
    }

    /// Like [`quantize`](Self::quantize), also reporting whether the value saturated.
    pub fn quantize_flagged(&self, x: f64) -> (i64, bool) {
        if x.is_nan() {
            return (0, true);
        }
        // Scaling by a power of two is exact, so the only rounding is the tie-even step.
        let scaled = (x * (self.frac_bits as f64).exp2()).round_ties_even();
        let (lo, hi) = (self.min_code(), self.max_code());
        if scaled < lo as f64 {
            (lo, true)
        } else if scaled > hi as f64 {
            (hi, true)
        } else {
            (scaled as i64, false)
        }
    }

    pub fn dequantize(&self, code: i64) -> f64 {
        code as f64 * self.step()
    }

    /// Clamp an already-scaled integer code into range.
    pub fn saturate(&self, code: i128) -> (i64, bool) {
        let (lo, hi) = (self.min_code() as i128, self.max_code() as i128);
        if code < lo {
            (lo as i64, true)
        } else if code > hi {
            (hi as i64, true)
        } else {
            (code as i64, false)
        }
    }
}

/// Saturation-aware quantizer that keeps a running count for diagnostics.
#[derive(Debug, Clone)]
pub struct Quantizer {
    pub format: FxpFormat,
    pub saturations: u64,
}

impl Quantizer {
    pub fn new(format: FxpFormat) -> Self {
        Self { format, saturations: 0 }
    }

    pub fn quantize(&mut self, x: f64) -> i64 {
        let (code, sat) = self.format.quantize_flagged(x);
        self.saturations += sat as u64;
        code
    }
}

/// Rescale an integer carrying `from_frac` fractional bits to `to_frac`
/// fractional bits, rounding to nearest-even when bits are dropped.
pub fn rescale_round_even(code: i128, from_frac: u32, to_frac: u32) -> i128 {
    if to_frac >= from_frac {
        return code << (to_frac - from_frac);
    }
    let shift = from_frac - to_frac;
    let floor = code >> shift;
    let rem = code - (floor << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// How weight codes are cut into slices and input codes into streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceScheme {
    pub weight_bits: u32,
    pub slice_width: u32,
    pub input_bits: u32,
    pub stream_width: u32,
}

impl SliceScheme {
    pub fn new(weight_bits: u32, slice_width: u32, input_bits: u32, stream_width: u32) -> Result<Self> {
        let ok = |total: u32, width: u32| width >= 1 && width <= total && total.is_multiple_of(width);
        if !(1..=32).contains(&weight_bits) || !ok(weight_bits, slice_width) {
            return Err(Error::Format(format!(
                "slice width {slice_width} must divide weight bits {weight_bits}"
            )));
        }
        if !(1..=32).contains(&input_bits) || !ok(input_bits, stream_width) {
            return Err(Error::Format(format!(
                "stream width {stream_width} must divide input bits {input_bits}"
            )));
        }
        Ok(Self {
            weight_bits,
            slice_width,
            input_bits,
            stream_width,
        })
    }

    pub fn n_slices(&self) -> usize {
        (self.weight_bits / self.slice_width) as usize
    }

    pub fn n_streams(&self) -> usize {
        (self.input_bits / self.stream_width) as usize
    }

    /// Largest unsigned value a single slice can hold.
    pub fn slice_max(&self) -> u32 {
        ((1u64 << self.slice_width) - 1) as u32
    }

    pub fn stream_max(&self) -> u32 {
        ((1u64 << self.stream_width) - 1) as u32
    }

    /// Shift factor `2^(k * slice_width)` for slice `k`.
    pub fn slice_factor(&self, k: usize) -> f64 {
        ((k as u32 * self.slice_width) as f64).exp2()
    }

    /// Shift factor `2^(s * stream_width)` for stream `s`.
    pub fn stream_factor(&self, s: usize) -> f64 {
        ((s as u32 * self.stream_width) as f64).exp2()
    }

    /// Weight of the two's-complement sign bit, `-2^input_bits` relative to
    /// the unsigned reading of the full input pattern.
    pub fn sign_factor(&self) -> f64 {
        -(self.input_bits as f64).exp2()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignChannel {
    Positive,
    Negative,
}

impl SignChannel {
    pub fn sign(self) -> f64 {
        match self {
            SignChannel::Positive => 1.0,
            SignChannel::Negative => -1.0,
        }
    }
}

/// Magnitude of one weight channel as little-endian unsigned slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlicedValue {
    pub slices: Vec<u32>,
    pub sign_channel: SignChannel,
}

impl SlicedValue {
    /// Signed integer this channel contributes.
    pub fn recombine(&self, scheme: &SliceScheme) -> i64 {
        let mag = self
            .slices
            .iter()
            .enumerate()
            .map(|(k, &s)| (s as i64) << (k as u32 * scheme.slice_width))
            .sum::<i64>();
        match self.sign_channel {
            SignChannel::Positive => mag,
            SignChannel::Negative => -mag,
        }
    }
}

fn check_signed_range(code: i64, bits: u32, inclusive_min: bool) -> Result<()> {
    let half = 1i64 << (bits - 1);
    let lo = if inclusive_min { -half } else { -half + 1 };
    if code < lo || code >= half {
        return Err(Error::Range(format!("code {code} outside the {bits}-bit signed range")));
    }
    Ok(())
}

/// Split a signed weight code into (positive, negative) channel slices.
pub fn slice_weight(code: i64, scheme: &SliceScheme) -> Result<(SlicedValue, SlicedValue)> {
    check_signed_range(code, scheme.weight_bits, false)?;
    let mask = scheme.slice_max() as u64;
    let mag = code.unsigned_abs();
    let slices: Vec<u32> = (0..scheme.n_slices())
        .map(|k| ((mag >> (k as u32 * scheme.slice_width)) & mask) as u32)
        .collect();
    let zeros = vec![0; scheme.n_slices()];
    let (pos, neg) = if code < 0 { (zeros, slices) } else { (slices, zeros) };
    Ok((
        SlicedValue {
            slices: pos,
            sign_channel: SignChannel::Positive,
        },
        SlicedValue {
            slices: neg,
            sign_channel: SignChannel::Negative,
        },
    ))
}

/// Two's-complement streams of an input code, least significant first.
pub fn stream_input(code: i64, scheme: &SliceScheme) -> Result<Vec<u32>> {
    check_signed_range(code, scheme.input_bits, true)?;
    let pattern = (code as u64) & (u64::MAX >> (64 - scheme.input_bits));
    let mask = scheme.stream_max() as u64;
    Ok((0..scheme.n_streams())
        .map(|s| ((pattern >> (s as u32 * scheme.stream_width)) & mask) as u32)
        .collect())
}

/// The two's-complement sign bit of an input code (top bit of its MSB stream).
pub fn input_sign_bit(code: i64) -> u32 {
    (code < 0) as u32
}

/// Reassemble an input code from its streams.
pub fn recombine_streams(streams: &[u32], scheme: &SliceScheme) -> i64 {
    let unsigned: i64 = streams
        .iter()
        .enumerate()
        .map(|(s, &v)| (v as i64) << (s as u32 * scheme.stream_width))
        .sum();
    let top = (unsigned >> (scheme.input_bits - 1)) & 1;
    unsigned - (top << scheme.input_bits)
}

/// Merge per-(stream, slice) partial results into one value.
///
/// `partials[s][k]` is the dot product of stream `s` (unsigned chunk values)
/// with slice `k`. `sign_partials[k]`, when present, is the dot product of
/// the input sign bits with slice `k`; it is scaled by `-2^input_bits`. It
/// may be omitted when every input in the vector is non-negative.
pub fn shift_and_add(
    partials: &[Vec<f64>],
    sign_partials: Option<&[f64]>,
    scheme: &SliceScheme,
    channel: SignChannel,
) -> f64 {
    debug_assert_eq!(partials.len(), scheme.n_streams());
    // Streams outer, slices inner.
    let mut acc = 0.0;
    for (s, row) in partials.iter().enumerate() {
        debug_assert_eq!(row.len(), scheme.n_slices());
        let mut merged = 0.0;
        for (k, &p) in row.iter().enumerate() {
            merged += scheme.slice_factor(k) * p;
        }
        acc += scheme.stream_factor(s) * merged;
    }
    if let Some(sign) = sign_partials {
        let merged: f64 = sign.iter().enumerate().map(|(k, &p)| scheme.slice_factor(k) * p).sum();
        acc += scheme.sign_factor() * merged;
    }
    channel.sign() * acc
}
