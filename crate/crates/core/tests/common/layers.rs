//! Random quantized layers over the simulator's parameter space.

#![allow(dead_code)]

use ndarray::{Array2, Array4};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xbar_core::fixedpoint::{FxpFormat, SliceScheme};
use xbar_core::funcsim::{ConvParams, LayerFormats};

use super::oracle::FxpFormatTriple;

#[derive(Debug, Clone)]
pub struct ConvCase {
    pub params: ConvParams,
    /// `(batch, c, h, w)` input codes.
    pub x: Array4<i64>,
    /// `(o, c, k, k)` weight codes, symmetric range.
    pub w: Array4<i64>,
    pub bias: Vec<i64>,
    pub formats: LayerFormats,
    pub xbar: usize,
    pub stream_width: u32,
    pub slice_width: u32,
}

impl ConvCase {
    pub fn scheme(&self) -> SliceScheme {
        SliceScheme::new(
            self.formats.weight.total_bits,
            self.slice_width,
            self.formats.input.total_bits,
            self.stream_width,
        )
        .unwrap()
    }

    pub fn triple(&self) -> FxpFormatTriple {
        FxpFormatTriple {
            inp: self.formats.input,
            w: self.formats.weight,
            out: self.formats.output,
        }
    }
}

pub fn divisor(rng: &mut ChaCha8Rng, bits: u32) -> u32 {
    let options: Vec<u32> = (1..=bits.min(8)).filter(|w| bits.is_multiple_of(*w)).collect();
    *options.choose(rng).unwrap()
}

fn format(rng: &mut ChaCha8Rng) -> FxpFormat {
    let bits = *[4u32, 8, 16].choose(rng).unwrap();
    FxpFormat::q(bits, rng.random_range(0..bits - 1))
}

/// Full-range codes, including the most negative input code.
fn codes(rng: &mut ChaCha8Rng, f: &FxpFormat, symmetric: bool, n: usize) -> Vec<i64> {
    let lo = if symmetric { -f.max_code() } else { f.min_code() };
    (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => 0,
            1 => lo,
            2 => f.max_code(),
            _ => rng.random_range(lo..=f.max_code()),
        })
        .collect()
}

pub fn random_conv(rng: &mut ChaCha8Rng) -> ConvCase {
    let kernel = rng.random_range(1..=3);
    let padding = rng.random_range(0..=kernel / 2 + 1);
    let stride = rng.random_range(1..=3);
    let h = rng.random_range(kernel.max(2)..=8);
    let w_in = rng.random_range(kernel.max(2)..=8);
    let params = ConvParams {
        in_channels: rng.random_range(1..=5),
        out_channels: rng.random_range(1..=20),
        kernel,
        stride,
        padding,
    };
    let (input, weight) = (format(rng), format(rng));
    let output = FxpFormat::q(16, rng.random_range(4..12));
    let batch = rng.random_range(1..=2);
    let x = Array4::from_shape_vec(
        (batch, params.in_channels, h, w_in),
        codes(rng, &input, false, batch * params.in_channels * h * w_in),
    )
    .unwrap();
    let wlen = params.out_channels * params.in_channels * kernel * kernel;
    let w = Array4::from_shape_vec(
        (params.out_channels, params.in_channels, kernel, kernel),
        codes(rng, &weight, true, wlen),
    )
    .unwrap();
    let bias = codes(rng, &output, false, params.out_channels);
    ConvCase {
        params,
        x,
        w,
        bias,
        formats: LayerFormats { input, weight, output },
        xbar: *[8usize, 16, 32, 64].choose(rng).unwrap(),
        stream_width: divisor(rng, input.total_bits),
        slice_width: divisor(rng, weight.total_bits),
    }
}

/// A dense `(batch, rows) x (rows, cols)` case sharing the conv formats.
pub fn random_matvec(rng: &mut ChaCha8Rng) -> (Array2<i64>, Array2<i64>, Vec<i64>, ConvCase) {
    let case = random_conv(rng);
    let rows = rng.random_range(1..=150);
    let cols = rng.random_range(1..=90);
    let batch = rng.random_range(1..=4);
    let x = Array2::from_shape_vec((batch, rows), codes(rng, &case.formats.input, false, batch * rows)).unwrap();
    let w = Array2::from_shape_vec((rows, cols), codes(rng, &case.formats.weight, true, rows * cols)).unwrap();
    let bias = codes(rng, &case.formats.output, false, cols);
    (x, w, bias, case)
}
