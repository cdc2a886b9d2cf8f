//! WebAssembly bindings for a static demo page. Every export returns JSON;
//! the plain Rust functions behind them are usable natively.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;
use xbar_core::circuit::{ideal_mvm, nonideality_factor, solve_linear, solve_nonlinear, CrossbarConfig, CrossbarState};
use xbar_core::fixedpoint::{input_sign_bit, slice_weight, stream_input, SliceScheme};

/// Largest array the page may request; a nonlinear 64x64 solve stays interactive.
pub const MAX_SIZE: usize = 64;

#[derive(Debug, Serialize)]
pub struct SolveReport {
    pub size: usize,
    pub ideal: Vec<f64>,
    pub linear: Vec<f64>,
    pub nonlinear: Vec<f64>,
    pub nf_linear: Vec<Option<f64>>,
    pub nf_nonlinear: Vec<Option<f64>>,
    pub newton_iterations: usize,
}

/// Random inputs with a fraction `sparsity` of rows at 0 V and of cells at `G_off`.
pub fn solve_random(
    size: usize,
    r_on: f64,
    on_off: f64,
    v_supply: f64,
    r_wire: f64,
    sparsity: f64,
    seed: u64,
) -> Result<SolveReport, String> {
    if size == 0 || size > MAX_SIZE {
        return Err(format!("size must be in 1..={MAX_SIZE}"));
    }
    let mut cfg = CrossbarConfig::square(size)
        .with_r_on(r_on)
        .with_on_off(on_off)
        .with_supply(v_supply);
    cfg.r_wire = r_wire;
    cfg.validate().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sparsity = sparsity.clamp(0.0, 1.0);
    let v: Vec<f64> = (0..size)
        .map(|_| {
            if rng.random_bool(sparsity) {
                0.0
            } else {
                rng.random_range(0.0..=v_supply)
            }
        })
        .collect();
    let g = Array2::from_shape_simple_fn((size, size), || {
        if rng.random_bool(sparsity) {
            cfg.g_off()
        } else {
            rng.random_range(cfg.g_off()..=cfg.g_on())
        }
    });
    let ideal = ideal_mvm(&v, g.view()).map_err(|e| e.to_string())?;
    let linear = solve_linear(&cfg, g.view(), &v).map_err(|e| e.to_string())?.i_out;
    let state = CrossbarState::program(&cfg, g.view()).map_err(|e| e.to_string())?;
    let nl = solve_nonlinear(&cfg, &state, &v).map_err(|e| e.to_string())?;
    Ok(SolveReport {
        size,
        nf_linear: nonideality_factor(&ideal, &linear),
        nf_nonlinear: nonideality_factor(&ideal, &nl.i_out),
        ideal,
        linear,
        nonlinear: nl.i_out,
        newton_iterations: nl.iterations,
    })
}

#[derive(Debug, Serialize)]
pub struct IvCurve {
    pub volts: Vec<f64>,
    /// Device current at the programmed gap.
    pub device: Vec<f64>,
    /// The ohmic line with the same small-signal conductance.
    pub ohmic: Vec<f64>,
    pub gap_nm: f64,
}

/// I-V sweep over `[-v_max, v_max]` for a device programmed to `resistance` ohms.
pub fn iv_curve(resistance: f64, v_max: f64, points: usize) -> Result<IvCurve, String> {
    if !(resistance > 0.0 && v_max > 0.0) || points < 2 {
        return Err("resistance and v_max must be positive, with at least 2 points".into());
    }
    let dev = CrossbarConfig::default().device;
    let g = 1.0 / resistance;
    let gap = dev.small_signal_gap(g);
    let volts: Vec<f64> = (0..points)
        .map(|k| -v_max + 2.0 * v_max * k as f64 / (points - 1) as f64)
        .collect();
    Ok(IvCurve {
        device: volts.iter().map(|&v| dev.current(gap, v)).collect(),
        ohmic: volts.iter().map(|&v| g * v).collect(),
        volts,
        gap_nm: gap,
    })
}

#[derive(Debug, Serialize)]
pub struct Decomposition {
    pub weight_positive: Vec<u32>,
    pub weight_negative: Vec<u32>,
    pub input_streams: Vec<u32>,
    pub input_sign: u32,
    /// `(stream, slice, contribution)` for every nonzero partial product.
    pub partials: Vec<(usize, usize, i64)>,
    pub sign_correction: i64,
    pub product: i64,
}

/// Slice a weight code and stream an input code, then rebuild their product
/// from the partial products the crossbar would compute.
pub fn decompose(
    weight: i64,
    input: i64,
    bits: u32,
    slice_width: u32,
    stream_width: u32,
) -> Result<Decomposition, String> {
    let sch = SliceScheme::new(bits, slice_width, bits, stream_width).map_err(|e| e.to_string())?;
    let (pos, neg) = slice_weight(weight, &sch).map_err(|e| e.to_string())?;
    let streams = stream_input(input, &sch).map_err(|e| e.to_string())?;
    let signed_slice = |k: usize| pos.slices[k] as i64 - neg.slices[k] as i64;
    let mut partials = Vec::new();
    let mut product = 0i64;
    for (s, &x) in streams.iter().enumerate() {
        for k in 0..sch.n_slices() {
            let c = (x as i64 * signed_slice(k)) << (s as u32 * stream_width + k as u32 * slice_width);
            if c != 0 {
                partials.push((s, k, c));
            }
            product += c;
        }
    }
    let sign = input_sign_bit(input);
    let sign_correction = -(0..sch.n_slices())
        .map(|k| (sign as i64 * signed_slice(k)) << (bits + k as u32 * slice_width))
        .sum::<i64>();
    Ok(Decomposition {
        weight_positive: pos.slices,
        weight_negative: neg.slices,
        input_streams: streams,
        input_sign: sign,
        partials,
        sign_correction,
        product: product + sign_correction,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = solveRandom)]
pub fn solve_random_js(
    size: usize,
    r_on: f64,
    on_off: f64,
    v_supply: f64,
    r_wire: f64,
    sparsity: f64,
    seed: u32,
) -> Result<String, JsError> {
    to_js(solve_random(
        size,
        r_on,
        on_off,
        v_supply,
        r_wire,
        sparsity,
        seed as u64,
    ))
}

#[wasm_bindgen(js_name = ivCurve)]
pub fn iv_curve_js(resistance: f64, v_max: f64, points: usize) -> Result<String, JsError> {
    to_js(iv_curve(resistance, v_max, points))
}

#[wasm_bindgen(js_name = decompose)]
pub fn decompose_js(
    weight: i32,
    input: i32,
    bits: u32,
    slice_width: u32,
    stream_width: u32,
) -> Result<String, JsError> {
    to_js(decompose(weight as i64, input as i64, bits, slice_width, stream_width))
}
