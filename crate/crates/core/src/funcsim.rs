//! Tiled, bit-sliced crossbar evaluation of quantized layers.
//!
//! A weight matrix `(rows, cols)` of fixed-point codes is cut into
//! `xbar x xbar` tiles, each code into unsigned slices on a differential
//! pair of channels, and every slice of every tile is programmed onto its
//! own crossbar. Inputs are streamed a few bits at a time as voltages. Each
//! crossbar's column currents pass through an ADC, the two channels are
//! subtracted, and shift-and-add merges streams and slices into an
//! accumulator; tiles in the same column add their partial sums.
//!
//! Partial results are measured in *product units*: the current one unit of
//! stream value produces through one unit of slice value,
//! `(v_supply / stream_max) * ((G_on - G_off) / slice_max)`. The `G_off`
//! floor is common to both channels and cancels on subtraction.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Array4, Array5, ArrayView2, ArrayView4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{linear_transfer_matrix, solve_nonlinear, CrossbarConfig, CrossbarState};
use crate::datagen::{slice_conductance, stream_voltage};
use crate::error::{Error, Result};
use crate::fixedpoint::{input_sign_bit, rescale_round_even, slice_weight, stream_input, FxpFormat, SliceScheme};
use crate::surrogate::{BoundSurrogate, SurrogateModel};

/// Where shift-and-add results are accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accumulator {
    /// Saturating register; each tile's merged partial sum is rounded into it.
    Fixed(FxpFormat),
    /// Unbounded integer at `input_frac + weight_frac` fractional bits.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvmArch {
    /// Crossbar rows and columns.
    pub xbar: usize,
    pub scheme: SliceScheme,
    /// `0` bypasses the ADC.
    pub adc_bits: u32,
    /// Defaults to `xbar * G_on * v_supply`.
    pub adc_full_scale: Option<f64>,
    pub accumulator: Accumulator,
}

impl MvmArch {
    pub fn new(xbar: usize, scheme: SliceScheme) -> Self {
        Self {
            xbar,
            scheme,
            adc_bits: 14,
            adc_full_scale: None,
            accumulator: Accumulator::Fixed(FxpFormat::q(32, 24)),
        }
    }

    pub fn with_adc_bits(mut self, bits: u32) -> Self {
        self.adc_bits = bits;
        self
    }

    pub fn with_accumulator(mut self, acc: Accumulator) -> Self {
        self.accumulator = acc;
        self
    }

    pub fn validate(&self, cfg: &CrossbarConfig) -> Result<()> {
        if self.xbar == 0 || cfg.n_rows != self.xbar || cfg.n_cols != self.xbar {
            return Err(Error::Config(format!(
                "architecture crossbar size {} does not match circuit {}x{}",
                self.xbar, cfg.n_rows, cfg.n_cols
            )));
        }
        if self.adc_bits > 32 {
            return Err(Error::Config("adc_bits must be at most 32".into()));
        }
        if let Some(fs) = self.adc_full_scale {
            if !(fs > 0.0 && fs.is_finite()) {
                return Err(Error::Config("adc_full_scale must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn full_scale(&self, cfg: &CrossbarConfig) -> f64 {
        self.adc_full_scale
            .unwrap_or(self.xbar as f64 * cfg.g_on() * cfg.v_supply)
    }

    /// Current of one product unit.
    pub fn product_unit(&self, cfg: &CrossbarConfig) -> f64 {
        cfg.v_supply / self.scheme.stream_max() as f64 * (cfg.g_on() - cfg.g_off()) / self.scheme.slice_max() as f64
    }
}

/// Uniform ADC over `[0, full_scale]`. Returns the reconstructed current and
/// whether the input was clipped.
pub fn adc(i: f64, bits: u32, full_scale: f64) -> (f64, bool) {
    if bits == 0 {
        return (i, false);
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let lsb = full_scale / levels;
    let code = (i / lsb).round_ties_even();
    if code < 0.0 {
        (0.0, true)
    } else if code > levels {
        (full_scale, true)
    } else {
        (code * lsb, false)
    }
}

/// Conductances of a sliced, tiled weight matrix, one five-axis array
/// `(slice, tile_row, tile_col, xbar_row, xbar_col)` per sign channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TiledWeights {
    pub rows: usize,
    pub cols: usize,
    pub xbar: usize,
    pub pos: Array5<f64>,
    pub neg: Array5<f64>,
}

impl TiledWeights {
    pub fn n_slices(&self) -> usize {
        self.pos.shape()[0]
    }

    pub fn tile_rows(&self) -> usize {
        self.pos.shape()[1]
    }

    pub fn tile_cols(&self) -> usize {
        self.pos.shape()[2]
    }

    /// Padded rows in tile row `tr`.
    pub fn padded_rows(&self, tr: usize) -> usize {
        ((tr + 1) * self.xbar).saturating_sub(self.rows).min(self.xbar)
    }

    /// Columns of tile column `tc` that hold real outputs.
    pub fn live_cols(&self, tc: usize) -> usize {
        self.cols.saturating_sub(tc * self.xbar).min(self.xbar)
    }

    pub fn channel(&self, negative: bool) -> &Array5<f64> {
        if negative {
            &self.neg
        } else {
            &self.pos
        }
    }
}

/// Slice, tile and map a `(rows, cols)` matrix of weight codes to conductances.
/// Padding cells hold `G_off` on both channels.
pub fn tile_and_program(codes: ArrayView2<i64>, arch: &MvmArch, cfg: &CrossbarConfig) -> Result<TiledWeights> {
    arch.validate(cfg)?;
    let (rows, cols) = codes.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension("weight matrix is empty".into()));
    }
    let x = arch.xbar;
    let (tr, tc) = (rows.div_ceil(x), cols.div_ceil(x));
    let ns = arch.scheme.n_slices();
    let shape = (ns, tr, tc, x, x);
    let mut pos = Array5::from_elem(shape, cfg.g_off());
    let mut neg = Array5::from_elem(shape, cfg.g_off());
    let width = arch.scheme.slice_width;
    for ((r, c), &code) in codes.indexed_iter() {
        let (p, n) = slice_weight(code, &arch.scheme)?;
        for k in 0..ns {
            let idx = (k, r / x, c / x, r % x, c % x);
            pos[idx] = slice_conductance(cfg, p.slices[k], width);
            neg[idx] = slice_conductance(cfg, n.slices[k], width);
        }
    }
    Ok(TiledWeights {
        rows,
        cols,
        xbar: x,
        pos,
        neg,
    })
}

/// Recover the slice level a conductance encodes.
pub fn conductance_level(g: f64, cfg: &CrossbarConfig, width: u32) -> u32 {
    let max = ((1u64 << width) - 1) as f64;
    ((g - cfg.g_off()) / (cfg.g_on() - cfg.g_off()) * max)
        .round()
        .clamp(0.0, max) as u32
}

/// Input codes split into streams, `(batch, tile_row, xbar_row, stream)`,
/// plus the two's-complement sign bit of each code.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamedInputs {
    pub rows: usize,
    pub streams: Array4<u32>,
    pub sign: Array3<u8>,
}

impl StreamedInputs {
    pub fn from_codes(x: ArrayView2<i64>, arch: &MvmArch) -> Result<Self> {
        let (batch, rows) = x.dim();
        let xb = arch.xbar;
        let tr = rows.div_ceil(xb);
        let ns = arch.scheme.n_streams();
        let mut streams = Array4::zeros((batch, tr, xb, ns));
        let mut sign = Array3::zeros((batch, tr, xb));
        for ((b, r), &code) in x.indexed_iter() {
            let st = stream_input(code, &arch.scheme)?;
            for (s, v) in st.into_iter().enumerate() {
                streams[(b, r / xb, r % xb, s)] = v;
            }
            sign[(b, r / xb, r % xb)] = input_sign_bit(code) as u8;
        }
        Ok(Self { rows, streams, sign })
    }

    pub fn batch(&self) -> usize {
        self.streams.shape()[0]
    }

    pub fn tile_rows(&self) -> usize {
        self.streams.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Ideal,
    AnalyticalLinear,
    NonlinearOracle,
    Surrogate,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Ideal => "ideal",
            BackendKind::AnalyticalLinear => "analytical_linear",
            BackendKind::NonlinearOracle => "nonlinear_oracle",
            BackendKind::Surrogate => "surrogate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ideal" => Some(BackendKind::Ideal),
            "analytical_linear" => Some(BackendKind::AnalyticalLinear),
            "nonlinear_oracle" => Some(BackendKind::NonlinearOracle),
            "surrogate" => Some(BackendKind::Surrogate),
            _ => None,
        }
    }
}

/// What services one crossbar evaluation.
#[derive(Debug, Clone)]
pub struct CrossbarBackend<'a> {
    pub kind: BackendKind,
    pub cfg: CrossbarConfig,
    surrogate: Option<&'a SurrogateModel>,
}

impl<'a> CrossbarBackend<'a> {
    pub fn new(kind: BackendKind, cfg: CrossbarConfig) -> Result<Self> {
        cfg.validate()?;
        if kind == BackendKind::Surrogate {
            return Err(Error::Config("the surrogate backend needs a trained model".into()));
        }
        Ok(Self {
            kind,
            cfg,
            surrogate: None,
        })
    }

    pub fn ideal(cfg: CrossbarConfig) -> Result<Self> {
        Self::new(BackendKind::Ideal, cfg)
    }

    pub fn surrogate(cfg: CrossbarConfig, model: &'a SurrogateModel) -> Result<Self> {
        cfg.validate()?;
        model.check_config(&cfg)?;
        Ok(Self {
            kind: BackendKind::Surrogate,
            cfg,
            surrogate: Some(model),
        })
    }

    pub fn prepare(&self, g: ArrayView2<f64>) -> Result<PreparedCrossbar<'a>> {
        Ok(match self.kind {
            BackendKind::Ideal => PreparedCrossbar::Ideal(g.to_owned()),
            BackendKind::AnalyticalLinear => {
                PreparedCrossbar::Linear(linear_transfer_matrix(&self.cfg, g)?.reversed_axes())
            }
            BackendKind::NonlinearOracle => PreparedCrossbar::Nonlinear(CrossbarState::program(&self.cfg, g)?),
            BackendKind::Surrogate => {
                let model = self.surrogate.expect("surrogate backend always carries a model");
                PreparedCrossbar::Surrogate(model.bind(&self.cfg, g)?)
            }
        })
    }

    /// Column currents for one voltage vector.
    pub fn currents(&self, v: &[f64], g: ArrayView2<f64>) -> Result<Vec<f64>> {
        let prepared = self.prepare(g)?;
        let v = ArrayView2::from_shape((1, v.len()), v).map_err(|e| Error::Dimension(e.to_string()))?;
        let (i, _) = prepared.eval(&self.cfg, v)?;
        Ok(i.into_raw_vec_and_offset().0)
    }
}

/// One programmed crossbar, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub enum PreparedCrossbar<'a> {
    Ideal(Array2<f64>),
    /// Transposed transfer matrix, `(rows, cols)`.
    Linear(Array2<f64>),
    Nonlinear(CrossbarState),
    Surrogate(BoundSurrogate<'a>),
}

impl PreparedCrossbar<'_> {
    /// Currents for each row of `v`, plus surrogate clamp/fallback counts.
    pub fn eval(&self, cfg: &CrossbarConfig, v: ArrayView2<f64>) -> Result<(Array2<f64>, Counters)> {
        let mut counters = Counters::default();
        let out = match self {
            PreparedCrossbar::Ideal(g) | PreparedCrossbar::Linear(g) => {
                if v.ncols() != g.nrows() {
                    return Err(Error::Dimension("voltage batch does not match crossbar".into()));
                }
                let mut i = Array2::zeros((v.nrows(), g.ncols()));
                general_mat_mul(1.0, &v, g, 0.0, &mut i);
                i
            }
            PreparedCrossbar::Nonlinear(state) => {
                let mut i = Array2::zeros((v.nrows(), cfg.n_cols));
                for (row, mut out) in v.rows().into_iter().zip(i.rows_mut()) {
                    if row.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let row = row.to_vec();
                    let res = solve_nonlinear(cfg, state, &row)?;
                    out.assign(&ndarray::ArrayView1::from(&res.i_out));
                }
                i
            }
            PreparedCrossbar::Surrogate(bound) => {
                let pred = bound.predict(v)?;
                counters.surrogate_clamps += pred.clamped as u64;
                counters.surrogate_fallbacks += pred.fallbacks as u64;
                pred.currents
            }
        };
        counters.crossbar_evals += v.nrows() as u64;
        Ok((out, counters))
    }
}

/// Diagnostic counts accumulated over an evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub crossbar_evals: u64,
    pub adc_clips: u64,
    pub accumulator_saturations: u64,
    pub output_saturations: u64,
    pub surrogate_clamps: u64,
    pub surrogate_fallbacks: u64,
}

impl Counters {
    pub fn merge(&mut self, o: &Counters) {
        self.crossbar_evals += o.crossbar_evals;
        self.adc_clips += o.adc_clips;
        self.accumulator_saturations += o.accumulator_saturations;
        self.output_saturations += o.output_saturations;
        self.surrogate_clamps += o.surrogate_clamps;
        self.surrogate_fallbacks += o.surrogate_fallbacks;
    }
}

/// Fixed-point formats of a layer's input, weights and output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFormats {
    pub input: FxpFormat,
    pub weight: FxpFormat,
    pub output: FxpFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvmOutput {
    /// `(batch, cols)` output codes.
    pub codes: Array2<i64>,
    pub counters: Counters,
}

/// A weight matrix with every crossbar prepared on a backend.
#[derive(Debug)]
pub struct ProgrammedLayer<'a> {
    pub weights: TiledWeights,
    pub arch: MvmArch,
    pub backend: CrossbarBackend<'a>,
    /// Indexed `[channel][slice][tile_row][tile_col]`, flattened.
    xbars: Vec<PreparedCrossbar<'a>>,
}

/// Rows per crossbar evaluation call.
const EVAL_CHUNK: usize = 2048;

impl<'a> ProgrammedLayer<'a> {
    pub fn new(weights: TiledWeights, arch: MvmArch, backend: CrossbarBackend<'a>) -> Result<Self> {
        arch.validate(&backend.cfg)?;
        if weights.xbar != arch.xbar || weights.n_slices() != arch.scheme.n_slices() {
            return Err(Error::Config("tiled weights do not match the architecture".into()));
        }
        let (ns, tr, tc) = (weights.n_slices(), weights.tile_rows(), weights.tile_cols());
        let jobs: Vec<(bool, usize, usize, usize)> = [false, true]
            .into_iter()
            .flat_map(|ch| (0..ns).flat_map(move |k| (0..tr).flat_map(move |r| (0..tc).map(move |c| (ch, k, r, c)))))
            .collect();
        let xbars = jobs
            .par_iter()
            .map(|&(ch, k, r, c)| {
                let g = weights.channel(ch).slice(s![k, r, c, .., ..]);
                backend.prepare(g).map_err(|e| Error::Tile {
                    tile_row: r,
                    tile_col: c,
                    slice: k,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights,
            arch,
            backend,
            xbars,
        })
    }

    /// Tile and program `codes` in one step.
    pub fn program(codes: ArrayView2<i64>, arch: MvmArch, backend: CrossbarBackend<'a>) -> Result<Self> {
        let w = tile_and_program(codes, &arch, &backend.cfg)?;
        Self::new(w, arch, backend)
    }

    fn xbar(&self, negative: bool, k: usize, r: usize, c: usize) -> &PreparedCrossbar<'a> {
        let (ns, tr, tc) = (
            self.weights.n_slices(),
            self.weights.tile_rows(),
            self.weights.tile_cols(),
        );
        &self.xbars[(((negative as usize) * ns + k) * tr + r) * tc + c]
    }

    /// Evaluate the layer on streamed inputs, producing output codes.
    pub fn mvm(&self, inputs: &StreamedInputs, formats: &LayerFormats, bias: Option<&[i64]>) -> Result<MvmOutput> {
        let sch = &self.arch.scheme;
        if inputs.rows != self.weights.rows || inputs.streams.shape()[2] != self.arch.xbar {
            return Err(Error::Dimension(format!(
                "input has {} rows, weight matrix has {}",
                inputs.rows, self.weights.rows
            )));
        }
        if sch.input_bits != formats.input.total_bits || sch.weight_bits != formats.weight.total_bits {
            return Err(Error::Config(
                "slice scheme widths do not match the layer formats".into(),
            ));
        }
        if let Some(b) = bias {
            if b.len() != self.weights.cols {
                return Err(Error::Dimension("bias length does not match output columns".into()));
            }
        }
        let batch = inputs.batch();
        let chunks: Vec<(usize, usize)> = (0..batch)
            .step_by(EVAL_CHUNK)
            .map(|b0| (b0, (b0 + EVAL_CHUNK).min(batch)))
            .collect();
        let jobs: Vec<(usize, (usize, usize))> = (0..self.weights.tile_cols())
            .flat_map(|tc| chunks.iter().map(move |&c| (tc, c)))
            .collect();
        let parts = jobs
            .par_iter()
            .map(|&(tc, (b0, b1))| self.tile_column(inputs, tc, b0, b1, formats, bias))
            .collect::<Result<Vec<_>>>()?;
        let mut codes = Array2::zeros((batch, self.weights.cols));
        let mut counters = Counters::default();
        for (&(tc, (b0, b1)), (block, c)) in jobs.iter().zip(parts) {
            let c0 = tc * self.arch.xbar;
            let live = self.weights.live_cols(tc);
            codes.slice_mut(s![b0..b1, c0..c0 + live]).assign(&block);
            counters.merge(&c);
        }
        Ok(MvmOutput { codes, counters })
    }

    fn tile_column(
        &self,
        inputs: &StreamedInputs,
        tc: usize,
        b0: usize,
        b1: usize,
        formats: &LayerFormats,
        bias: Option<&[i64]>,
    ) -> Result<(Array2<i64>, Counters)> {
        let cfg = &self.backend.cfg;
        let sch = &self.arch.scheme;
        let (xb, nb) = (self.arch.xbar, b1 - b0);
        let (ns, nk) = (sch.n_streams(), sch.n_slices());
        let live = self.weights.live_cols(tc);
        let unit = self.arch.product_unit(cfg);
        let fs = self.arch.full_scale(cfg);
        let smax = sch.stream_max() as f64;
        let prod_frac = formats.input.frac_bits + formats.weight.frac_bits;
        let mut counters = Counters::default();
        let mut acc = Array2::<i128>::zeros((nb, live));

        for tr in 0..self.weights.tile_rows() {
            let sign = inputs.sign.slice(s![b0..b1, tr, ..]);
            let has_sign = sign.iter().any(|&b| b != 0);
            let passes = ns + has_sign as usize;
            // Pass `s` occupies rows `s*nb..(s+1)*nb`; the sign pass drives
            // full-scale voltage on rows whose code is negative.
            let mut v = Array2::zeros((passes * nb, xb));
            for s_idx in 0..ns {
                let st = inputs.streams.slice(s![b0..b1, tr, .., s_idx]);
                v.slice_mut(s![s_idx * nb..(s_idx + 1) * nb, ..])
                    .assign(&st.mapv(|x| stream_voltage(cfg, x, sch.stream_width)));
            }
            if has_sign {
                v.slice_mut(s![ns * nb.., ..])
                    .assign(&sign.mapv(|b| if b != 0 { cfg.v_supply } else { 0.0 }));
            }

            // diff[k] in product units, (passes * nb, live).
            let mut diffs = Vec::with_capacity(nk);
            for k in 0..nk {
                let mut d = Array2::<f64>::zeros((passes * nb, live));
                for negative in [false, true] {
                    let xbar = self.xbar(negative, k, tr, tc);
                    let (i, c) = xbar.eval(cfg, v.view()).map_err(|e| Error::Tile {
                        tile_row: tr,
                        tile_col: tc,
                        slice: k,
                        source: Box::new(e),
                    })?;
                    counters.merge(&c);
                    let sgn = if negative { -1.0 } else { 1.0 };
                    for (dv, &iv) in d.iter_mut().zip(i.slice(s![.., ..live]).iter()) {
                        let (q, clipped) = adc(iv, self.arch.adc_bits, fs);
                        counters.adc_clips += clipped as u64;
                        *dv += sgn * q / unit;
                    }
                }
                if has_sign {
                    d.slice_mut(s![ns * nb.., ..]).mapv_inplace(|x| x / smax);
                }
                diffs.push(d);
            }

            for b in 0..nb {
                for j in 0..live {
                    match self.arch.accumulator {
                        Accumulator::Exact => {
                            let mut sum: i128 = 0;
                            for s_idx in 0..ns {
                                for (k, d) in diffs.iter().enumerate() {
                                    let p = d[[s_idx * nb + b, j]].round_ties_even() as i128;
                                    sum += p << (s_idx as u32 * sch.stream_width + k as u32 * sch.slice_width);
                                }
                            }
                            if has_sign {
                                for (k, d) in diffs.iter().enumerate() {
                                    let p = d[[ns * nb + b, j]].round_ties_even() as i128;
                                    sum -= p << (sch.input_bits + k as u32 * sch.slice_width);
                                }
                            }
                            acc[[b, j]] += sum;
                        }
                        Accumulator::Fixed(fmt) => {
                            let mut merged = 0.0;
                            for s_idx in 0..ns {
                                let mut inner = 0.0;
                                for (k, d) in diffs.iter().enumerate() {
                                    inner += sch.slice_factor(k) * d[[s_idx * nb + b, j]];
                                }
                                merged += sch.stream_factor(s_idx) * inner;
                            }
                            if has_sign {
                                let inner: f64 = diffs
                                    .iter()
                                    .enumerate()
                                    .map(|(k, d)| sch.slice_factor(k) * d[[ns * nb + b, j]])
                                    .sum();
                                merged += sch.sign_factor() * inner;
                            }
                            let scaled = merged * (fmt.frac_bits as f64 - prod_frac as f64).exp2();
                            let (next, sat) = fmt.saturate(acc[[b, j]] + scaled.round_ties_even() as i128);
                            counters.accumulator_saturations += sat as u64;
                            acc[[b, j]] = next as i128;
                        }
                    }
                }
            }
        }

        let acc_frac = match self.arch.accumulator {
            Accumulator::Exact => prod_frac,
            Accumulator::Fixed(fmt) => fmt.frac_bits,
        };
        let c0 = tc * xb;
        let mut out = Array2::zeros((nb, live));
        for ((b, j), o) in out.indexed_iter_mut() {
            let mut a = acc[[b, j]];
            if let Some(bias) = bias {
                a += rescale_round_even(bias[c0 + j] as i128, formats.output.frac_bits, acc_frac);
                if let Accumulator::Fixed(fmt) = self.arch.accumulator {
                    let (next, sat) = fmt.saturate(a);
                    counters.accumulator_saturations += sat as u64;
                    a = next as i128;
                }
            }
            let (code, sat) = formats
                .output
                .saturate(rescale_round_even(a, acc_frac, formats.output.frac_bits));
            counters.output_saturations += sat as u64;
            *o = code;
        }
        Ok((out, counters))
    }
}

/// One-shot tiled MVM: prepare every crossbar of `weights` and evaluate.
pub fn mvm(
    inputs: &StreamedInputs,
    weights: &TiledWeights,
    arch: &MvmArch,
    backend: &CrossbarBackend<'_>,
    formats: &LayerFormats,
    bias: Option<&[i64]>,
) -> Result<MvmOutput> {
    ProgrammedLayer::new(weights.clone(), *arch, backend.clone())?.mvm(inputs, formats, bias)
}

/// Fully connected layer on a `(batch, in_features)` matrix of input codes.
pub fn linear_mvm(
    x: ArrayView2<i64>,
    layer: &ProgrammedLayer<'_>,
    formats: &LayerFormats,
    bias: Option<&[i64]>,
) -> Result<MvmOutput> {
    let inputs = StreamedInputs::from_codes(x, &layer.arch)?;
    layer.mvm(&inputs, formats, bias)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.kernel == 0 || self.stride == 0 || hp < self.kernel || wp < self.kernel {
            return Err(Error::Dimension(format!(
                "kernel {} with stride {} does not fit a padded {hp}x{wp} input",
                self.kernel, self.stride
            )));
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    /// Rows of the unrolled weight matrix, `in_channels * kernel^2`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// `(out, in, k, k)` kernel codes as a `(in*k*k, out)` crossbar matrix,
/// rows ordered channel-major then kernel row then kernel column.
pub fn conv_weight_matrix(w: ArrayView4<i64>) -> Array2<i64> {
    let (o, c, kh, kw) = w.dim();
    let mut m = Array2::zeros((c * kh * kw, o));
    for ((oc, ic, ky, kx), &v) in w.indexed_iter() {
        m[[(ic * kh + ky) * kw + kx, oc]] = v;
    }
    m
}

/// Unroll `(batch, channels, h, w)` into one row per output pixel, ordered
/// batch-major then raster order. Padding contributes code 0.
pub fn im2col(x: ArrayView4<i64>, p: &ConvParams) -> Result<Array2<i64>> {
    let (nb, c, h, w) = x.dim();
    if c != p.in_channels {
        return Err(Error::Dimension(format!(
            "input has {c} channels, layer expects {}",
            p.in_channels
        )));
    }
    let (ho, wo) = p.output_size(h, w)?;
    let k = p.kernel;
    let mut cols = Array2::zeros((nb * ho * wo, p.patch_len()));
    for b in 0..nb {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (b * ho + oy) * wo + ox;
                for ic in 0..c {
                    for ky in 0..k {
                        let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, (ic * k + ky) * k + kx]] = x[[b, ic, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Convolution as repeated MVMs: each output pixel's patch across all input
/// channels is one input vector, and the result is that pixel for every
/// output channel. Returns `(batch, out_channels, ho, wo)`.
pub fn conv2d_mvm(
    x: ArrayView4<i64>,
    params: &ConvParams,
    layer: &ProgrammedLayer<'_>,
    formats: &LayerFormats,
    bias: Option<&[i64]>,
) -> Result<(Array4<i64>, Counters)> {
    if layer.weights.rows != params.patch_len() || layer.weights.cols != params.out_channels {
        return Err(Error::Dimension(format!(
            "programmed matrix is {}x{}, convolution needs {}x{}",
            layer.weights.rows,
            layer.weights.cols,
            params.patch_len(),
            params.out_channels
        )));
    }
    let (nb, _, h, w) = x.dim();
    let (ho, wo) = params.output_size(h, w)?;
    let cols = im2col(x, params)?;
    let out = linear_mvm(cols.view(), layer, formats, bias)?;
    let y = out
        .codes
        .into_shape_with_order((nb, ho, wo, params.out_channels))
        .map_err(|e| Error::Dimension(e.to_string()))?
        .permuted_axes([0, 3, 1, 2]);
    let y = y.as_standard_layout().to_owned();
    Ok((y, out.counters))
}
