//! Independent reference implementations: a dense nodal solver, a
//! chord-conductance fixed-point iteration for the nonlinear network, and
//! direct integer convolution and matrix products.

#![allow(dead_code, clippy::needless_range_loop)]

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbar_core::circuit::{CrossbarConfig, DeviceModel};
use xbar_core::fixedpoint::{rescale_round_even, FxpFormat};
use xbar_core::funcsim::ConvParams;

/// Gaussian elimination with partial pivoting on a dense copy.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Node numbering: word-line nodes, then bit-line nodes, then (with access
/// resistance) the internal node of each cell, all row-major.
struct Net<'a> {
    cfg: &'a CrossbarConfig,
}

impl Net<'_> {
    fn wl(&self, i: usize, j: usize) -> usize {
        i * self.cfg.n_cols + j
    }

    fn bl(&self, i: usize, j: usize) -> usize {
        self.cfg.n_rows * self.cfg.n_cols + i * self.cfg.n_cols + j
    }

    fn mid(&self, i: usize, j: usize) -> usize {
        2 * self.cfg.n_rows * self.cfg.n_cols + i * self.cfg.n_cols + j
    }

    fn size(&self) -> usize {
        let cells = self.cfg.n_rows * self.cfg.n_cols;
        if self.cfg.r_access > 0.0 {
            3 * cells
        } else {
            2 * cells
        }
    }

    /// Device terminals of cell `(i, j)`.
    fn cell(&self, i: usize, j: usize) -> (usize, usize) {
        let top = if self.cfg.r_access > 0.0 {
            self.mid(i, j)
        } else {
            self.wl(i, j)
        };
        (top, self.bl(i, j))
    }

    /// Solve with per-cell device conductances `gc` (row-major).
    fn solve(&self, gc: &[f64], v: &[f64]) -> Vec<f64> {
        let c = self.cfg;
        let n = self.size();
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        let stamp = |p: usize, q: Option<usize>, g: f64, a: &mut Vec<Vec<f64>>| {
            a[p][p] += g;
            if let Some(q) = q {
                a[q][q] += g;
                a[p][q] -= g;
                a[q][p] -= g;
            }
        };
        for i in 0..c.n_rows {
            let g = 1.0 / (c.r_source + c.r_wire);
            stamp(self.wl(i, 0), None, g, &mut a);
            b[self.wl(i, 0)] += g * v[i];
            for j in 1..c.n_cols {
                stamp(self.wl(i, j - 1), Some(self.wl(i, j)), 1.0 / c.r_wire, &mut a);
            }
        }
        for j in 0..c.n_cols {
            for i in 1..c.n_rows {
                stamp(self.bl(i - 1, j), Some(self.bl(i, j)), 1.0 / c.r_wire, &mut a);
            }
            stamp(self.bl(c.n_rows - 1, j), None, 1.0 / (c.r_wire + c.r_sink), &mut a);
        }
        for i in 0..c.n_rows {
            for j in 0..c.n_cols {
                if c.r_access > 0.0 {
                    stamp(self.wl(i, j), Some(self.mid(i, j)), 1.0 / c.r_access, &mut a);
                }
                let (p, q) = self.cell(i, j);
                stamp(p, Some(q), gc[i * c.n_cols + j], &mut a);
            }
        }
        dense_solve(a, b)
    }

    fn currents(&self, x: &[f64]) -> Vec<f64> {
        let c = self.cfg;
        (0..c.n_cols)
            .map(|j| x[self.bl(c.n_rows - 1, j)] / (c.r_wire + c.r_sink))
            .collect()
    }
}

/// Column currents of the linear network. Needs nonzero wire, source and
/// sink resistance.
pub fn linear_currents(cfg: &CrossbarConfig, g: ArrayView2<f64>, v: &[f64]) -> Vec<f64> {
    assert!(cfg.r_wire > 0.0 && cfg.r_sink > 0.0);
    let net = Net { cfg };
    let gc: Vec<f64> = g.iter().copied().collect();
    net.currents(&net.solve(&gc, v))
}

/// Column currents of the nonlinear network by successive chord
/// conductances: solve with `I(dv)/dv` frozen, update, repeat.
pub fn nonlinear_currents(cfg: &CrossbarConfig, gaps: ArrayView2<f64>, v: &[f64]) -> Vec<f64> {
    assert!(cfg.r_wire > 0.0 && cfg.r_sink > 0.0);
    let net = Net { cfg };
    let dev: &DeviceModel = &cfg.device;
    let gaps: Vec<f64> = gaps.iter().copied().collect();
    let mut gc: Vec<f64> = gaps.iter().map(|&d| dev.small_signal_conductance(d)).collect();
    let mut x = net.solve(&gc, v);
    for _ in 0..500 {
        for i in 0..cfg.n_rows {
            for j in 0..cfg.n_cols {
                let k = i * cfg.n_cols + j;
                let (p, q) = net.cell(i, j);
                let dv = x[p] - x[q];
                gc[k] = if dv.abs() < 1e-15 {
                    dev.small_signal_conductance(gaps[k])
                } else {
                    dev.current(gaps[k], dv) / dv
                };
            }
        }
        let next = net.solve(&gc, v);
        let change = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        if change <= 1e-15 * cfg.v_supply {
            break;
        }
    }
    net.currents(&x)
}

/// Random small crossbar with every parasitic nonzero; access resistance
/// on about half the instances.
pub fn random_config(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CrossbarConfig {
    let mut c = CrossbarConfig::square(1);
    c.n_rows = rows;
    c.n_cols = cols;
    c.r_source = rng.random_range(10.0..1000.0);
    c.r_sink = rng.random_range(10.0..500.0);
    c.r_wire = rng.random_range(0.5..20.0);
    c.r_access = if rng.random_bool(0.5) {
        rng.random_range(100.0..5000.0)
    } else {
        0.0
    };
    c.r_on = rng.random_range(10e3..300e3);
    c.r_off = c.r_on * rng.random_range(2.0..20.0);
    c.v_supply = rng.random_range(0.1..0.5);
    c
}

pub fn random_instance(rng: &mut ChaCha8Rng, cfg: &CrossbarConfig) -> (Array2<f64>, Vec<f64>) {
    let g = Array2::from_shape_simple_fn((cfg.n_rows, cfg.n_cols), || rng.random_range(cfg.g_off()..=cfg.g_on()));
    let v = (0..cfg.n_rows).map(|_| rng.random_range(0.0..=cfg.v_supply)).collect();
    (g, v)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest relative deviation, measured against the oracle's largest entry.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return got.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    }
    got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

/// Requantize an exact accumulator exactly as a fixed-point layer does.
fn requantize(acc: i128, f: &FxpFormatTriple) -> i64 {
    f.out
        .saturate(rescale_round_even(
            acc,
            f.inp.frac_bits + f.w.frac_bits,
            f.out.frac_bits,
        ))
        .0
}

pub struct FxpFormatTriple {
    pub inp: FxpFormat,
    pub w: FxpFormat,
    pub out: FxpFormat,
}

/// `x (batch, in) * w (in, out) + bias`, one rounding per output.
pub fn direct_matvec(x: ArrayView2<i64>, w: ArrayView2<i64>, f: &FxpFormatTriple, bias: Option<&[i64]>) -> Array2<i64> {
    let (nb, nin) = x.dim();
    let nout = w.ncols();
    Array2::from_shape_fn((nb, nout), |(b, o)| {
        let mut acc: i128 = bias.map_or(0, |bs| {
            rescale_round_even(bs[o] as i128, f.out.frac_bits, f.inp.frac_bits + f.w.frac_bits)
        });
        for i in 0..nin {
            acc += x[[b, i]] as i128 * w[[i, o]] as i128;
        }
        requantize(acc, f)
    })
}

/// Direct convolution of `(batch, c, h, w)` codes with `(o, c, k, k)` kernels.
pub fn direct_conv(
    x: ArrayView4<i64>,
    w: ArrayView4<i64>,
    p: &ConvParams,
    f: &FxpFormatTriple,
    bias: Option<&[i64]>,
) -> Array4<i64> {
    let (nb, c, h, wd) = x.dim();
    let k = p.kernel;
    let ho = (h + 2 * p.padding - k) / p.stride + 1;
    let wo = (wd + 2 * p.padding - k) / p.stride + 1;
    Array4::from_shape_fn((nb, p.out_channels, ho, wo), |(b, oc, oy, ox)| {
        let mut acc: i128 = bias.map_or(0, |bs| {
            rescale_round_even(bs[oc] as i128, f.out.frac_bits, f.inp.frac_bits + f.w.frac_bits)
        });
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += x[[b, ic, iy as usize, ix as usize]] as i128 * w[[oc, ic, ky, kx]] as i128;
                    }
                }
            }
        }
        requantize(acc, f)
    })
}
