//! Non-ideality factor statistics over grids of crossbar configurations.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ideal_mvm, nonideality_factor, solve_linear, solve_nonlinear, CrossbarConfig, CrossbarState};
use crate::error::Result;

/// Which circuit analysis produces the non-ideal currents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Linear,
    Nonlinear,
}

impl SolverKind {
    pub fn tag(self) -> u8 {
        match self {
            SolverKind::Linear => 0,
            SolverKind::Nonlinear => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(SolverKind::Linear),
            1 => Some(SolverKind::Nonlinear),
            _ => None,
        }
    }

    /// Non-ideal column currents for one `(v, g)` pair.
    pub fn currents(self, cfg: &CrossbarConfig, g: &Array2<f64>, v: &[f64]) -> Result<Vec<f64>> {
        match self {
            SolverKind::Linear => Ok(solve_linear(cfg, g.view(), v)?.i_out),
            SolverKind::Nonlinear => {
                let state = CrossbarState::program(cfg, g.view())?;
                Ok(solve_nonlinear(cfg, &state, v)?.i_out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NfStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
    pub count: usize,
}

impl NfStats {
    /// Quartiles by linear interpolation between order statistics.
    pub fn from_values(values: &mut [f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(|a, b| a.total_cmp(b));
        let q = |p: f64| {
            let pos = p * (values.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
        };
        Some(Self {
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NfSweepRow {
    pub config: CrossbarConfig,
    pub stats: Option<NfStats>,
    pub samples: usize,
    pub failures: usize,
}

/// Uniform random voltages in `[0, v_supply]` and conductances in `[G_off, G_on]`.
pub(crate) fn random_instance(cfg: &CrossbarConfig, rng: &mut impl Rng) -> (Vec<f64>, Array2<f64>) {
    let v = (0..cfg.n_rows).map(|_| rng.random::<f64>() * cfg.v_supply).collect();
    let (lo, hi) = (cfg.g_off(), cfg.g_on());
    let g = Array2::from_shape_simple_fn((cfg.n_rows, cfg.n_cols), || lo + rng.random::<f64>() * (hi - lo));
    (v, g)
}

/// NF distribution per configuration over `samples` random `(V, G)` draws.
/// Sample `s` uses the same RNG stream for every configuration.
pub fn sweep_nf(grid: &[CrossbarConfig], samples: usize, seed: u64, solver: SolverKind) -> Result<Vec<NfSweepRow>> {
    for cfg in grid {
        cfg.validate()?;
    }
    Ok(grid
        .iter()
        .map(|cfg| {
            let per_sample: Vec<Option<Vec<f64>>> = (0..samples)
                .into_par_iter()
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let (v, g) = random_instance(cfg, &mut rng);
                    let ideal = ideal_mvm(&v, g.view()).ok()?;
                    let actual = solver.currents(cfg, &g, &v).ok()?;
                    Some(nonideality_factor(&ideal, &actual).into_iter().flatten().collect())
                })
                .collect();
            let failures = per_sample.iter().filter(|s| s.is_none()).count();
            let mut all: Vec<f64> = per_sample.into_iter().flatten().flatten().collect();
            NfSweepRow {
                config: cfg.clone(),
                stats: NfStats::from_values(&mut all),
                samples,
                failures,
            }
        })
        .collect())
}

pub const NF_CSV_HEADER: &str = "n_rows,n_cols,r_source,r_sink,r_wire,r_access,r_on,r_off,on_off_ratio,v_supply,nf_q1,nf_median,nf_q3,nf_mean,nf_count,samples,failures";

pub fn write_nf_csv<W: Write>(rows: &[NfSweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{NF_CSV_HEADER}")?;
    for r in rows {
        let c = &r.config;
        write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},",
            c.n_rows,
            c.n_cols,
            c.r_source,
            c.r_sink,
            c.r_wire,
            c.r_access,
            c.r_on,
            c.r_off,
            c.on_off_ratio(),
            c.v_supply
        )?;
        match &r.stats {
            Some(s) => write!(out, "{},{},{},{},{},", s.q1, s.median, s.q3, s.mean, s.count)?,
            None => write!(out, ",,,,0,")?,
        }
        writeln!(out, "{},{}", r.samples, r.failures)?;
    }
    Ok(())
}
