//! Circuit-level crossbar model: the ground truth for everything else.
//!
//! Each cell `(i, j)` has a word-line node and a bit-line node. Word line
//! `i` is driven through `r_source` followed by one `r_wire` segment per
//! cell; bit line `j` runs through one `r_wire` segment per cell down to
//! `r_sink` and ground. The cell itself is either a fixed conductance
//! (linear analysis) or a filamentary RRAM device
//! `I(d, V) = I0 * exp(d / d0) * sinh(V / V0)` (nonlinear analysis), with an
//! optional series access resistance between the word line and the device.

mod network;
mod solve;
mod sweep;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use solve::{
    linear_transfer_matrix, solve_linear, solve_linear_with, solve_nonlinear, solve_nonlinear_with, SolveResult,
    SolverOptions,
};
pub use sweep::{sweep_nf, write_nf_csv, NfStats, NfSweepRow, SolverKind, NF_CSV_HEADER};

/// Column currents below this magnitude make NF and f_R undefined.
pub const CURRENT_EPSILON: f64 = 1e-12;

/// Filamentary RRAM compact-model fit parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    /// Current prefactor, amperes.
    pub i0: f64,
    /// Gap length scale, nanometres.
    pub d0: f64,
    /// Voltage scale, volts.
    pub v0: f64,
}

impl Default for DeviceModel {
    fn default() -> Self {
        Self {
            i0: 1e-4,
            d0: 0.25,
            v0: 0.25,
        }
    }
}

impl DeviceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.i0 > 0.0 && self.d0 > 0.0 && self.v0 > 0.0) {
            return Err(Error::Config(format!("device parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Device current at gap `gap` (nm) and terminal voltage `v`.
    #[inline]
    pub fn current(&self, gap: f64, v: f64) -> f64 {
        self.i0 * (gap / self.d0).exp() * (v / self.v0).sinh()
    }

    /// dI/dV at gap `gap` and voltage `v`.
    #[inline]
    pub fn differential_conductance(&self, gap: f64, v: f64) -> f64 {
        self.i0 / self.v0 * (gap / self.d0).exp() * (v / self.v0).cosh()
    }

    /// Conductance in the `V -> 0` limit.
    #[inline]
    pub fn small_signal_conductance(&self, gap: f64) -> f64 {
        self.i0 / self.v0 * (gap / self.d0).exp()
    }

    /// Gap for which the device carries `g_target * v_cal` at `v_cal`.
    pub fn calibrate_gap(&self, g_target: f64, v_cal: f64) -> f64 {
        self.d0 * (g_target * v_cal / (self.i0 * (v_cal / self.v0).sinh())).ln()
    }

    /// Gap whose small-signal conductance equals `g_target`.
    pub fn small_signal_gap(&self, g_target: f64) -> f64 {
        self.d0 * (g_target * self.v0 / self.i0).ln()
    }
}

/// Inverts the device equation so that `I(d, v_cal) / v_cal == g_target`.
pub fn calibrate_gap(g_target: f64, device: &DeviceModel, v_cal: f64) -> f64 {
    device.calibrate_gap(g_target, v_cal)
}

/// Where a programmed device hits its target conductance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "volts", rename_all = "snake_case")]
pub enum GapCalibration {
    /// Target conductance is the small-signal (`V -> 0`) conductance.
    SmallSignal,
    /// Target conductance is the chord conductance at the given voltage.
    AtVoltage(f64),
}

/// Complete physical description of one crossbar instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossbarConfig {
    pub n_rows: usize,
    pub n_cols: usize,
    pub r_source: f64,
    pub r_sink: f64,
    /// Per-cell wire segment resistance on both word and bit lines.
    pub r_wire: f64,
    /// Series access resistance per cell; 0 disables it.
    pub r_access: f64,
    pub r_on: f64,
    pub r_off: f64,
    pub v_supply: f64,
    pub device: DeviceModel,
    pub calibration: GapCalibration,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        Self {
            n_rows: 64,
            n_cols: 64,
            r_source: 500.0,
            r_sink: 100.0,
            r_wire: 2.5,
            r_access: 0.0,
            r_on: 100e3,
            r_off: 600e3,
            v_supply: 0.25,
            device: DeviceModel::default(),
            calibration: GapCalibration::SmallSignal,
        }
    }
}

impl CrossbarConfig {
    /// Square crossbar with default parasitics.
    pub fn square(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            ..Self::default()
        }
    }

    pub fn with_on_off(mut self, ratio: f64) -> Self {
        self.r_off = self.r_on * ratio;
        self
    }

    pub fn with_r_on(mut self, r_on: f64) -> Self {
        let ratio = self.on_off_ratio();
        self.r_on = r_on;
        self.r_off = r_on * ratio;
        self
    }

    pub fn with_supply(mut self, v: f64) -> Self {
        self.v_supply = v;
        self
    }

    /// Same crossbar with every parasitic resistance removed.
    pub fn without_parasitics(mut self) -> Self {
        self.r_source = 0.0;
        self.r_sink = 0.0;
        self.r_wire = 0.0;
        self.r_access = 0.0;
        self
    }

    pub fn on_off_ratio(&self) -> f64 {
        self.r_off / self.r_on
    }

    pub fn g_on(&self) -> f64 {
        1.0 / self.r_on
    }

    pub fn g_off(&self) -> f64 {
        1.0 / self.r_off
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::Config("crossbar must have at least one row and column".into()));
        }
        let resistances = [self.r_source, self.r_sink, self.r_wire, self.r_access];
        if resistances.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("parasitic resistances must be finite and >= 0".into()));
        }
        if !(self.r_on > 0.0 && self.r_on < self.r_off && self.r_off.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < r_on < r_off, got r_on={} r_off={}",
                self.r_on, self.r_off
            )));
        }
        if !(self.v_supply > 0.0 && self.v_supply.is_finite()) {
            return Err(Error::Config("v_supply must be positive".into()));
        }
        if let GapCalibration::AtVoltage(v) = self.calibration {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config("calibration voltage must be positive".into()));
            }
        }
        self.device.validate()
    }

    /// SHA-256 over a canonical rendering of every field.
    pub fn fingerprint(&self) -> [u8; 32] {
        let bits = |x: f64| format!("{:016x}", x.to_bits());
        let cal = match self.calibration {
            GapCalibration::SmallSignal => "ss".to_string(),
            GapCalibration::AtVoltage(v) => format!("at:{}", bits(v)),
        };
        let canon = format!(
            "xbar-config-v1|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.n_rows,
            self.n_cols,
            bits(self.r_source),
            bits(self.r_sink),
            bits(self.r_wire),
            bits(self.r_access),
            bits(self.r_on),
            bits(self.r_off),
            bits(self.v_supply),
            bits(self.device.i0),
            bits(self.device.d0),
            bits(self.device.v0),
            cal
        );
        Sha256::digest(canon.as_bytes()).into()
    }

    pub(crate) fn calibrated_gap(&self, g_target: f64) -> f64 {
        match self.calibration {
            GapCalibration::SmallSignal => self.device.small_signal_gap(g_target),
            GapCalibration::AtVoltage(v) => self.device.calibrate_gap(g_target, v),
        }
    }
}

/// Programmed conductance targets and the device gaps realizing them.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarState {
    pub conductance_targets: Array2<f64>,
    pub gaps: Array2<f64>,
}

impl CrossbarState {
    /// Program targets (siemens) into devices, calibrating each gap.
    pub fn program(cfg: &CrossbarConfig, targets: ArrayView2<f64>) -> Result<Self> {
        cfg.validate()?;
        if targets.dim() != (cfg.n_rows, cfg.n_cols) {
            return Err(Error::Dimension(format!(
                "conductance matrix is {:?}, crossbar is {}x{}",
                targets.dim(),
                cfg.n_rows,
                cfg.n_cols
            )));
        }
        let (lo, hi) = (cfg.g_off(), cfg.g_on());
        let slack = 1e-12 * hi;
        let mut clean = targets.to_owned();
        for g in clean.iter_mut() {
            if !(*g >= lo - slack && *g <= hi + slack) {
                return Err(Error::Range(format!(
                    "target conductance {g:e} S outside [{lo:e}, {hi:e}]"
                )));
            }
            *g = g.clamp(lo, hi);
        }
        let gaps = clean.mapv(|g| cfg.calibrated_gap(g));
        Ok(Self {
            conductance_targets: clean,
            gaps,
        })
    }

    /// Small-signal conductance of every device.
    pub fn small_signal_conductances(&self, device: &DeviceModel) -> Array2<f64> {
        self.gaps.mapv(|d| device.small_signal_conductance(d))
    }
}

/// Exact dense `I_j = sum_i V_i G_ij`.
pub fn ideal_mvm(v: &[f64], g: ArrayView2<f64>) -> Result<Vec<f64>> {
    let (rows, cols) = g.dim();
    if v.len() != rows {
        return Err(Error::Dimension(format!(
            "voltage vector has {} entries, conductance matrix has {rows} rows",
            v.len()
        )));
    }
    let mut out = vec![0.0; cols];
    for (vi, row) in v.iter().zip(g.rows()) {
        if *vi == 0.0 {
            continue;
        }
        for (o, gij) in out.iter_mut().zip(row.iter()) {
            *o += vi * gij;
        }
    }
    Ok(out)
}

/// Per-column `(I_ideal - I_nonideal) / I_ideal`; `None` where the ideal
/// current is below [`CURRENT_EPSILON`].
pub fn nonideality_factor(i_ideal: &[f64], i_nonideal: &[f64]) -> Vec<Option<f64>> {
    debug_assert_eq!(i_ideal.len(), i_nonideal.len());
    i_ideal
        .iter()
        .zip(i_nonideal)
        .map(|(&id, &nid)| {
            if id.abs() < CURRENT_EPSILON {
                None
            } else {
                Some((id - nid) / id)
            }
        })
        .collect()
}
