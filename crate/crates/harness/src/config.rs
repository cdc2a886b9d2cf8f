//! Declarative experiment configuration, read from TOML.
//!
//! Every section is optional and every key has a default, so an empty file
//! is a valid configuration. Relative paths are resolved against the
//! directory holding the config file.
//!
//! ```toml
//! [crossbar]
//! size = 64            # rows = columns
//! r_source = 500.0     # ohms
//! r_sink = 100.0
//! r_wire = 2.5
//! r_access = 0.0
//! r_on = 100e3
//! on_off = 6.0         # r_off = r_on * on_off
//! v_supply = 0.25
//! calibration = { kind = "small_signal" }   # or { kind = "at_voltage", volts = 0.25 }
//!
//! [arch]
//! precision = 16       # 16 -> Q16.13, 8 -> Q8.5, 4 -> Q4.2
//! frac_bits = 13       # optional override of the fractional split
//! stream_width = 4
//! slice_width = 4
//! adc_bits = 14        # 0 bypasses the ADC
//! adc_full_scale = 1.6e-4   # optional, amperes
//! accumulator = "fixed"     # or "exact"
//! accumulator_bits = 32
//! accumulator_frac = 24
//!
//! [dataset]            # gen-dataset
//! train_samples_per_level = 2000
//! val_samples_per_level = 200
//! sparsity_v = [0.0, 0.25, 0.5, 0.75, 0.9]
//! sparsity_g = [0.0, 0.25, 0.5, 0.75, 0.9]
//! solver = "nonlinear"
//!
//! [train]              # train-surrogate; see TrainSpec
//! epochs = 200
//!
//! [surrogate]
//! train_data = "out/train.xbds"
//! val_data = "out/val.xbds"
//! model = "out/surrogate.xbnn"
//!
//! [cnn]                # train-model
//! train_images = 8000
//! epochs = 8
//!
//! [experiment]         # eval and sweep
//! model = "out/model.xbmt"
//! images = 500
//! backend = "analytical_linear"
//! surrogates = ["out/surrogate.xbnn"]
//!
//! [sweep]              # empty axes fall back to the single values above
//! size = [16, 32, 64]
//! on_off = [2.0, 10.0]
//! backend = ["analytical_linear", "surrogate"]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xbar_core::circuit::{CrossbarConfig, DeviceModel, GapCalibration, SolverKind};
use xbar_core::datagen::SamplingSpec;
use xbar_core::fixedpoint::{FxpFormat, SliceScheme};
use xbar_core::funcsim::{Accumulator, BackendKind, MvmArch};
use xbar_core::surrogate::TrainSpec;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub crossbar: CrossbarSection,
    pub arch: ArchSection,
    pub dataset: DatasetSection,
    pub train: TrainSpec,
    pub surrogate: SurrogateSection,
    pub cnn: CnnSection,
    pub experiment: ExperimentSection,
    pub sweep: SweepSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossbarSection {
    pub size: usize,
    pub r_source: f64,
    pub r_sink: f64,
    pub r_wire: f64,
    pub r_access: f64,
    pub r_on: f64,
    pub on_off: f64,
    pub v_supply: f64,
    pub calibration: GapCalibration,
    pub device: DeviceModel,
}

impl Default for CrossbarSection {
    fn default() -> Self {
        let c = CrossbarConfig::default();
        Self {
            size: c.n_rows,
            r_source: c.r_source,
            r_sink: c.r_sink,
            r_wire: c.r_wire,
            r_access: c.r_access,
            r_on: c.r_on,
            on_off: c.r_off / c.r_on,
            v_supply: c.v_supply,
            calibration: c.calibration,
            device: c.device,
        }
    }
}

impl CrossbarSection {
    pub fn to_config(&self) -> Result<CrossbarConfig> {
        let cfg = CrossbarConfig {
            n_rows: self.size,
            n_cols: self.size,
            r_source: self.r_source,
            r_sink: self.r_sink,
            r_wire: self.r_wire,
            r_access: self.r_access,
            r_on: self.r_on,
            r_off: self.r_on * self.on_off,
            v_supply: self.v_supply,
            device: self.device,
            calibration: self.calibration,
        };
        cfg.validate()
            .map_err(|e| HarnessError::Config(format!("[crossbar] {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub precision: u32,
    pub frac_bits: Option<u32>,
    pub stream_width: u32,
    pub slice_width: u32,
    pub adc_bits: u32,
    pub adc_full_scale: Option<f64>,
    pub accumulator: AccumulatorKind,
    pub accumulator_bits: u32,
    pub accumulator_frac: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulatorKind {
    Fixed,
    Exact,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            precision: 16,
            frac_bits: None,
            stream_width: 4,
            slice_width: 4,
            adc_bits: 14,
            adc_full_scale: None,
            accumulator: AccumulatorKind::Fixed,
            accumulator_bits: 32,
            accumulator_frac: 24,
        }
    }
}

/// Default fractional split for a supported precision.
pub fn default_frac_bits(precision: u32) -> Result<u32> {
    match precision {
        16 => Ok(13),
        8 => Ok(5),
        4 => Ok(2),
        other => Err(HarnessError::Config(format!(
            "precision {other} is not one of 16, 8, 4"
        ))),
    }
}

impl ArchSection {
    /// Activation and weight format at `precision` bits.
    pub fn format(&self, precision: u32) -> Result<FxpFormat> {
        let frac = match self.frac_bits {
            Some(f) if precision == self.precision => f,
            _ => default_frac_bits(precision)?,
        };
        FxpFormat::new(precision, frac, true).map_err(|e| HarnessError::Config(format!("[arch] {e}")))
    }

    pub fn accumulator(&self) -> Result<Accumulator> {
        Ok(match self.accumulator {
            AccumulatorKind::Exact => Accumulator::Exact,
            AccumulatorKind::Fixed => Accumulator::Fixed(
                FxpFormat::new(self.accumulator_bits, self.accumulator_frac, true)
                    .map_err(|e| HarnessError::Config(format!("[arch] accumulator: {e}")))?,
            ),
        })
    }

    pub fn to_arch(&self, xbar: usize, precision: u32, stream_width: u32, slice_width: u32) -> Result<MvmArch> {
        let scheme = SliceScheme::new(precision, slice_width, precision, stream_width)
            .map_err(|e| HarnessError::Config(format!("[arch] {e}")))?;
        Ok(MvmArch {
            xbar,
            scheme,
            adc_bits: self.adc_bits,
            adc_full_scale: self.adc_full_scale,
            accumulator: self.accumulator()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub train_samples_per_level: usize,
    pub val_samples_per_level: usize,
    pub sparsity_v: Vec<f64>,
    pub sparsity_g: Vec<f64>,
    pub stream_width: u32,
    pub slice_width: u32,
    pub solver: SolverKind,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = SamplingSpec::new(1, 1, 0);
        Self {
            train_samples_per_level: 2000,
            val_samples_per_level: 200,
            sparsity_v: s.sparsity_v,
            sparsity_g: s.sparsity_g,
            stream_width: s.stream_width,
            slice_width: s.slice_width,
            solver: SolverKind::Nonlinear,
        }
    }
}

impl DatasetSection {
    pub fn sampling(&self, n: usize, per_level: usize, seed: u64) -> SamplingSpec {
        SamplingSpec {
            n,
            sparsity_v: self.sparsity_v.clone(),
            sparsity_g: self.sparsity_g.clone(),
            stream_width: self.stream_width,
            slice_width: self.slice_width,
            samples_per_level: per_level,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSection {
    pub train_images: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Upper clip of the rectifier, kept inside the activation format.
    pub activation_cap: f64,
    /// Softmax temperature applied during training only.
    pub logit_scale: f64,
}

impl Default for CnnSection {
    fn default() -> Self {
        Self {
            train_images: 8000,
            epochs: 8,
            batch_size: 32,
            learning_rate: 2e-3,
            activation_cap: 3.75,
            logit_scale: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub model: Option<PathBuf>,
    pub images: usize,
    pub backend: BackendKind,
    pub surrogates: Vec<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            model: None,
            images: 500,
            backend: BackendKind::AnalyticalLinear,
            surrogates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub size: Vec<usize>,
    pub r_on: Vec<f64>,
    pub on_off: Vec<f64>,
    pub v_supply: Vec<f64>,
    pub precision: Vec<u32>,
    pub stream_width: Vec<u32>,
    pub slice_width: Vec<u32>,
    pub backend: Vec<BackendKind>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Resolved path of a required setting, or a config error naming it.
    pub fn require(&self, p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        p.as_ref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| HarnessError::Config(format!("missing required setting {key}")))
    }
}
