//! Training corpora for the distortion-ratio surrogate.
//!
//! Samples are sparse `(V, G)` pairs on the stream/slice value grids,
//! labeled with `f_R = I_ideal / I_nonideal` per column by a circuit solve,
//! then min-max normalized and stored as `f32`.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "XBDS" | version u16 | n u16 | count u32 | solver u8 | fingerprint [32]
//! | scalers 6 x f64 (v_min v_max g_min g_max fr_min fr_max)
//! | count x ( v f32[n] | g f32[n*n] | f_r f32[n] | mask u8[ceil(n/8)] )
//! ```
//!
//! Mask bit `j` (LSB first) set means column `j` is undefined and its `f_r`
//! holds the neutral value.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{ideal_mvm, CrossbarConfig, SolverKind, CURRENT_EPSILON};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"XBDS";
pub const DATASET_VERSION: u16 = 1;

/// Fraction of failed solves above which labeling aborts.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub n: usize,
    pub sparsity_v: Vec<f64>,
    pub sparsity_g: Vec<f64>,
    /// Bits per input stream; V takes values `k / (2^w - 1) * v_supply`.
    pub stream_width: u32,
    /// Bits per weight slice; G takes values on the matching conductance grid.
    pub slice_width: u32,
    pub samples_per_level: usize,
    pub seed: u64,
}

impl SamplingSpec {
    pub fn new(n: usize, samples_per_level: usize, seed: u64) -> Self {
        let grid = vec![0.0, 0.25, 0.5, 0.75, 0.9];
        Self {
            n,
            sparsity_v: grid.clone(),
            sparsity_g: grid,
            stream_width: 4,
            slice_width: 4,
            samples_per_level,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |s: &f64| (0.0..=1.0).contains(s);
        if !self.sparsity_v.iter().chain(&self.sparsity_g).all(frac_ok) {
            return Err(Error::Config("sparsity levels must lie in [0, 1]".into()));
        }
        if self.sparsity_v.is_empty() || self.sparsity_g.is_empty() {
            return Err(Error::Config(
                "at least one sparsity level per field is required".into(),
            ));
        }
        if self.samples_per_level == 0 {
            return Err(Error::Config("samples_per_level must be at least 1".into()));
        }
        if !(1..=16).contains(&self.stream_width) || !(1..=16).contains(&self.slice_width) {
            return Err(Error::Config("grid widths must be in 1..=16 bits".into()));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.sparsity_v.len() * self.sparsity_g.len() * self.samples_per_level
    }
}

/// One `(V, G)` pair in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub v: Vec<f64>,
    pub g: Array2<f64>,
}

/// Conductance for slice value `level` on a `width`-bit linear grid.
pub fn slice_conductance(cfg: &CrossbarConfig, level: u32, width: u32) -> f64 {
    let max = (1u64 << width) - 1;
    if level as u64 >= max {
        return cfg.g_on();
    }
    cfg.g_off() + level as f64 / max as f64 * (cfg.g_on() - cfg.g_off())
}

/// Voltage for stream value `level` on a `width`-bit DAC.
pub fn stream_voltage(cfg: &CrossbarConfig, level: u32, width: u32) -> f64 {
    let max = (1u64 << width) - 1;
    if level as u64 >= max {
        return cfg.v_supply;
    }
    level as f64 / max as f64 * cfg.v_supply
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0xD134_2543_DE82_EF95)
}

/// Sparse grid samples, one block of `samples_per_level` per
/// `(sparsity_v, sparsity_g)` pair. Zeroed entries are 0 V / `G_off`;
/// survivors take a uniformly drawn nonzero grid level.
pub fn generate_samples(spec: &SamplingSpec, cfg: &CrossbarConfig) -> Result<Vec<Sample>> {
    spec.validate()?;
    cfg.validate()?;
    if spec.n != cfg.n_rows || spec.n != cfg.n_cols {
        return Err(Error::Config(format!(
            "sampling size {} does not match crossbar {}x{}",
            spec.n, cfg.n_rows, cfg.n_cols
        )));
    }
    let n = spec.n;
    let vmax = (1u32 << spec.stream_width) - 1;
    let gmax = (1u32 << spec.slice_width) - 1;
    let mut out = Vec::with_capacity(spec.total_samples());
    let mut index = 0;
    for &sv in &spec.sparsity_v {
        for &sg in &spec.sparsity_g {
            for _ in 0..spec.samples_per_level {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index));
                index += 1;
                let v = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < sv {
                            0.0
                        } else {
                            stream_voltage(cfg, rng.random_range(1..=vmax), spec.stream_width)
                        }
                    })
                    .collect();
                let g = Array2::from_shape_simple_fn((n, n), || {
                    if rng.random::<f64>() < sg {
                        cfg.g_off()
                    } else {
                        slice_conductance(cfg, rng.random_range(1..=gmax), spec.slice_width)
                    }
                });
                out.push(Sample { v, g });
            }
        }
    }
    Ok(out)
}

/// Min-max ranges for the three field groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub v: (f64, f64),
    pub g: (f64, f64),
    pub f_r: (f64, f64),
}

#[inline]
fn norm_with(range: (f64, f64), x: f64) -> f64 {
    (x - range.0) / (range.1 - range.0)
}

#[inline]
fn denorm_with(range: (f64, f64), y: f64) -> f64 {
    range.0 + y * (range.1 - range.0)
}

impl Scalers {
    /// V and G span their physical domains; `f_R` spans the given labels.
    pub fn fit(cfg: &CrossbarConfig, f_r: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in f_r {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if !lo.is_finite() {
            (lo, hi) = (1.0, 1.0);
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        Self {
            v: (0.0, cfg.v_supply),
            g: (cfg.g_off(), cfg.g_on()),
            f_r: (lo, hi),
        }
    }

    pub fn norm_v(&self, x: f64) -> f64 {
        norm_with(self.v, x)
    }
    pub fn norm_g(&self, x: f64) -> f64 {
        norm_with(self.g, x)
    }
    pub fn norm_fr(&self, x: f64) -> f64 {
        norm_with(self.f_r, x)
    }
    pub fn denorm_v(&self, y: f64) -> f64 {
        denorm_with(self.v, y)
    }
    pub fn denorm_g(&self, y: f64) -> f64 {
        denorm_with(self.g, y)
    }
    pub fn denorm_fr(&self, y: f64) -> f64 {
        denorm_with(self.f_r, y)
    }

    pub(crate) fn to_array(self) -> [f64; 6] {
        [self.v.0, self.v.1, self.g.0, self.g.1, self.f_r.0, self.f_r.1]
    }

    pub(crate) fn from_array(a: [f64; 6]) -> Self {
        Self {
            v: (a[0], a[1]),
            g: (a[2], a[3]),
            f_r: (a[4], a[5]),
        }
    }
}

/// Normalized record as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub v: Vec<f32>,
    pub g: Vec<f32>,
    pub f_r: Vec<f32>,
    /// `true` marks an undefined column.
    pub mask: Vec<bool>,
}

/// A labeled sample before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub v: Vec<f64>,
    pub g: Vec<f64>,
    pub f_r: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarDataset {
    pub n: usize,
    pub solver: SolverKind,
    pub records: Vec<Record>,
    pub scalers: Scalers,
    pub config_fingerprint: [u8; 32],
    /// Samples dropped because their solve failed.
    pub failures: usize,
}

/// Solve every sample and compute per-column `f_R`, in sample order.
/// Columns where either current is below [`CURRENT_EPSILON`] are masked
/// with `f_R = 1`. Failed solves are dropped and counted; more than 1%
/// failures is an error.
pub fn label_samples(samples: &[Sample], cfg: &CrossbarConfig, solver: SolverKind) -> Result<(Vec<Labeled>, usize)> {
    cfg.validate()?;
    let labeled: Vec<Option<Labeled>> = samples
        .par_iter()
        .map(|s| {
            let ideal = ideal_mvm(&s.v, s.g.view()).ok()?;
            let actual = solver.currents(cfg, &s.g, &s.v).ok()?;
            let mut f_r = Vec::with_capacity(ideal.len());
            let mut mask = Vec::with_capacity(ideal.len());
            for (id, act) in ideal.iter().zip(&actual) {
                if id.abs() < CURRENT_EPSILON || act.abs() < CURRENT_EPSILON {
                    f_r.push(1.0);
                    mask.push(true);
                } else {
                    f_r.push(id / act);
                    mask.push(false);
                }
            }
            Some(Labeled {
                v: s.v.clone(),
                g: s.g.iter().copied().collect(),
                f_r,
                mask,
            })
        })
        .collect();
    let failures = labeled.iter().filter(|l| l.is_none()).count();
    if failures as f64 > MAX_FAILURE_FRACTION * samples.len() as f64 {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: samples.len(),
        });
    }
    Ok((labeled.into_iter().flatten().collect(), failures))
}

/// Label samples and normalize with scalers fitted to them.
pub fn label_with_fr(samples: &[Sample], cfg: &CrossbarConfig, solver: SolverKind) -> Result<CrossbarDataset> {
    let (labeled, failures) = label_samples(samples, cfg, solver)?;
    let scalers = Scalers::fit(
        cfg,
        labeled
            .iter()
            .flat_map(|l| l.f_r.iter().zip(&l.mask).filter(|(_, m)| !**m).map(|(f, _)| *f)),
    );
    let mut ds = CrossbarDataset::from_labeled(&labeled, cfg, solver, scalers);
    ds.failures = failures;
    Ok(ds)
}

/// Label samples and normalize with existing (training-split) scalers.
/// Values may fall slightly outside `[0, 1]`.
pub fn label_with_scalers(
    samples: &[Sample],
    cfg: &CrossbarConfig,
    solver: SolverKind,
    scalers: Scalers,
) -> Result<CrossbarDataset> {
    let (labeled, failures) = label_samples(samples, cfg, solver)?;
    let mut ds = CrossbarDataset::from_labeled(&labeled, cfg, solver, scalers);
    ds.failures = failures;
    Ok(ds)
}

impl CrossbarDataset {
    pub fn from_labeled(labeled: &[Labeled], cfg: &CrossbarConfig, solver: SolverKind, scalers: Scalers) -> Self {
        let records = labeled
            .iter()
            .map(|l| Record {
                v: l.v.iter().map(|&x| scalers.norm_v(x) as f32).collect(),
                g: l.g.iter().map(|&x| scalers.norm_g(x) as f32).collect(),
                f_r: l.f_r.iter().map(|&x| scalers.norm_fr(x) as f32).collect(),
                mask: l.mask.clone(),
            })
            .collect();
        Self {
            n: cfg.n_rows,
            solver,
            records,
            scalers,
            config_fingerprint: cfg.fingerprint(),
            failures: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Physical-unit view of record `idx`.
    pub fn denormalize(&self, idx: usize) -> Labeled {
        let r = &self.records[idx];
        let s = &self.scalers;
        Labeled {
            v: r.v.iter().map(|&y| s.denorm_v(y as f64)).collect(),
            g: r.g.iter().map(|&y| s.denorm_g(y as f64).clamp(s.g.0, s.g.1)).collect(),
            f_r: r.f_r.iter().map(|&y| s.denorm_fr(y as f64)).collect(),
            mask: r.mask.clone(),
        }
    }

    /// Append `other`'s records. Both datasets must come from the same
    /// configuration and solver; differing scalers are widened to cover both.
    pub fn merge(&mut self, other: &CrossbarDataset) -> Result<()> {
        if self.config_fingerprint != other.config_fingerprint {
            return Err(Error::Fingerprint(
                "datasets were generated for different crossbar configurations".into(),
            ));
        }
        if self.solver != other.solver || self.n != other.n {
            return Err(Error::Fingerprint("datasets differ in solver or size".into()));
        }
        if self.scalers == other.scalers {
            self.records.extend(other.records.iter().cloned());
        } else {
            let mut all: Vec<Labeled> = (0..self.len()).map(|i| self.denormalize(i)).collect();
            all.extend((0..other.len()).map(|i| other.denormalize(i)));
            let s = Scalers {
                v: self.scalers.v,
                g: self.scalers.g,
                f_r: (
                    self.scalers.f_r.0.min(other.scalers.f_r.0),
                    self.scalers.f_r.1.max(other.scalers.f_r.1),
                ),
            };
            self.records = all
                .iter()
                .map(|l| Record {
                    v: l.v.iter().map(|&x| s.norm_v(x) as f32).collect(),
                    g: l.g.iter().map(|&x| s.norm_g(x) as f32).collect(),
                    f_r: l.f_r.iter().map(|&x| s.norm_fr(x) as f32).collect(),
                    mask: l.mask.clone(),
                })
                .collect();
            self.scalers = s;
        }
        self.failures += other.failures;
        Ok(())
    }

    fn record_bytes(n: usize) -> usize {
        4 * (n + n * n + n) + n.div_ceil(8)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.n;
        let mut buf = Vec::with_capacity(4 + 2 + 2 + 4 + 1 + 32 + 48 + self.len() * Self::record_bytes(n));
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(u16::try_from(n).map_err(|_| Error::Format("n exceeds u16".into()))?).to_le_bytes());
        buf.extend_from_slice(
            &(u32::try_from(self.len()).map_err(|_| Error::Format("too many records".into()))?).to_le_bytes(),
        );
        buf.push(self.solver.tag());
        buf.extend_from_slice(&self.config_fingerprint);
        for x in self.scalers.to_array() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for r in &self.records {
            if r.v.len() != n || r.g.len() != n * n || r.f_r.len() != n || r.mask.len() != n {
                return Err(Error::Dimension("record does not match dataset size".into()));
            }
            for x in r.v.iter().chain(&r.g).chain(&r.f_r) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            let mut bits = vec![0u8; n.div_ceil(8)];
            for (j, &m) in r.mask.iter().enumerate() {
                if m {
                    bits[j / 8] |= 1 << (j % 8);
                }
            }
            buf.extend_from_slice(&bits);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor::new(&bytes);
        if cur.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let version = cur.u16()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = cur.u16()? as usize;
        let count = cur.u32()? as usize;
        let solver = SolverKind::from_tag(cur.take(1)?[0]).ok_or_else(|| Error::Format("unknown solver tag".into()))?;
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(cur.take(32)?);
        let mut sc = [0.0; 6];
        for x in &mut sc {
            *x = cur.f64()?;
        }
        let expected = count
            .checked_mul(Self::record_bytes(n))
            .ok_or_else(|| Error::Format("record count overflows".into()))?;
        if cur.remaining() != expected {
            return Err(Error::Format(format!(
                "body is {} bytes, expected {expected} for {count} records of size {n}",
                cur.remaining()
            )));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let mut floats = |len: usize| -> Result<Vec<f32>> { (0..len).map(|_| cur.f32()).collect() };
            let v = floats(n)?;
            let g = floats(n * n)?;
            let f_r = floats(n)?;
            let bits = cur.take(n.div_ceil(8))?;
            let mask = (0..n).map(|j| bits[j / 8] >> (j % 8) & 1 == 1).collect();
            records.push(Record { v, g, f_r, mask });
        }
        Ok(Self {
            n,
            solver,
            records,
            scalers: Scalers::from_array(sc),
            config_fingerprint: fingerprint,
            failures: 0,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    /// Normalized values with the mask as 0/1 columns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.n;
        let mut header: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        header.extend((0..n * n).map(|k| format!("g{}_{}", k / n, k % n)));
        header.extend((0..n).map(|j| format!("fr{j}")));
        header.extend((0..n).map(|j| format!("mask{j}")));
        writeln!(w, "{}", header.join(","))?;
        for r in &self.records {
            let mut fields: Vec<String> = r.v.iter().chain(&r.g).chain(&r.f_r).map(|x| x.to_string()).collect();
            fields.extend(r.mask.iter().map(|&m| (m as u8).to_string()));
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Minimal little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
