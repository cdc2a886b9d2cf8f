//! Classification accuracy of a quantized CNN on crossbar hardware, for one
//! design point or a cartesian sweep of them.
//!
//! Every result row carries a fingerprint of everything that determines
//! it, so an interrupted sweep resumes by reusing finished rows.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xbar_core::circuit::CrossbarConfig;
use xbar_core::funcsim::{BackendKind, Counters, CrossbarBackend};
use xbar_core::surrogate::SurrogateModel;

use crate::config::Config;
use crate::digits::{self, Digits};
use crate::error::{HarnessError, Result};
use crate::model::{argmax, ModelBundle, QuantModel};
use crate::train::FloatNet;

/// Backend label of the integer-exact reference row.
pub const REFERENCE: &str = "fxp_reference";

/// Images per crossbar inference call.
const CHUNK: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub backend: BackendKind,
    pub size: usize,
    pub r_on: f64,
    pub on_off: f64,
    pub v_supply: f64,
    pub precision: u32,
    pub stream_width: u32,
    pub slice_width: u32,
}

impl SweepPoint {
    /// The single design point described by `[crossbar]`, `[arch]` and
    /// `[experiment]`.
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            backend: cfg.experiment.backend,
            size: cfg.crossbar.size,
            r_on: cfg.crossbar.r_on,
            on_off: cfg.crossbar.on_off,
            v_supply: cfg.crossbar.v_supply,
            precision: cfg.arch.precision,
            stream_width: cfg.arch.stream_width,
            slice_width: cfg.arch.slice_width,
        }
    }

    pub fn crossbar(&self, cfg: &Config) -> Result<CrossbarConfig> {
        let mut c = cfg.crossbar.clone();
        c.size = self.size;
        c.r_on = self.r_on;
        c.on_off = self.on_off;
        c.v_supply = self.v_supply;
        c.to_config()
    }
}

/// Cartesian product of the `[sweep]` axes, backend varying fastest.
pub fn sweep_points(cfg: &Config) -> Vec<SweepPoint> {
    fn axis<T: Clone>(v: &[T], default: T) -> Vec<T> {
        if v.is_empty() {
            vec![default]
        } else {
            v.to_vec()
        }
    }
    let base = SweepPoint::from_config(cfg);
    let sw = &cfg.sweep;
    let mut out = Vec::new();
    for &size in &axis(&sw.size, base.size) {
        for &r_on in &axis(&sw.r_on, base.r_on) {
            for &on_off in &axis(&sw.on_off, base.on_off) {
                for &v_supply in &axis(&sw.v_supply, base.v_supply) {
                    for &precision in &axis(&sw.precision, base.precision) {
                        for &stream_width in &axis(&sw.stream_width, base.stream_width) {
                            for &slice_width in &axis(&sw.slice_width, base.slice_width) {
                                for &backend in &axis(&sw.backend, base.backend) {
                                    out.push(SweepPoint {
                                        backend,
                                        size,
                                        r_on,
                                        on_off,
                                        v_supply,
                                        precision,
                                        stream_width,
                                        slice_width,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// One line of `eval.csv` / `sweep.csv`. Metric fields are empty when the
/// point failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub fingerprint: String,
    pub backend: String,
    pub size: usize,
    pub r_on: f64,
    pub on_off: f64,
    pub v_supply: f64,
    pub precision: u32,
    pub stream_width: u32,
    pub slice_width: u32,
    pub adc_bits: u32,
    pub images: usize,
    pub correct: Option<usize>,
    /// Percent.
    pub accuracy: Option<f64>,
    /// Reference accuracy minus this accuracy, in percentage points.
    pub degradation: Option<f64>,
    pub crossbar_evals: Option<u64>,
    pub adc_clips: Option<u64>,
    pub accumulator_saturations: Option<u64>,
    pub output_saturations: Option<u64>,
    pub surrogate_clamps: Option<u64>,
    pub surrogate_fallbacks: Option<u64>,
    pub status: String,
}

pub const CSV_HEADER: &str = "fingerprint,backend,size,r_on,on_off,v_supply,precision,stream_width,slice_width,adc_bits,images,correct,accuracy,degradation,crossbar_evals,adc_clips,accumulator_saturations,output_saturations,surrogate_clamps,surrogate_fallbacks,status";

impl Row {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn blank(fingerprint: String, backend: &str, p: &SweepPoint, adc_bits: u32, images: usize, status: String) -> Self {
        Row {
            fingerprint,
            backend: backend.into(),
            size: p.size,
            r_on: p.r_on,
            on_off: p.on_off,
            v_supply: p.v_supply,
            precision: p.precision,
            stream_width: p.stream_width,
            slice_width: p.slice_width,
            adc_bits,
            images,
            correct: None,
            accuracy: None,
            degradation: None,
            crossbar_evals: None,
            adc_clips: None,
            accumulator_saturations: None,
            output_saturations: None,
            surrogate_clamps: None,
            surrogate_fallbacks: None,
            status,
        }
    }

    fn fill(&mut self, correct: usize, reference: Option<f64>, c: Option<&Counters>) {
        let acc = percent(correct, self.images);
        self.correct = Some(correct);
        self.accuracy = Some(acc);
        self.degradation = reference.map(|r| round6(r - acc));
        if let Some(c) = c {
            self.crossbar_evals = Some(c.crossbar_evals);
            self.adc_clips = Some(c.adc_clips);
            self.accumulator_saturations = Some(c.accumulator_saturations);
            self.output_saturations = Some(c.output_saturations);
            self.surrogate_clamps = Some(c.surrogate_clamps);
            self.surrogate_fallbacks = Some(c.surrogate_fallbacks);
        }
    }
}

fn percent(correct: usize, total: usize) -> f64 {
    round6(100.0 * correct as f64 / total.max(1) as f64)
}

/// Fixed decimal rounding keeps CSV text short and stable.
fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// A loaded surrogate and where it came from.
#[derive(Debug)]
pub struct LoadedSurrogate {
    pub path: PathBuf,
    pub model: SurrogateModel,
    digest: String,
}

/// Everything shared by the points of one evaluation run.
#[derive(Debug)]
pub struct EvalContext {
    pub cfg: Config,
    pub seed: u64,
    pub bundle: ModelBundle,
    pub test: Digits,
    pub surrogates: Vec<LoadedSurrogate>,
    model_digest: String,
}

impl EvalContext {
    /// Load the model named by `[experiment] model`, the listed surrogates,
    /// and render the held-out images for `seed`.
    pub fn load(cfg: &Config, seed: u64) -> Result<Self> {
        let path = cfg.require(&cfg.experiment.model, "[experiment] model")?;
        let bytes = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
        let bundle = ModelBundle::from_blocks(crate::container::decode(&bytes)?)?;
        let mut surrogates = Vec::new();
        for p in &cfg.experiment.surrogates {
            let p = cfg.resolve(p);
            let bytes = std::fs::read(&p).map_err(|e| HarnessError::io(&p, e))?;
            let model = SurrogateModel::read_from(bytes.as_slice())?;
            surrogates.push(LoadedSurrogate {
                digest: hex(&Sha256::digest(&bytes)),
                path: p,
                model,
            });
        }
        Ok(Self::new(
            cfg.clone(),
            seed,
            bundle,
            &hex(&Sha256::digest(&bytes)),
            surrogates,
        ))
    }

    pub fn new(
        cfg: Config,
        seed: u64,
        bundle: ModelBundle,
        model_digest: &str,
        surrogates: Vec<LoadedSurrogate>,
    ) -> Self {
        let test = digits::generate(cfg.experiment.images, digits::test_seed(seed));
        Self {
            cfg,
            seed,
            bundle,
            test,
            surrogates,
            model_digest: model_digest.into(),
        }
    }

    pub fn surrogate_from(path: PathBuf, model: SurrogateModel) -> Result<LoadedSurrogate> {
        let mut bytes = Vec::new();
        model.write_to(&mut bytes)?;
        Ok(LoadedSurrogate {
            digest: hex(&Sha256::digest(&bytes)),
            path,
            model,
        })
    }

    fn find_surrogate(&self, xbar: &CrossbarConfig) -> Option<&LoadedSurrogate> {
        let fp = xbar.fingerprint();
        self.surrogates.iter().find(|s| s.model.config_fingerprint == fp)
    }

    /// Fail fast, before any expensive work, when a surrogate point has no
    /// matching trained model.
    pub fn check_surrogates(&self, points: &[SweepPoint]) -> Result<()> {
        for p in points.iter().filter(|p| p.backend == BackendKind::Surrogate) {
            let xbar = p.crossbar(&self.cfg)?;
            if self.find_surrogate(&xbar).is_none() {
                return Err(HarnessError::Config(format!(
                    "no surrogate trained for crossbar size {}, r_on {}, on_off {}, v_supply {} \
                     (config fingerprint {}); generate data and train one with `xbar gen-dataset` and \
                     `xbar train-surrogate` using these [crossbar] values, then list it in [experiment] surrogates",
                    p.size,
                    p.r_on,
                    p.on_off,
                    p.v_supply,
                    &hex(&xbar.fingerprint())[..16],
                )));
            }
        }
        Ok(())
    }

    fn fingerprint(&self, label: &str, point: &SweepPoint) -> Result<String> {
        let mut h = Sha256::new();
        h.update(b"row-v1\0");
        h.update(self.model_digest.as_bytes());
        h.update(label.as_bytes());
        h.update(json(point).as_bytes());
        h.update(json(&self.cfg.crossbar).as_bytes());
        h.update(json(&self.cfg.arch).as_bytes());
        h.update(self.cfg.experiment.images.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        if point.backend == BackendKind::Surrogate && label != REFERENCE {
            if let Some(s) = self.find_surrogate(&point.crossbar(&self.cfg)?) {
                h.update(s.digest.as_bytes());
            }
        }
        Ok(hex(&h.finalize())[..16].to_string())
    }

    pub fn quant_model(&self, precision: u32) -> Result<QuantModel> {
        let f = self.cfg.arch.format(precision)?;
        QuantModel::new(&self.bundle, f, f)
    }

    pub fn float_accuracy(&self) -> Result<f64> {
        let net = FloatNet::from_bundle(&self.bundle)?;
        let acc = net.accuracy(&self.test);
        Ok(round6(100.0 * acc))
    }

    fn count_correct(&self, scores: &ndarray::Array2<i64>, offset: usize) -> usize {
        scores
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(i, r)| argmax(r.iter().copied()) == self.test.labels[offset + i] as usize)
            .count()
    }

    fn reference_point(&self) -> SweepPoint {
        SweepPoint {
            backend: BackendKind::Ideal,
            ..SweepPoint::from_config(&self.cfg)
        }
    }

    /// Integer-exact inference at the configured precision; the baseline
    /// degradations are measured against.
    pub fn reference_row(&self) -> Result<Row> {
        let point = self.reference_point();
        let fp = self.fingerprint(REFERENCE, &point)?;
        let q = self.quant_model(point.precision)?;
        let x = q.quantize_input(self.test.images.view());
        let y = q.reference_forward(&x)?;
        let mut row = Row::blank(fp, REFERENCE, &point, 0, self.test.len(), "ok".into());
        row.fill(self.count_correct(&y, 0), None, None);
        Ok(row)
    }

    /// Accuracy of one design point. Evaluation failures become a row with
    /// an error status rather than an `Err`.
    pub fn evaluate(&self, point: &SweepPoint, reference: f64) -> Result<Row> {
        let fp = self.fingerprint(point.backend.name(), point)?;
        let mut row = Row::blank(
            fp,
            point.backend.name(),
            point,
            self.cfg.arch.adc_bits,
            self.test.len(),
            "ok".into(),
        );
        match self.run_point(point) {
            Ok((correct, counters)) => row.fill(correct, Some(reference), Some(&counters)),
            Err(e @ HarnessError::Config(_)) => return Err(e),
            Err(e) => row.status = format!("failed: {e}"),
        }
        Ok(row)
    }

    fn run_point(&self, point: &SweepPoint) -> Result<(usize, Counters)> {
        let xbar = point.crossbar(&self.cfg)?;
        let arch = self
            .cfg
            .arch
            .to_arch(point.size, point.precision, point.stream_width, point.slice_width)?;
        let backend = match point.backend {
            BackendKind::Surrogate => {
                self.check_surrogates(std::slice::from_ref(point))?;
                CrossbarBackend::surrogate(xbar.clone(), &self.find_surrogate(&xbar).expect("checked").model)?
            }
            kind => CrossbarBackend::new(kind, xbar)?,
        };
        let q = self.quant_model(point.precision)?;
        let programmed = q.program(arch, &backend)?;
        let mut counters = Counters::default();
        let mut correct = 0;
        for start in (0..self.test.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(self.test.len());
            let x = q.quantize_input(self.test.images.slice(s![start..end, .., .., ..]));
            let (y, c) = q.crossbar_forward(&programmed, &x)?;
            counters.merge(&c);
            correct += self.count_correct(&y, start);
        }
        debug_assert_eq!(self.test.images.len_of(Axis(0)), self.test.len());
        Ok((correct, counters))
    }
}

/// Canonical JSON for hashing.
fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

pub fn write_rows(rows: &[Row], path: &Path) -> Result<()> {
    let tmp = path.with_extension("csv.partial");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| HarnessError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<Row>, _>>()?;
    Ok(rows)
}

/// Run every point, reusing rows of a previous run at `csv_path` whose
/// fingerprints still match. The file is rewritten after each point.
pub fn run_sweep(
    ctx: &EvalContext,
    points: &[SweepPoint],
    csv_path: &Path,
    mut progress: impl FnMut(&Row, bool),
) -> Result<Vec<Row>> {
    ctx.check_surrogates(points)?;
    let previous: HashMap<String, Row> = if csv_path.exists() {
        read_rows(csv_path)
            .unwrap_or_default()
            .into_iter()
            .filter(Row::is_ok)
            .map(|r| (r.fingerprint.clone(), r))
            .collect()
    } else {
        HashMap::new()
    };
    let mut rows = Vec::with_capacity(points.len() + 1);
    let reference = match previous
        .get(&ctx.fingerprint(REFERENCE, &ctx.reference_point())?)
        .cloned()
    {
        Some(r) => {
            progress(&r, true);
            r
        }
        None => {
            let r = ctx.reference_row()?;
            progress(&r, false);
            r
        }
    };
    let ref_acc = reference.accuracy.expect("reference row has an accuracy");
    rows.push(reference);
    for p in points {
        let fp = ctx.fingerprint(p.backend.name(), p)?;
        let (row, reused) = match previous.get(&fp) {
            Some(r) => (r.clone(), true),
            None => (ctx.evaluate(p, ref_acc)?, false),
        };
        progress(&row, reused);
        rows.push(row);
        write_rows(&rows, csv_path)?;
    }
    write_rows(&rows, csv_path)?;
    Ok(rows)
}

/// Plain-text digest of a finished run.
pub fn summary(rows: &[Row], float_accuracy: Option<f64>) -> String {
    let mut s = String::new();
    if let Some(f) = float_accuracy {
        let _ = writeln!(s, "float accuracy: {f:.2}%");
    }
    for r in rows {
        match (r.accuracy, r.degradation) {
            (Some(a), Some(d)) => {
                let _ = writeln!(
                    s,
                    "{:<18} size {:>3} r_on {:>8} on/off {:>5} v {:>5} {:>2}-bit s{}/w{}: accuracy {a:6.2}%  degradation {d:+6.2}",
                    r.backend, r.size, r.r_on, r.on_off, r.v_supply, r.precision, r.slice_width, r.stream_width
                );
            }
            (Some(a), None) => {
                let _ = writeln!(
                    s,
                    "{:<18} {:>2}-bit integer reference: accuracy {a:6.2}%",
                    r.backend, r.precision
                );
            }
            _ => {
                let _ = writeln!(s, "{:<18} size {:>3}: {}", r.backend, r.size, r.status);
            }
        }
    }
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    let _ = writeln!(s, "points: {}, failed: {failed}", rows.len());
    s
}
