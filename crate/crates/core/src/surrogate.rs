//! Two-layer perceptron that predicts the per-column distortion ratio
//! `f_R = I_ideal / I_nonideal` from the concatenated normalized `(V, G)`.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "XBNN" | version u16 | n u16 | p u32 | fingerprint [32] | scalers 6 x f64
//! | w1 f64[(n*n+n) * p] | b1 f64[p] | w2 f64[p * n] | b2 f64[n]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{ideal_mvm, nonideality_factor, solve_linear, CrossbarConfig, SolverKind};
use crate::datagen::{CrossbarDataset, Cursor, Scalers};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"XBNN";
pub const MODEL_VERSION: u16 = 1;

/// Denormalized `|f_R|` below which a prediction falls back to the ideal current.
pub const DEFAULT_FR_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub n: usize,
    pub p: usize,
    /// `(n*n + n) x p`, input-major.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `p x n`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub scalers: Scalers,
    pub config_fingerprint: [u8; 32],
}

/// Parameter gradients, shaped like the model's weights.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl SurrogateModel {
    pub fn zeros(n: usize, p: usize, scalers: Scalers, config_fingerprint: [u8; 32]) -> Self {
        Self {
            n,
            p,
            w1: Array2::zeros((n * n + n, p)),
            b1: Array1::zeros(p),
            w2: Array2::zeros((p, n)),
            b2: Array1::zeros(n),
            scalers,
            config_fingerprint,
        }
    }

    /// He-normal weights, zero biases.
    pub fn he_init(n: usize, p: usize, scalers: Scalers, config_fingerprint: [u8; 32], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(n, p, scalers, config_fingerprint);
        let s1 = (2.0 / m.input_dim() as f64).sqrt();
        m.w1.mapv_inplace(|_| {
            s1 * {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            }
        });
        let s2 = (2.0 / p as f64).sqrt();
        m.w2.mapv_inplace(|_| {
            s2 * {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            }
        });
        m
    }

    pub fn input_dim(&self) -> usize {
        self.n * self.n + self.n
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn check_shapes(&self) -> Result<()> {
        let ok = self.w1.dim() == (self.input_dim(), self.p)
            && self.b1.len() == self.p
            && self.w2.dim() == (self.p, self.n)
            && self.b2.len() == self.n;
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("surrogate weight shapes are inconsistent".into()))
        }
    }

    /// Normalized `f_R` for one normalized input pair.
    pub fn forward(&self, v_norm: &[f64], g_norm: &[f64]) -> Result<Vec<f64>> {
        if v_norm.len() != self.n || g_norm.len() != self.n * self.n {
            return Err(Error::Dimension(format!(
                "surrogate expects {} voltages and {} conductances, got {} and {}",
                self.n,
                self.n * self.n,
                v_norm.len(),
                g_norm.len()
            )));
        }
        let x = Array2::from_shape_fn((1, self.input_dim()), |(_, k)| {
            if k < self.n {
                v_norm[k]
            } else {
                g_norm[k - self.n]
            }
        });
        Ok(self.forward_batch(x.view())?.into_raw_vec_and_offset().0)
    }

    /// Row-wise forward pass over a `(batch, n*n + n)` input matrix.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} columns, expected {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let h = self.hidden(x);
        Ok(self.output(h.view()))
    }

    fn hidden(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = Array2::zeros((x.nrows(), self.p));
        h += &self.b1;
        general_mat_mul(1.0, &x, &self.w1, 1.0, &mut h);
        h
    }

    fn output(&self, pre: ArrayView2<f64>) -> Array2<f64> {
        let act = pre.mapv(|z| z.max(0.0));
        let mut y = Array2::zeros((act.nrows(), self.n));
        y += &self.b2;
        general_mat_mul(1.0, &act, &self.w2, 1.0, &mut y);
        y
    }

    /// Mean squared error over entries with nonzero `weight`.
    pub fn loss(&self, x: ArrayView2<f64>, target: ArrayView2<f64>, weight: ArrayView2<f64>) -> Result<f64> {
        let y = self.forward_batch(x)?;
        Ok(masked_mse(y.view(), target, weight).0)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn gradients(
        &self,
        x: ArrayView2<f64>,
        target: ArrayView2<f64>,
        weight: ArrayView2<f64>,
    ) -> Result<(f64, Gradients)> {
        let mut grads = Gradients {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.p),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.n),
        };
        let loss = self.backward_into(x, target, weight, &mut grads)?;
        Ok((loss, grads))
    }

    fn backward_into(
        &self,
        x: ArrayView2<f64>,
        target: ArrayView2<f64>,
        weight: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Result<f64> {
        if x.ncols() != self.input_dim() || target.dim() != (x.nrows(), self.n) || weight.dim() != target.dim() {
            return Err(Error::Dimension("batch shapes do not match the surrogate".into()));
        }
        let pre = self.hidden(x);
        let act = pre.mapv(|z| z.max(0.0));
        let mut y = Array2::zeros((x.nrows(), self.n));
        y += &self.b2;
        general_mat_mul(1.0, &act, &self.w2, 1.0, &mut y);

        let (loss, count) = masked_mse(y.view(), target, weight);
        let scale = if count > 0.0 { 2.0 / count } else { 0.0 };
        let mut dy = y;
        Zip::from(&mut dy)
            .and(target)
            .and(weight)
            .for_each(|d, &t, &w| *d = scale * w * (*d - t));

        general_mat_mul(1.0, &act.t(), &dy, 0.0, &mut grads.w2);
        grads.b2.assign(&dy.sum_axis(Axis(0)));
        let mut dh = Array2::zeros(pre.dim());
        general_mat_mul(1.0, &dy, &self.w2.t(), 0.0, &mut dh);
        Zip::from(&mut dh).and(&pre).for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
        general_mat_mul(1.0, &x.t(), &dh, 0.0, &mut grads.w1);
        grads.b1.assign(&dh.sum_axis(Axis(0)));
        Ok(loss)
    }

    /// Flat parameter access in the order `w1, b1, w2, b2` (row-major).
    pub fn param(&self, idx: usize) -> f64 {
        *self.param_ref(idx)
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        *self.param_mut(idx) = value;
    }

    fn param_ref(&self, mut idx: usize) -> &f64 {
        for block in [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ] {
            let block = block.expect("weights are contiguous");
            if idx < block.len() {
                return &block[idx];
            }
            idx -= block.len();
        }
        panic!("parameter index out of range");
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for block in [
            self.w1.as_slice_mut(),
            self.b1.as_slice_mut(),
            self.w2.as_slice_mut(),
            self.b2.as_slice_mut(),
        ] {
            let block = block.expect("weights are contiguous");
            if idx < block.len() {
                return &mut block[idx];
            }
            idx -= block.len();
        }
        panic!("parameter index out of range");
    }

    pub fn check_config(&self, cfg: &CrossbarConfig) -> Result<()> {
        if cfg.fingerprint() != self.config_fingerprint {
            return Err(Error::Fingerprint(
                "surrogate was trained for a different crossbar configuration".into(),
            ));
        }
        if cfg.n_rows != self.n || cfg.n_cols != self.n {
            return Err(Error::Dimension("surrogate size does not match crossbar".into()));
        }
        Ok(())
    }

    /// Fix a conductance matrix so repeated voltage vectors only pay for
    /// the voltage part of the first layer.
    pub fn bind(&self, cfg: &CrossbarConfig, g: ArrayView2<f64>) -> Result<BoundSurrogate<'_>> {
        self.check_config(cfg)?;
        if g.dim() != (self.n, self.n) {
            return Err(Error::Dimension("conductance matrix does not match surrogate".into()));
        }
        let mut clamped = 0;
        let g_norm: Vec<f64> = g
            .iter()
            .map(|&x| clamp_unit(self.scalers.norm_g(x), &mut clamped))
            .collect();
        let g_norm = Array1::from(g_norm);
        let hidden_g = g_norm.dot(&self.w1.slice(s![self.n.., ..])) + &self.b1;
        Ok(BoundSurrogate {
            model: self,
            g: g.to_owned(),
            hidden_g,
            clamped_g: clamped,
            fr_epsilon: DEFAULT_FR_EPSILON,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.check_shapes()?;
        let mut buf = Vec::with_capacity(4 + 2 + 2 + 4 + 32 + 48 + 8 * self.num_params());
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(
            &u16::try_from(self.n)
                .map_err(|_| Error::Format("n exceeds u16".into()))?
                .to_le_bytes(),
        );
        buf.extend_from_slice(
            &u32::try_from(self.p)
                .map_err(|_| Error::Format("p exceeds u32".into()))?
                .to_le_bytes(),
        );
        buf.extend_from_slice(&self.config_fingerprint);
        for x in self.scalers.to_array() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for x in self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor::new(&bytes);
        if cur.take(4)? != MODEL_MAGIC {
            return Err(Error::Format("bad model magic".into()));
        }
        let version = cur.u16()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let n = cur.u16()? as usize;
        let p = cur.u32()? as usize;
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(cur.take(32)?);
        let mut sc = [0.0; 6];
        for x in &mut sc {
            *x = cur.f64()?;
        }
        let mut m = Self::zeros(n, p, Scalers::from_array(sc), fingerprint);
        if cur.remaining() != 8 * m.num_params() {
            return Err(Error::Format(format!(
                "weight block is {} bytes, expected {}",
                cur.remaining(),
                8 * m.num_params()
            )));
        }
        for x in m.w1.iter_mut().chain(&mut m.b1).chain(&mut m.w2).chain(&mut m.b2) {
            *x = cur.f64()?;
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn masked_mse(y: ArrayView2<f64>, target: ArrayView2<f64>, weight: ArrayView2<f64>) -> (f64, f64) {
    let mut sum = 0.0;
    let mut count = 0.0;
    Zip::from(y).and(target).and(weight).for_each(|&y, &t, &w| {
        sum += w * (y - t) * (y - t);
        count += w;
    });
    if count > 0.0 {
        (sum / count, count)
    } else {
        (0.0, 0.0)
    }
}

fn clamp_unit(x: f64, clamped: &mut usize) -> f64 {
    if x < 0.0 {
        *clamped += 1;
        0.0
    } else if x > 1.0 {
        *clamped += 1;
        1.0
    } else {
        x
    }
}

/// A surrogate with its conductance half of the first layer precomputed.
#[derive(Debug, Clone)]
pub struct BoundSurrogate<'a> {
    model: &'a SurrogateModel,
    g: Array2<f64>,
    hidden_g: Array1<f64>,
    clamped_g: usize,
    fr_epsilon: f64,
}

/// Currents predicted for a batch, plus guard counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `(batch, n)` column currents.
    pub currents: Array2<f64>,
    /// Inputs clamped into the training range.
    pub clamped: usize,
    /// Columns that fell back to the ideal current.
    pub fallbacks: usize,
}

impl BoundSurrogate<'_> {
    pub fn with_fr_epsilon(mut self, eps: f64) -> Self {
        self.fr_epsilon = eps;
        self
    }

    /// Predicted non-ideal currents for each row of `v` (volts).
    pub fn predict(&self, v: ArrayView2<f64>) -> Result<Prediction> {
        let m = self.model;
        if v.ncols() != m.n {
            return Err(Error::Dimension(format!(
                "voltage batch has {} columns, expected {}",
                v.ncols(),
                m.n
            )));
        }
        let mut clamped = self.clamped_g;
        let v_norm = v.mapv(|x| clamp_unit(m.scalers.norm_v(x), &mut clamped));
        let mut h = Array2::zeros((v.nrows(), m.p));
        h += &self.hidden_g;
        general_mat_mul(1.0, &v_norm, &m.w1.slice(s![..m.n, ..]), 1.0, &mut h);
        let fr_norm = m.output(h.view());

        let mut ideal = Array2::zeros((v.nrows(), m.n));
        general_mat_mul(1.0, &v, &self.g, 0.0, &mut ideal);
        let mut fallbacks = 0;
        Zip::from(&mut ideal).and(&fr_norm).for_each(|i, &y| {
            let fr = m.scalers.denorm_fr(y);
            if fr.abs() < self.fr_epsilon || !fr.is_finite() {
                fallbacks += 1;
            } else {
                *i /= fr;
            }
        });
        Ok(Prediction {
            currents: ideal,
            clamped,
            fallbacks,
        })
    }
}

/// Predicted non-ideal currents for one `(v, g)` pair in physical units.
pub fn predict_current(
    model: &SurrogateModel,
    cfg: &CrossbarConfig,
    v: &[f64],
    g: ArrayView2<f64>,
) -> Result<Prediction> {
    let bound = model.bind(cfg, g)?;
    let v = ArrayView2::from_shape((1, v.len()), v).map_err(|e| Error::Dimension(e.to_string()))?;
    bound.predict(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplier applied to the learning rate after each epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            hidden: 500,
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_decay: 1.0,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hidden > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.lr_decay > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "training hyperparameters must be positive with betas in [0, 1)".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
}

impl TrainHistory {
    pub fn final_validation(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.validation)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss")?;
        for e in &self.epochs {
            match e.validation {
                Some(v) => writeln!(w, "{},{:.9e},{:.9e}", e.epoch, e.train, v)?,
                None => writeln!(w, "{},{:.9e},", e.epoch, e.train)?,
            }
        }
        Ok(())
    }
}

/// Fill `(x, target, weight)` rows from dataset records.
fn fill_batch(ds: &CrossbarDataset, idx: &[usize], x: &mut Array2<f64>, t: &mut Array2<f64>, w: &mut Array2<f64>) {
    let n = ds.n;
    for (row, &i) in idx.iter().enumerate() {
        let r = &ds.records[i];
        let mut xr = x.row_mut(row);
        for (k, &val) in r.v.iter().chain(&r.g).enumerate() {
            xr[k] = val as f64;
        }
        for j in 0..n {
            t[[row, j]] = r.f_r[j] as f64;
            w[[row, j]] = if r.mask[j] { 0.0 } else { 1.0 };
        }
    }
}

/// Masked MSE of `model` over a whole dataset.
pub fn evaluate_loss(model: &SurrogateModel, ds: &CrossbarDataset, batch_size: usize) -> Result<f64> {
    let n = ds.n;
    let mut sum = 0.0;
    let mut count = 0.0;
    let order: Vec<usize> = (0..ds.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let mut x = Array2::zeros((chunk.len(), model.input_dim()));
        let mut t = Array2::zeros((chunk.len(), n));
        let mut w = Array2::zeros((chunk.len(), n));
        fill_batch(ds, chunk, &mut x, &mut t, &mut w);
        let y = model.forward_batch(x.view())?;
        let (l, c) = masked_mse(y.view(), t.view(), w.view());
        sum += l * c;
        count += c;
    }
    Ok(if count > 0.0 { sum / count } else { 0.0 })
}

struct Adam {
    m: Gradients,
    v: Gradients,
    step: i32,
}

impl Adam {
    fn new(model: &SurrogateModel) -> Self {
        let zero = || Gradients {
            w1: Array2::zeros(model.w1.dim()),
            b1: Array1::zeros(model.p),
            w2: Array2::zeros(model.w2.dim()),
            b2: Array1::zeros(model.n),
        };
        Self {
            m: zero(),
            v: zero(),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut SurrogateModel, g: &Gradients, spec: &TrainSpec, lr: f64) {
        self.step += 1;
        let (b1, b2) = (spec.beta1, spec.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let step_size = lr * c2.sqrt() / c1;
        let eps = spec.epsilon * c2.sqrt();
        macro_rules! apply {
            ($f:ident) => {
                Zip::from(&mut model.$f)
                    .and(&mut self.m.$f)
                    .and(&mut self.v.$f)
                    .and(&g.$f)
                    .for_each(|p, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= step_size * *m / (v.sqrt() + eps);
                    });
            };
        }
        apply!(w1);
        apply!(b1);
        apply!(w2);
        apply!(b2);
    }
}

/// Mini-batch Adam on masked MSE. Batch order is reshuffled every epoch
/// from `spec.seed`; the result is bitwise reproducible.
pub fn train(
    train_ds: &CrossbarDataset,
    val_ds: Option<&CrossbarDataset>,
    spec: &TrainSpec,
) -> Result<(SurrogateModel, TrainHistory)> {
    let init = SurrogateModel::he_init(
        train_ds.n,
        spec.hidden,
        train_ds.scalers,
        train_ds.config_fingerprint,
        spec.seed,
    );
    train_from(init, train_ds, val_ds, spec)
}

/// Continue training an existing model.
pub fn train_from(
    mut model: SurrogateModel,
    train_ds: &CrossbarDataset,
    val_ds: Option<&CrossbarDataset>,
    spec: &TrainSpec,
) -> Result<(SurrogateModel, TrainHistory)> {
    spec.validate()?;
    model.check_shapes()?;
    if train_ds.n != model.n {
        return Err(Error::Dimension("dataset size does not match surrogate".into()));
    }
    if let Some(v) = val_ds {
        if v.config_fingerprint != train_ds.config_fingerprint || v.n != train_ds.n {
            return Err(Error::Fingerprint(
                "validation set comes from a different configuration".into(),
            ));
        }
    }
    let n = model.n;
    let mut history = TrainHistory::default();
    let mut adam = Adam::new(&model);
    let mut grads = Gradients {
        w1: Array2::zeros(model.w1.dim()),
        b1: Array1::zeros(model.p),
        w2: Array2::zeros(model.w2.dim()),
        b2: Array1::zeros(n),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0005_EED0_FBA7_C4E5);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut lr = spec.learning_rate;
    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            let mut x = Array2::zeros((chunk.len(), model.input_dim()));
            let mut t = Array2::zeros((chunk.len(), n));
            let mut w = Array2::zeros((chunk.len(), n));
            fill_batch(train_ds, chunk, &mut x, &mut t, &mut w);
            let loss = model.backward_into(x.view(), t.view(), w.view(), &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            let c = w.sum();
            sum += loss * c;
            count += c;
            adam.update(&mut model, &grads, spec, lr);
        }
        let train_loss = if count > 0.0 { sum / count } else { 0.0 };
        let validation = match val_ds {
            Some(v) => Some(evaluate_loss(&model, v, 512)?),
            None => None,
        };
        if validation.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: validation.unwrap_or(f64::NAN),
            });
        }
        history.epochs.push(EpochLoss {
            epoch,
            train: train_loss,
            validation,
        });
        lr *= spec.lr_decay;
    }
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    /// Unmasked columns compared.
    pub columns: usize,
    pub rmse_surrogate: f64,
    pub rmse_analytical: f64,
    /// `rmse_analytical / rmse_surrogate`.
    pub ratio: f64,
    pub oracle: SolverKind,
    pub clamped: usize,
    pub fallbacks: usize,
}

/// Squared-error sums and counts for one validation record.
type RecordErrors = (f64, f64, usize, usize, usize);

/// NF-RMSE of the surrogate and of the linear analytical model, each
/// against the dataset's oracle labels.
pub fn benchmark_rmse(model: &SurrogateModel, val: &CrossbarDataset, cfg: &CrossbarConfig) -> Result<BenchmarkReport> {
    model.check_config(cfg)?;
    if val.config_fingerprint != model.config_fingerprint {
        return Err(Error::Fingerprint(
            "validation set comes from a different configuration".into(),
        ));
    }
    let n = model.n;
    let per_record: Vec<Result<RecordErrors>> = (0..val.len())
        .into_par_iter()
        .map(|i| {
            let l = val.denormalize(i);
            let g = Array2::from_shape_vec((n, n), l.g).map_err(|e| Error::Dimension(e.to_string()))?;
            let ideal = ideal_mvm(&l.v, g.view())?;
            let oracle: Vec<f64> = ideal.iter().zip(&l.f_r).map(|(i, f)| i / f).collect();
            let pred = predict_current(model, cfg, &l.v, g.view())?;
            let analytical = solve_linear(cfg, g.view(), &l.v)?.i_out;
            let nf_o = nonideality_factor(&ideal, &oracle);
            let nf_s = nonideality_factor(&ideal, pred.currents.as_slice().expect("contiguous"));
            let nf_a = nonideality_factor(&ideal, &analytical);
            let (mut ss, mut sa, mut cols) = (0.0, 0.0, 0);
            for j in 0..n {
                if l.mask[j] {
                    continue;
                }
                if let (Some(o), Some(s), Some(a)) = (nf_o[j], nf_s[j], nf_a[j]) {
                    ss += (s - o) * (s - o);
                    sa += (a - o) * (a - o);
                    cols += 1;
                }
            }
            Ok((ss, sa, cols, pred.clamped, pred.fallbacks))
        })
        .collect();
    let (mut ss, mut sa, mut cols, mut clamped, mut fallbacks) = (0.0, 0.0, 0, 0, 0);
    for r in per_record {
        let (a, b, c, d, e) = r?;
        ss += a;
        sa += b;
        cols += c;
        clamped += d;
        fallbacks += e;
    }
    let denom = cols.max(1) as f64;
    let rmse_surrogate = (ss / denom).sqrt();
    let rmse_analytical = (sa / denom).sqrt();
    Ok(BenchmarkReport {
        columns: cols,
        rmse_surrogate,
        rmse_analytical,
        ratio: rmse_analytical / rmse_surrogate,
        oracle: val.solver,
        clamped,
        fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalers() -> Scalers {
        Scalers {
            v: (0.0, 1.0),
            g: (0.0, 1.0),
            f_r: (0.0, 1.0),
        }
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = SurrogateModel::zeros(3, 5, scalers(), [0; 32]);
        assert_eq!(m.forward(&[0.3; 3], &[0.7; 9]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn pass_through_construction_reproduces_v() {
        let n = 3;
        let mut m = SurrogateModel::zeros(n, 4, scalers(), [0; 32]);
        for j in 0..n {
            m.w1[[j, j]] = 1.0;
            m.w2[[j, j]] = 1.0;
        }
        let v = [0.1, 0.5, 0.9];
        let out = m.forward(&v, &[0.4; 9]).unwrap();
        assert_eq!(out, v.to_vec());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = SurrogateModel::zeros(3, 5, scalers(), [0; 32]);
        assert!(matches!(m.forward(&[0.0; 2], &[0.0; 9]), Err(Error::Dimension(_))));
        assert!(matches!(m.forward(&[0.0; 3], &[0.0; 8]), Err(Error::Dimension(_))));
    }

    #[test]
    fn flat_parameter_indexing_covers_all_blocks() {
        let mut m = SurrogateModel::zeros(2, 3, scalers(), [0; 32]);
        let total = m.num_params();
        assert_eq!(total, 6 * 3 + 3 + 3 * 2 + 2);
        m.set_param(total - 1, 7.0);
        assert_eq!(m.b2[1], 7.0);
        m.set_param(18, 3.0);
        assert_eq!(m.b1[0], 3.0);
    }

    #[test]
    fn save_load_round_trip() {
        let m = SurrogateModel::he_init(3, 6, scalers(), [9; 32], 4);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = SurrogateModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(matches!(
            SurrogateModel::read_from(&buf[..buf.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad = buf.clone();
        bad[1] = b'?';
        assert!(matches!(
            SurrogateModel::read_from(bad.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn zero_voltage_predicts_zero_current() {
        let cfg = CrossbarConfig::square(4);
        let sc = Scalers::fit(&cfg, [1.0, 1.5].into_iter());
        let m = SurrogateModel::he_init(4, 8, sc, cfg.fingerprint(), 1);
        let g = Array2::from_elem((4, 4), cfg.g_on());
        let pred = predict_current(&m, &cfg, &[0.0; 4], g.view()).unwrap();
        assert!(pred.currents.iter().all(|&i| i == 0.0));
    }

    #[test]
    fn wrong_config_is_refused() {
        let cfg = CrossbarConfig::square(4);
        let m = SurrogateModel::zeros(4, 2, scalers(), cfg.fingerprint());
        let other = cfg.clone().with_r_on(50e3);
        let g = Array2::from_elem((4, 4), other.g_on());
        assert!(matches!(
            predict_current(&m, &other, &[0.1; 4], g.view()),
            Err(Error::Fingerprint(_))
        ));
    }
}
