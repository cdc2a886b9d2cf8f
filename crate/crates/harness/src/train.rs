//! Floating-point training and inference for [`ModelGraph`] networks.
//!
//! Convolutions run as im2col matrix products; gradients flow back through
//! col2im. Loss is softmax cross-entropy, optimizer is Adam.

use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xbar_core::fixedpoint::FxpFormat;
use xbar_core::funcsim::ConvParams;

use crate::digits::{Digits, CLASSES, SIDE};
use crate::error::{HarnessError, Result};
use crate::model::{argmax, Layer, ModelBundle, ModelGraph, Tensor};

/// The stock classifier: three stride-2 3x3 convolutions (16, 32, 64
/// channels) with clipped rectifiers, then one dense layer.
pub fn default_graph(activation: FxpFormat, weight: FxpFormat, cap: f64) -> ModelGraph {
    let conv = |name: &str, i, o| Layer::Conv {
        name: name.into(),
        params: ConvParams {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
    };
    ModelGraph {
        input: [1, SIDE, SIDE],
        classes: CLASSES,
        activation_format: activation,
        weight_format: weight,
        layers: vec![
            conv("conv1", 1, 16),
            Layer::Relu { cap },
            conv("conv2", 16, 32),
            Layer::Relu { cap },
            conv("conv3", 32, 64),
            Layer::Relu { cap },
            Layer::Flatten,
            Layer::Linear {
                name: "fc".into(),
                in_features: 64 * 4 * 4,
                out_features: CLASSES,
            },
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnnTrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Softmax sees `logit_scale * scores`, keeping the stored scores inside
    /// the fixed-point range without changing the arg-max.
    pub logit_scale: f32,
    pub seed: u64,
}

/// Weights of one conv or linear layer as an `(in, out)` matrix.
#[derive(Debug, Clone)]
struct Param {
    w: Array2<f32>,
    b: Array1<f32>,
}

impl Param {
    fn zeros_like(&self) -> Self {
        Param {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.len()),
        }
    }
}

enum Act {
    Map(Array4<f32>),
    Flat(Array2<f32>),
}

enum Cache {
    Conv {
        cols: Array2<f32>,
        dim: (usize, usize, usize, usize),
    },
    Linear {
        x: Array2<f32>,
    },
    Relu {
        mask: Vec<bool>,
    },
    Flatten {
        dim: (usize, usize, usize, usize),
    },
}

#[derive(Debug, Clone)]
pub struct FloatNet {
    pub graph: ModelGraph,
    params: Vec<Option<Param>>,
}

impl FloatNet {
    /// He-normal weights, zero biases.
    pub fn init(graph: ModelGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = graph
            .layers
            .iter()
            .map(|l| {
                let (fan_in, out) = match l {
                    Layer::Conv { params, .. } => (params.patch_len(), params.out_channels),
                    Layer::Linear {
                        in_features,
                        out_features,
                        ..
                    } => (*in_features, *out_features),
                    _ => return None,
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("positive deviation");
                Some(Param {
                    w: Array2::from_shape_simple_fn((fan_in, out), || normal.sample(&mut rng)),
                    b: Array1::zeros(out),
                })
            })
            .collect();
        Self { graph, params }
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        bundle.validate()?;
        let params = bundle
            .graph
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { name, params } => {
                    let w = bundle.tensor(&format!("{name}.weight"));
                    let k = params.kernel;
                    let w4 = ndarray::ArrayView4::from_shape((params.out_channels, params.in_channels, k, k), &w.data)
                        .expect("validated shape");
                    let m = w4
                        .into_shape_with_order((params.out_channels, params.patch_len()))
                        .expect("contiguous")
                        .t()
                        .to_owned();
                    Some(Param {
                        w: m,
                        b: Array1::from(bundle.tensor(&format!("{name}.bias")).data.clone()),
                    })
                }
                Layer::Linear {
                    name,
                    in_features,
                    out_features,
                } => {
                    let w = bundle.tensor(&format!("{name}.weight"));
                    let m = ArrayView2::from_shape((*out_features, *in_features), &w.data).expect("validated shape");
                    Some(Param {
                        w: m.t().to_owned(),
                        b: Array1::from(bundle.tensor(&format!("{name}.bias")).data.clone()),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Self {
            graph: bundle.graph.clone(),
            params,
        })
    }

    pub fn to_bundle(&self) -> ModelBundle {
        let mut tensors = BTreeMap::new();
        for (l, p) in self.graph.layers.iter().zip(&self.params) {
            let (name, shape) = match l {
                Layer::Conv { name, params } => (
                    name,
                    vec![params.out_channels, params.in_channels, params.kernel, params.kernel],
                ),
                Layer::Linear {
                    name,
                    in_features,
                    out_features,
                } => (name, vec![*out_features, *in_features]),
                _ => continue,
            };
            let p = p.as_ref().expect("weight layer has parameters");
            tensors.insert(
                format!("{name}.weight"),
                Tensor {
                    shape,
                    data: p.w.t().iter().copied().collect(),
                },
            );
            tensors.insert(
                format!("{name}.bias"),
                Tensor {
                    shape: vec![p.b.len()],
                    data: p.b.to_vec(),
                },
            );
        }
        ModelBundle {
            graph: self.graph.clone(),
            tensors,
        }
    }

    fn forward(&self, x: Array4<f32>, mut caches: Option<&mut Vec<Cache>>) -> Array2<f32> {
        let mut act = Act::Map(x);
        for (layer, param) in self.graph.layers.iter().zip(&self.params) {
            act = match (layer, act) {
                (Layer::Conv { params, .. }, Act::Map(x)) => {
                    let p = param.as_ref().expect("conv parameters");
                    let dim = x.dim();
                    let (ho, wo) = params.output_size(dim.2, dim.3).expect("validated graph");
                    let cols = im2col(x.view(), params, ho, wo);
                    let mut y = Array2::from_shape_fn((cols.nrows(), params.out_channels), |(_, o)| p.b[o]);
                    general_mat_mul(1.0, &cols, &p.w, 1.0, &mut y);
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Conv { cols, dim });
                    }
                    Act::Map(rows_to_nchw(y, dim.0, ho, wo))
                }
                (Layer::Linear { .. }, Act::Flat(x)) => {
                    let p = param.as_ref().expect("linear parameters");
                    let mut y = Array2::from_shape_fn((x.nrows(), p.b.len()), |(_, o)| p.b[o]);
                    general_mat_mul(1.0, &x, &p.w, 1.0, &mut y);
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Linear { x });
                    }
                    Act::Flat(y)
                }
                (Layer::Relu { cap }, a) => {
                    let cap = *cap as f32;
                    let f = |v: &mut f32| *v = v.clamp(0.0, cap);
                    let mut a = a;
                    let data: &mut [f32] = match &mut a {
                        Act::Map(x) => x.as_slice_mut().expect("standard layout"),
                        Act::Flat(x) => x.as_slice_mut().expect("standard layout"),
                    };
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Relu {
                            mask: data.iter().map(|&v| v > 0.0 && v < cap).collect(),
                        });
                    }
                    data.iter_mut().for_each(f);
                    a
                }
                (Layer::Flatten, Act::Map(x)) => {
                    let dim = x.dim();
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Flatten { dim });
                    }
                    Act::Flat(crate::model::flatten(x))
                }
                _ => unreachable!("graph was validated"),
            };
        }
        match act {
            Act::Flat(y) => y,
            Act::Map(_) => unreachable!("graph was validated"),
        }
    }

    fn backward(&self, caches: Vec<Cache>, dlogits: Array2<f32>) -> Vec<Option<Param>> {
        let mut grads: Vec<Option<Param>> = self.params.iter().map(|p| p.as_ref().map(Param::zeros_like)).collect();
        let mut d = Act::Flat(dlogits);
        for (i, cache) in caches.into_iter().enumerate().rev() {
            let layer = &self.graph.layers[i];
            d = match (layer, cache, d) {
                (Layer::Conv { params, .. }, Cache::Conv { cols, dim }, Act::Map(dy)) => {
                    let p = self.params[i].as_ref().expect("conv parameters");
                    let g = grads[i].as_mut().expect("conv gradient");
                    let dy = nchw_to_rows(dy.view());
                    general_mat_mul(1.0, &cols.t(), &dy, 0.0, &mut g.w);
                    g.b = dy.sum_axis(Axis(0));
                    if i == 0 {
                        break;
                    }
                    let mut dcols = Array2::zeros(cols.raw_dim());
                    general_mat_mul(1.0, &dy, &p.w.t(), 0.0, &mut dcols);
                    Act::Map(col2im(dcols.view(), params, dim))
                }
                (Layer::Linear { .. }, Cache::Linear { x }, Act::Flat(dy)) => {
                    let p = self.params[i].as_ref().expect("linear parameters");
                    let g = grads[i].as_mut().expect("linear gradient");
                    general_mat_mul(1.0, &x.t(), &dy, 0.0, &mut g.w);
                    g.b = dy.sum_axis(Axis(0));
                    let mut dx = Array2::zeros(x.raw_dim());
                    general_mat_mul(1.0, &dy, &p.w.t(), 0.0, &mut dx);
                    Act::Flat(dx)
                }
                (Layer::Relu { .. }, Cache::Relu { mask }, mut d) => {
                    let data: &mut [f32] = match &mut d {
                        Act::Map(x) => x.as_slice_mut().expect("standard layout"),
                        Act::Flat(x) => x.as_slice_mut().expect("standard layout"),
                    };
                    for (v, &m) in data.iter_mut().zip(&mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                    d
                }
                (Layer::Flatten, Cache::Flatten { dim }, Act::Flat(dy)) => {
                    Act::Map(dy.into_shape_with_order(dim).expect("flatten inverse"))
                }
                _ => unreachable!("cache matches graph"),
            };
        }
        grads
    }

    /// Class scores for `(batch, c, h, w)` images.
    pub fn logits(&self, x: ArrayView4<f32>) -> Array2<f32> {
        let n = x.len_of(Axis(0));
        let mut out = Array2::zeros((n, self.graph.classes));
        for start in (0..n).step_by(256) {
            let end = (start + 256).min(n);
            let y = self.forward(x.slice(s![start..end, .., .., ..]).to_owned(), None);
            out.slice_mut(s![start..end, ..]).assign(&y);
        }
        out
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, data: &Digits) -> f64 {
        let logits = self.logits(data.images.view());
        let correct = logits
            .rows()
            .into_iter()
            .zip(&data.labels)
            .filter(|(row, &l)| argmax(row.iter().copied()) == l as usize)
            .count();
        correct as f64 / data.len().max(1) as f64
    }

    /// Mean cross-entropy and its gradient for one batch.
    fn batch_step(&self, x: Array4<f32>, labels: &[u8], scale: f32) -> (f32, Vec<Option<Param>>) {
        let mut caches = Vec::new();
        let mut d = self.forward(x, Some(&mut caches)) * scale;
        let nb = labels.len() as f32;
        let mut loss = 0.0;
        for (mut row, &l) in d.rows_mut().into_iter().zip(labels) {
            let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row /= z;
            loss -= row[l as usize].max(1e-30).ln();
            row[l as usize] -= 1.0;
            row *= scale / nb;
        }
        (loss / nb, self.backward(caches, d))
    }

    /// Adam on shuffled minibatches; returns the mean loss of each epoch.
    pub fn train(&mut self, data: &Digits, spec: &CnnTrainSpec) -> Result<Vec<f32>> {
        if spec.batch_size == 0
            || spec.learning_rate.is_nan()
            || spec.learning_rate <= 0.0
            || spec.logit_scale.is_nan()
            || spec.logit_scale <= 0.0
        {
            return Err(HarnessError::Config(
                "cnn batch size, learning rate and logit scale must be positive".into(),
            ));
        }
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let mut m: Vec<Option<Param>> = self.params.iter().map(|p| p.as_ref().map(Param::zeros_like)).collect();
        let mut v = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xC0FF_EE00_D15C_0DE5);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut t = 0i32;
        let mut history = Vec::with_capacity(spec.epochs);
        for epoch in 0..spec.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0f64;
            for batch in order.chunks(spec.batch_size) {
                let x = data.images.select(Axis(0), batch);
                let labels: Vec<u8> = batch.iter().map(|&i| data.labels[i]).collect();
                let (loss, grads) = self.batch_step(x, &labels, spec.logit_scale);
                if !loss.is_finite() {
                    return Err(HarnessError::Model(format!("cnn training diverged in epoch {epoch}")));
                }
                total += loss as f64 * batch.len() as f64;
                t += 1;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let lr = spec.learning_rate;
                for ((p, g), (mi, vi)) in self.params.iter_mut().zip(&grads).zip(m.iter_mut().zip(v.iter_mut())) {
                    let (Some(p), Some(g), Some(mi), Some(vi)) = (p.as_mut(), g.as_ref(), mi.as_mut(), vi.as_mut())
                    else {
                        continue;
                    };
                    let pairs = [
                        (
                            p.w.as_slice_mut().unwrap(),
                            g.w.as_slice().unwrap(),
                            mi.w.as_slice_mut().unwrap(),
                            vi.w.as_slice_mut().unwrap(),
                        ),
                        (
                            p.b.as_slice_mut().unwrap(),
                            g.b.as_slice().unwrap(),
                            mi.b.as_slice_mut().unwrap(),
                            vi.b.as_slice_mut().unwrap(),
                        ),
                    ];
                    for (pw, gw, mw, vw) in pairs {
                        for j in 0..pw.len() {
                            mw[j] = b1 * mw[j] + (1.0 - b1) * gw[j];
                            vw[j] = b2 * vw[j] + (1.0 - b2) * gw[j] * gw[j];
                            pw[j] -= lr * (mw[j] / c1) / ((vw[j] / c2).sqrt() + eps);
                        }
                    }
                }
            }
            history.push((total / data.len().max(1) as f64) as f32);
        }
        Ok(history)
    }
}

fn im2col(x: ArrayView4<f32>, p: &ConvParams, ho: usize, wo: usize) -> Array2<f32> {
    let (nb, c, h, w) = x.dim();
    let k = p.kernel;
    let mut cols = Array2::zeros((nb * ho * wo, p.patch_len()));
    for b in 0..nb {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut row = cols.row_mut((b * ho + oy) * wo + ox);
                for ic in 0..c {
                    for ky in 0..k {
                        let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                row[(ic * k + ky) * k + kx] = x[[b, ic, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: ArrayView2<f32>, p: &ConvParams, dim: (usize, usize, usize, usize)) -> Array4<f32> {
    let (nb, c, h, w) = dim;
    let (ho, wo) = p.output_size(h, w).expect("validated graph");
    let k = p.kernel;
    let mut dx = Array4::zeros(dim);
    for b in 0..nb {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = dcols.row((b * ho + oy) * wo + ox);
                for ic in 0..c {
                    for ky in 0..k {
                        let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[[b, ic, iy as usize, ix as usize]] += row[(ic * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn rows_to_nchw(y: Array2<f32>, nb: usize, ho: usize, wo: usize) -> Array4<f32> {
    let o = y.ncols();
    y.into_shape_with_order((nb, ho, wo, o))
        .expect("row count matches")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
}

fn nchw_to_rows(d: ArrayView4<f32>) -> Array2<f32> {
    let (nb, c, h, w) = d.dim();
    d.permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((nb * h * w, c))
        .expect("standard layout")
}
