//! Feed-forward CNN description, its container encoding, and fixed-point
//! inference both in plain integer arithmetic and through crossbars.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use xbar_core::fixedpoint::{rescale_round_even, FxpFormat};
use xbar_core::funcsim::{
    conv2d_mvm, conv_weight_matrix, linear_mvm, ConvParams, Counters, CrossbarBackend, LayerFormats, MvmArch,
    ProgrammedLayer,
};

use crate::container::{self, Block, Blocks, DType};
use crate::error::{HarnessError, Result};

pub const GRAPH_BLOCK: &str = "graph";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        name: String,
        params: ConvParams,
    },
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    /// Rectifier clipped to `[0, cap]`.
    Relu {
        cap: f64,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    /// `(channels, height, width)` of one input.
    pub input: [usize; 3],
    pub classes: usize,
    pub activation_format: FxpFormat,
    pub weight_format: FxpFormat,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub graph: ModelGraph,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Shape of the activations flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl ModelBundle {
    /// Check shapes through the whole graph against the stored tensors.
    pub fn validate(&self) -> Result<()> {
        let g = &self.graph;
        let mut shape = Shape::Map(g.input[0], g.input[1], g.input[2]);
        for layer in &g.layers {
            shape = match (layer, shape) {
                (Layer::Conv { name, params }, Shape::Map(c, h, w)) => {
                    if c != params.in_channels {
                        return Err(HarnessError::Model(format!(
                            "layer {name}: expects {} input channels, receives {c}",
                            params.in_channels
                        )));
                    }
                    let k = params.kernel;
                    self.expect(name, "weight", &[params.out_channels, params.in_channels, k, k])?;
                    self.expect(name, "bias", &[params.out_channels])?;
                    let (ho, wo) = params
                        .output_size(h, w)
                        .map_err(|e| HarnessError::Model(format!("layer {name}: {e}")))?;
                    Shape::Map(params.out_channels, ho, wo)
                }
                (
                    Layer::Linear {
                        name,
                        in_features,
                        out_features,
                    },
                    Shape::Flat(f),
                ) => {
                    if f != *in_features {
                        return Err(HarnessError::Model(format!(
                            "layer {name}: expects {in_features} inputs, receives {f}"
                        )));
                    }
                    self.expect(name, "weight", &[*out_features, *in_features])?;
                    self.expect(name, "bias", &[*out_features])?;
                    Shape::Flat(*out_features)
                }
                (Layer::Flatten, Shape::Map(c, h, w)) => Shape::Flat(c * h * w),
                (Layer::Relu { cap }, s) => {
                    if cap.is_nan() || *cap <= 0.0 {
                        return Err(HarnessError::Model("rectifier cap must be positive".into()));
                    }
                    s
                }
                (l, s) => {
                    return Err(HarnessError::Model(format!(
                        "layer {l:?} cannot follow activations of shape {s:?}"
                    )));
                }
            };
        }
        if shape != Shape::Flat(g.classes) {
            return Err(HarnessError::Model(format!(
                "graph ends in {shape:?}, expected {} class scores",
                g.classes
            )));
        }
        Ok(())
    }

    fn expect(&self, layer: &str, kind: &str, shape: &[usize]) -> Result<()> {
        let key = format!("{layer}.{kind}");
        let t = self
            .tensors
            .get(&key)
            .ok_or_else(|| HarnessError::Model(format!("layer {layer}: missing block {key}")))?;
        if t.shape != shape {
            return Err(HarnessError::Model(format!(
                "layer {layer}: block {key} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(())
    }

    pub fn tensor(&self, key: &str) -> &Tensor {
        &self.tensors[key]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn to_blocks(&self) -> Result<Blocks> {
        let mut blocks = Blocks::new();
        let graph = serde_json::to_vec(&self.graph).map_err(|e| HarnessError::Model(e.to_string()))?;
        blocks.insert(GRAPH_BLOCK.into(), Block::bytes(&graph));
        for (k, t) in &self.tensors {
            blocks.insert(k.clone(), Block::f32(t.shape.clone(), &t.data));
        }
        Ok(blocks)
    }

    pub fn from_blocks(mut blocks: Blocks) -> Result<Self> {
        let g = blocks
            .remove(GRAPH_BLOCK)
            .ok_or_else(|| HarnessError::Model("container has no graph block".into()))?;
        if g.dtype != DType::U8 {
            return Err(HarnessError::Model("graph block must be bytes".into()));
        }
        let graph: ModelGraph =
            serde_json::from_slice(&g.bytes).map_err(|e| HarnessError::Model(format!("graph: {e}")))?;
        let mut tensors = BTreeMap::new();
        for (k, b) in blocks {
            tensors.insert(
                k.clone(),
                Tensor {
                    shape: b.shape.clone(),
                    data: b.to_f32().map_err(|e| HarnessError::Model(format!("block {k}: {e}")))?,
                },
            );
        }
        let bundle = Self { graph, tensors };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::save(&self.to_blocks()?, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_blocks(container::load(path)?)
    }
}

#[derive(Debug, Clone)]
pub enum QuantLayer {
    Conv {
        params: ConvParams,
        /// `(in*k*k, out)` crossbar matrix of weight codes.
        weights: Array2<i64>,
        bias: Vec<i64>,
    },
    Linear {
        /// `(in, out)`.
        weights: Array2<i64>,
        bias: Vec<i64>,
    },
    Relu {
        cap: i64,
    },
    Flatten,
}

/// Activations between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Activations {
    Map(Array4<i64>),
    Flat(Array2<i64>),
}

#[derive(Debug, Clone)]
pub struct QuantModel {
    pub formats: LayerFormats,
    pub layers: Vec<QuantLayer>,
    /// Weights or biases that hit the format range.
    pub saturations: u64,
}

impl QuantModel {
    /// Quantize weights to `weight` (round-half-even, symmetric range) and
    /// biases to the activation format.
    pub fn new(bundle: &ModelBundle, activation: FxpFormat, weight: FxpFormat) -> Result<Self> {
        bundle.validate()?;
        let mut saturations = 0;
        let wmax = weight.max_code();
        let mut qw = |x: f32| {
            let (c, sat) = weight.quantize_flagged(x as f64);
            saturations += (sat || c < -wmax) as u64;
            c.max(-wmax)
        };
        let mut bias_sat = 0;
        let mut qb = |x: f32| {
            let (c, sat) = activation.quantize_flagged(x as f64);
            bias_sat += sat as u64;
            c
        };
        let mut layers = Vec::with_capacity(bundle.graph.layers.len());
        for layer in &bundle.graph.layers {
            layers.push(match layer {
                Layer::Conv { name, params } => {
                    let w = bundle.tensor(&format!("{name}.weight"));
                    let k = params.kernel;
                    let codes: Vec<i64> = w.data.iter().map(|&x| qw(x)).collect();
                    let w4 = ndarray::Array4::from_shape_vec((params.out_channels, params.in_channels, k, k), codes)
                        .map_err(|e| HarnessError::Model(e.to_string()))?;
                    QuantLayer::Conv {
                        params: *params,
                        weights: conv_weight_matrix(w4.view()),
                        bias: bundle
                            .tensor(&format!("{name}.bias"))
                            .data
                            .iter()
                            .map(|&x| qb(x))
                            .collect(),
                    }
                }
                Layer::Linear {
                    name,
                    in_features,
                    out_features,
                } => {
                    let w = bundle.tensor(&format!("{name}.weight"));
                    let codes: Vec<i64> = w.data.iter().map(|&x| qw(x)).collect();
                    let w2 = Array2::from_shape_vec((*out_features, *in_features), codes)
                        .map_err(|e| HarnessError::Model(e.to_string()))?;
                    QuantLayer::Linear {
                        weights: w2.reversed_axes().as_standard_layout().to_owned(),
                        bias: bundle
                            .tensor(&format!("{name}.bias"))
                            .data
                            .iter()
                            .map(|&x| qb(x))
                            .collect(),
                    }
                }
                Layer::Relu { cap } => QuantLayer::Relu {
                    cap: activation.quantize(*cap),
                },
                Layer::Flatten => QuantLayer::Flatten,
            });
        }
        Ok(Self {
            formats: LayerFormats {
                input: activation,
                weight,
                output: activation,
            },
            layers,
            saturations: saturations + bias_sat,
        })
    }

    pub fn quantize_input(&self, images: ArrayView4<f32>) -> Array4<i64> {
        images.mapv(|x| self.formats.input.quantize(x as f64))
    }

    fn requantize(&self, acc: i128) -> i64 {
        let f = &self.formats;
        f.output
            .saturate(rescale_round_even(
                acc,
                f.input.frac_bits + f.weight.frac_bits,
                f.output.frac_bits,
            ))
            .0
    }

    fn bias_acc(&self, b: i64) -> i128 {
        let f = &self.formats;
        rescale_round_even(b as i128, f.output.frac_bits, f.input.frac_bits + f.weight.frac_bits)
    }

    /// Integer-exact inference: direct convolution and matrix products on
    /// codes, one rounding per layer output.
    pub fn reference_forward(&self, x: &Array4<i64>) -> Result<Array2<i64>> {
        let mut act = Activations::Map(x.clone());
        for layer in &self.layers {
            act = match (layer, act) {
                (QuantLayer::Conv { params, weights, bias }, Activations::Map(x)) => {
                    Activations::Map(self.reference_conv(x.view(), params, weights.view(), bias)?)
                }
                (QuantLayer::Linear { weights, bias }, Activations::Flat(x)) => {
                    let (nb, nin) = x.dim();
                    let nout = weights.ncols();
                    let mut y = Array2::zeros((nb, nout));
                    for b in 0..nb {
                        for o in 0..nout {
                            let mut acc: i128 = self.bias_acc(bias[o]);
                            for i in 0..nin {
                                acc += (x[[b, i]] * weights[[i, o]]) as i128;
                            }
                            y[[b, o]] = self.requantize(acc);
                        }
                    }
                    Activations::Flat(y)
                }
                (QuantLayer::Relu { cap }, a) => relu(a, *cap),
                (QuantLayer::Flatten, Activations::Map(x)) => Activations::Flat(flatten(x)),
                _ => {
                    return Err(HarnessError::Model(
                        "layer received activations of the wrong rank".into(),
                    ))
                }
            };
        }
        match act {
            Activations::Flat(y) => Ok(y),
            Activations::Map(_) => Err(HarnessError::Model("graph does not end in class scores".into())),
        }
    }

    fn reference_conv(
        &self,
        x: ArrayView4<i64>,
        p: &ConvParams,
        w: ArrayView2<i64>,
        bias: &[i64],
    ) -> Result<Array4<i64>> {
        let (nb, c, h, wd) = x.dim();
        let (ho, wo) = p.output_size(h, wd)?;
        let k = p.kernel;
        let mut y = Array4::zeros((nb, p.out_channels, ho, wo));
        for b in 0..nb {
            for oc in 0..p.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc: i128 = self.bias_acc(bias[oc]);
                        for ic in 0..c {
                            for ky in 0..k {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let wv = w[[(ic * k + ky) * k + kx, oc]];
                                    acc += (x[[b, ic, iy as usize, ix as usize]] * wv) as i128;
                                }
                            }
                        }
                        y[[b, oc, oy, ox]] = self.requantize(acc);
                    }
                }
            }
        }
        Ok(y)
    }

    /// Program every weight layer onto crossbars of `backend`.
    pub fn program<'a>(
        &self,
        arch: MvmArch,
        backend: &CrossbarBackend<'a>,
    ) -> Result<Vec<Option<ProgrammedLayer<'a>>>> {
        self.layers
            .iter()
            .map(|l| match l {
                QuantLayer::Conv { weights, .. } | QuantLayer::Linear { weights, .. } => {
                    Ok(Some(ProgrammedLayer::program(weights.view(), arch, backend.clone())?))
                }
                _ => Ok(None),
            })
            .collect()
    }

    /// Inference with every conv/linear layer evaluated on crossbars.
    pub fn crossbar_forward(
        &self,
        programmed: &[Option<ProgrammedLayer<'_>>],
        x: &Array4<i64>,
    ) -> Result<(Array2<i64>, Counters)> {
        let mut counters = Counters::default();
        let mut act = Activations::Map(x.clone());
        for (layer, prog) in self.layers.iter().zip(programmed) {
            act = match (layer, prog, act) {
                (QuantLayer::Conv { params, bias, .. }, Some(p), Activations::Map(x)) => {
                    let (y, c) = conv2d_mvm(x.view(), params, p, &self.formats, Some(bias))?;
                    counters.merge(&c);
                    Activations::Map(y)
                }
                (QuantLayer::Linear { bias, .. }, Some(p), Activations::Flat(x)) => {
                    let out = linear_mvm(x.view(), p, &self.formats, Some(bias))?;
                    counters.merge(&out.counters);
                    Activations::Flat(out.codes)
                }
                (QuantLayer::Relu { cap }, _, a) => relu(a, *cap),
                (QuantLayer::Flatten, _, Activations::Map(x)) => Activations::Flat(flatten(x)),
                _ => {
                    return Err(HarnessError::Model(
                        "layer received activations of the wrong rank".into(),
                    ))
                }
            };
        }
        match act {
            Activations::Flat(y) => Ok((y, counters)),
            Activations::Map(_) => Err(HarnessError::Model("graph does not end in class scores".into())),
        }
    }
}

fn relu(a: Activations, cap: i64) -> Activations {
    match a {
        Activations::Map(x) => Activations::Map(x.mapv(|v| v.clamp(0, cap))),
        Activations::Flat(x) => Activations::Flat(x.mapv(|v| v.clamp(0, cap))),
    }
}

/// Channel-major flatten of `(batch, c, h, w)`.
pub fn flatten<T: Clone>(x: Array4<T>) -> Array2<T> {
    let nb = x.len_of(Axis(0));
    let per = x.len() / nb.max(1);
    x.as_standard_layout()
        .to_owned()
        .into_shape_with_order((nb, per))
        .expect("standard layout reshapes")
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v = None;
    for (i, v) in row.into_iter().enumerate() {
        if best_v.is_none_or(|b| v > b) {
            best = i;
            best_v = Some(v);
        }
    }
    best
}
