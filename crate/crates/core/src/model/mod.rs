//! Victim network: an ordered layer list with batch-norm running statistics.
//!
//! Activations are numbered from the input: activation 0 is the input batch
//! and activation `i + 1` is the output of layer `i`. A [`Layer::ResidualAdd`]
//! adds the current activation to an earlier one by that numbering.

mod io;
pub mod zoo;

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantizedLayer;
use crate::tensor::{BatchStats, Real, Tape, Tensor, Var};

pub use io::{load_model, save_model, FORMAT_VERSION};
pub(crate) use io::hex_digest;
pub use zoo::Architecture;

/// Added to the variance inside normalization only.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    Float(Vec<f32>),
    Quantized(QuantizedLayer),
}

impl Weights {
    pub fn len(&self) -> usize {
        match self {
            Weights::Float(w) => w.len(),
            Weights::Quantized(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Real-valued weights; dequantized on the fly for quantized layers.
    pub fn values(&self) -> Cow<'_, [f32]> {
        match self {
            Weights::Float(w) => Cow::Borrowed(w),
            Weights::Quantized(q) => Cow::Owned(q.dequantize()),
        }
    }

    pub fn as_quantized(&self) -> Option<&QuantizedLayer> {
        match self {
            Weights::Quantized(q) => Some(q),
            Weights::Float(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Weights,
    pub bias: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Weights,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub stats: BnStats,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    BatchNorm2d(BatchNorm2d),
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    AvgPool2d { kernel: usize, stride: usize },
    ResidualAdd { from: usize },
    Flatten,
}

/// Parameter-free description of a layer, as stored in model manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, bias: bool },
    Linear { in_features: usize, out_features: usize },
    #[serde(rename = "batchnorm2d")]
    BatchNorm2d { channels: usize, momentum: f64 },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { kernel: usize, stride: usize },
    #[serde(rename = "avgpool2d")]
    AvgPool2d { kernel: usize, stride: usize },
    ResidualAdd { from: usize },
    Flatten,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                pad: c.pad,
                bias: c.bias.is_some(),
            },
            Layer::Linear(l) => LayerSpec::Linear { in_features: l.in_features, out_features: l.out_features },
            Layer::BatchNorm2d(b) => LayerSpec::BatchNorm2d { channels: b.channels, momentum: b.stats.momentum as f64 },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool2d { kernel, stride } => LayerSpec::MaxPool2d { kernel: *kernel, stride: *stride },
            Layer::AvgPool2d { kernel, stride } => LayerSpec::AvgPool2d { kernel: *kernel, stride: *stride },
            Layer::ResidualAdd { from } => LayerSpec::ResidualAdd { from: *from },
            Layer::Flatten => LayerSpec::Flatten,
        }
    }

    /// Layer with zeroed weights, unit gamma and identity running stats.
    pub fn from_spec(spec: &LayerSpec) -> Layer {
        match *spec {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad, bias } => Layer::Conv2d(Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                weight: Weights::Float(vec![0.0; out_channels * in_channels * kernel * kernel]),
                bias: bias.then(|| vec![0.0; out_channels]),
            }),
            LayerSpec::Linear { in_features, out_features } => Layer::Linear(Linear {
                in_features,
                out_features,
                weight: Weights::Float(vec![0.0; out_features * in_features]),
                bias: vec![0.0; out_features],
            }),
            LayerSpec::BatchNorm2d { channels, momentum } => Layer::BatchNorm2d(BatchNorm2d {
                channels,
                gamma: vec![1.0; channels],
                beta: vec![0.0; channels],
                stats: BnStats {
                    running_mean: vec![0.0; channels],
                    running_var: vec![1.0; channels],
                    momentum: momentum as f32,
                },
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool2d { kernel, stride } => Layer::MaxPool2d { kernel, stride },
            LayerSpec::AvgPool2d { kernel, stride } => Layer::AvgPool2d { kernel, stride },
            LayerSpec::ResidualAdd { from } => Layer::ResidualAdd { from },
            LayerSpec::Flatten => Layer::Flatten,
        }
    }

    pub fn weights(&self) -> Option<&Weights> {
        match self {
            Layer::Conv2d(c) => Some(&c.weight),
            Layer::Linear(l) => Some(&l.weight),
            _ => None,
        }
    }

    pub(crate) fn weights_mut(&mut self) -> Option<&mut Weights> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.weight),
            Layer::Linear(l) => Some(&mut l.weight),
            _ => None,
        }
    }

    fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => Some(vec![c.out_channels, c.in_channels, c.kernel, c.kernel]),
            Layer::Linear(l) => Some(vec![l.out_features, l.in_features]),
            _ => None,
        }
    }
}

/// Forward behaviour of batch norm layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics; running statistics are left untouched.
    BatchStats,
}

/// Which parameters become tracked leaves on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    None,
    /// Conv and linear weights only.
    Weights,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

pub struct ForwardPass<T> {
    pub logits: Var,
    /// Input activation of every BN layer, in layer order. Only recorded in
    /// batch-statistics modes.
    pub bn_inputs: Vec<Var>,
    pub batch_stats: Vec<BatchStats<T>>,
    pub params: Vec<(ParamId, Var)>,
}

impl<T> ForwardPass<T> {
    pub fn param(&self, id: ParamId) -> Option<Var> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, v)| *v)
    }
}

/// Per-channel mean and standard deviation of one BN layer's input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    layers: Vec<Layer>,
    classes: usize,
    input_shape: [usize; 3],
    /// Free-form provenance (dataset, seeds); persisted with the model.
    pub metadata: BTreeMap<String, String>,
    captured: Option<Vec<ChannelStats>>,
}

impl ModelGraph {
    /// Validates that layer shapes compose and the head emits `classes`
    /// logits.
    pub fn new(name: impl Into<String>, layers: Vec<Layer>, classes: usize, input_shape: [usize; 3]) -> Result<Self> {
        let model = ModelGraph {
            name: name.into(),
            layers,
            classes,
            input_shape,
            metadata: BTreeMap::new(),
            captured: None,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let bad = |i: usize, msg: String| Err(Error::Consistency(format!("layer {i}: {msg}")));
        if self.classes < 2 {
            return Err(Error::Consistency(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Consistency(format!("input shape {:?} has a zero extent", self.input_shape)));
        }
        let mut shapes: Vec<Vec<usize>> = vec![self.input_shape.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let next = match layer {
                Layer::Conv2d(c) => {
                    let &[ch, h, w] = cur.as_slice() else { return bad(i, format!("conv2d needs [C,H,W] input, got {cur:?}")) };
                    if ch != c.in_channels {
                        return bad(i, format!("conv2d expects {} channels, got {ch}", c.in_channels));
                    }
                    if c.weight.len() != c.out_channels * c.in_channels * c.kernel * c.kernel {
                        return bad(i, "conv2d weight length does not match its shape".into());
                    }
                    if c.bias.as_ref().is_some_and(|b| b.len() != c.out_channels) {
                        return bad(i, "conv2d bias length mismatch".into());
                    }
                    if c.stride == 0 || h + 2 * c.pad < c.kernel || w + 2 * c.pad < c.kernel {
                        return bad(i, format!("conv2d kernel {} does not fit {h}x{w}", c.kernel));
                    }
                    vec![c.out_channels, (h + 2 * c.pad - c.kernel) / c.stride + 1, (w + 2 * c.pad - c.kernel) / c.stride + 1]
                }
                Layer::Linear(l) => {
                    if cur != [l.in_features] {
                        return bad(i, format!("linear expects [{}], got {cur:?}", l.in_features));
                    }
                    if l.weight.len() != l.in_features * l.out_features || l.bias.len() != l.out_features {
                        return bad(i, "linear parameter length mismatch".into());
                    }
                    vec![l.out_features]
                }
                Layer::BatchNorm2d(b) => {
                    if cur.len() != 3 || cur[0] != b.channels {
                        return bad(i, format!("batchnorm2d over {} channels got {cur:?}", b.channels));
                    }
                    let s = &b.stats;
                    if b.gamma.len() != b.channels
                        || b.beta.len() != b.channels
                        || s.running_mean.len() != b.channels
                        || s.running_var.len() != b.channels
                    {
                        return bad(i, "batchnorm2d parameter length mismatch".into());
                    }
                    if s.running_var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                        return bad(i, "running variance must be finite and non-negative".into());
                    }
                    cur
                }
                Layer::Relu => cur,
                Layer::MaxPool2d { kernel, stride } | Layer::AvgPool2d { kernel, stride } => {
                    let &[ch, h, w] = cur.as_slice() else { return bad(i, format!("pooling needs [C,H,W], got {cur:?}")) };
                    if *kernel == 0 || *stride == 0 || *kernel > h || *kernel > w {
                        return bad(i, format!("pool kernel {kernel} stride {stride} invalid for {h}x{w}"));
                    }
                    vec![ch, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                Layer::ResidualAdd { from } => {
                    if *from > i {
                        return bad(i, format!("residual source activation {from} is not earlier"));
                    }
                    if shapes[*from] != cur {
                        return bad(i, format!("residual shapes {:?} and {cur:?} differ", shapes[*from]));
                    }
                    cur
                }
                Layer::Flatten => vec![cur.iter().product()],
            };
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.as_slice() != [self.classes] {
            return Err(Error::Consistency(format!(
                "model declares {} classes but its head outputs {out:?}",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = (usize, &BatchNorm2d)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::BatchNorm2d(b) => Some((i, b)),
            _ => None,
        })
    }

    /// Stored running statistics as (mean, std) per BN layer.
    pub fn running_stats(&self) -> Vec<ChannelStats> {
        self.bn_layers()
            .map(|(_, b)| ChannelStats {
                mean: b.stats.running_mean.clone(),
                std: b.stats.running_var.iter().map(|v| v.sqrt()).collect(),
            })
            .collect()
    }

    pub fn quantized_layers(&self) -> impl Iterator<Item = (usize, &QuantizedLayer)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.weights().and_then(Weights::as_quantized).map(|q| (i, q)))
    }

    pub fn quantized_layer_mut(&mut self, layer: usize) -> Option<&mut QuantizedLayer> {
        match self.layers.get_mut(layer)?.weights_mut()? {
            Weights::Quantized(q) => Some(q),
            Weights::Float(_) => None,
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.layers.iter().filter_map(Layer::weights).any(|w| w.as_quantized().is_some())
    }

    /// Mutable float storage of a trainable parameter.
    pub(crate) fn param_mut(&mut self, id: ParamId) -> Result<&mut Vec<f32>> {
        let layer = self
            .layers
            .get_mut(id.layer)
            .ok_or_else(|| Error::Invalid(format!("no layer {}", id.layer)))?;
        let slot = match (layer, id.kind) {
            (Layer::Conv2d(Conv2d { weight: Weights::Float(w), .. }), ParamKind::Weight)
            | (Layer::Linear(Linear { weight: Weights::Float(w), .. }), ParamKind::Weight) => Some(w),
            (Layer::Conv2d(c), ParamKind::Bias) => c.bias.as_mut(),
            (Layer::Linear(l), ParamKind::Bias) => Some(&mut l.bias),
            (Layer::BatchNorm2d(b), ParamKind::Gamma) => Some(&mut b.gamma),
            (Layer::BatchNorm2d(b), ParamKind::Beta) => Some(&mut b.beta),
            _ => None,
        };
        slot.ok_or_else(|| Error::Invalid(format!("{id:?} is not a trainable float parameter")))
    }

    /// Builds the forward graph on `tape`. Parameters become leaves, tracked
    /// according to `track`.
    pub fn forward_on_tape<T: Real>(&self, tape: &mut Tape<T>, x: Var, mode: Mode, track: Track) -> Result<ForwardPass<T>> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::shape(
                "forward",
                format!("expected [N, {}, {}, {}], got {shape:?}", self.input_shape[0], self.input_shape[1], self.input_shape[2]),
            ));
        }
        let mut params = Vec::new();
        let mut bn_inputs = Vec::new();
        let mut batch_stats = Vec::new();
        let mut acts = vec![x];

        let mut leaf = |tape: &mut Tape<T>, id: ParamId, shape: Vec<usize>, data: &[f32], tracked: bool| -> Result<Var> {
            let t = Tensor::new(shape, data.iter().map(|&v| T::of(v as f64)).collect())?.requires_grad(tracked);
            let v = tape.leaf(t)?;
            params.push((id, v));
            Ok(v)
        };
        let weights_tracked = track != Track::None;
        let all_tracked = track == Track::All;

        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *acts.last().unwrap();
            let id = |kind| ParamId { layer: i, kind };
            let out = match layer {
                Layer::Conv2d(c) => {
                    let w = leaf(tape, id(ParamKind::Weight), layer.weight_shape().unwrap(), &c.weight.values(), weights_tracked)?;
                    let b = match &c.bias {
                        Some(b) => Some(leaf(tape, id(ParamKind::Bias), vec![c.out_channels], b, all_tracked)?),
                        None => None,
                    };
                    tape.conv2d(cur, w, b, c.stride, c.pad)
                }
                Layer::Linear(l) => {
                    let w = leaf(tape, id(ParamKind::Weight), layer.weight_shape().unwrap(), &l.weight.values(), weights_tracked)?;
                    let b = leaf(tape, id(ParamKind::Bias), vec![l.out_features], &l.bias, all_tracked)?;
                    tape.linear(cur, w, Some(b))
                }
                Layer::BatchNorm2d(b) => {
                    let gamma = leaf(tape, id(ParamKind::Gamma), vec![b.channels], &b.gamma, all_tracked)?;
                    let beta = leaf(tape, id(ParamKind::Beta), vec![b.channels], &b.beta, all_tracked)?;
                    match mode {
                        Mode::Eval => {
                            let mean: Vec<T> = b.stats.running_mean.iter().map(|&v| T::of(v as f64)).collect();
                            let var: Vec<T> = b.stats.running_var.iter().map(|&v| T::of(v as f64)).collect();
                            tape.batchnorm2d_eval(cur, gamma, beta, &mean, &var, BN_EPS)
                        }
                        Mode::Train | Mode::BatchStats => {
                            bn_inputs.push(cur);
                            tape.batchnorm2d_train(cur, gamma, beta, BN_EPS).map(|(v, stats)| {
                                batch_stats.push(stats);
                                v
                            })
                        }
                    }
                }
                Layer::Relu => tape.relu(cur),
                Layer::MaxPool2d { kernel, stride } => tape.maxpool2d(cur, *kernel, *stride),
                Layer::AvgPool2d { kernel, stride } => tape.avgpool2d(cur, *kernel, *stride),
                Layer::ResidualAdd { from } => tape.add(cur, acts[*from]),
                Layer::Flatten => tape.flatten(cur),
            };
            let out = out.map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteActivation { layer: i },
                other => other,
            })?;
            acts.push(out);
        }
        Ok(ForwardPass { logits: *acts.last().unwrap(), bn_inputs, batch_stats, params })
    }

    /// Untracked forward. Training mode folds the batch statistics into the
    /// running statistics; both batch-statistics modes record them for
    /// [`ModelGraph::last_bn_batch_stats`].
    pub fn forward(&mut self, x: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone())?;
        let pass = self.forward_on_tape(&mut tape, xv, mode, Track::None)?;
        if mode == Mode::Train {
            self.update_running_stats(&pass.batch_stats);
        }
        if mode != Mode::Eval {
            self.captured = Some(
                pass.batch_stats
                    .iter()
                    .map(|s| ChannelStats { mean: s.mean.clone(), std: s.var.iter().map(|v| v.sqrt()).collect() })
                    .collect(),
            );
        }
        Ok(tape.take_value(pass.logits))
    }

    /// Inference-mode logits; a pure function of parameters, running
    /// statistics and input.
    pub fn forward_eval(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone())?;
        let pass = self.forward_on_tape(&mut tape, xv, Mode::Eval, Track::None)?;
        Ok(tape.take_value(pass.logits))
    }

    /// Exponential moving average of batch statistics into running
    /// statistics (population variance).
    pub(crate) fn update_running_stats(&mut self, batch: &[BatchStats<f32>]) {
        let bns = self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm2d(b) => Some(b),
            _ => None,
        });
        for (bn, stats) in bns.zip(batch) {
            let m = bn.stats.momentum;
            for (r, &b) in bn.stats.running_mean.iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, &b) in bn.stats.running_var.iter_mut().zip(&stats.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Per-BN-layer (mean, std) of the inputs seen by `x`, without touching
    /// running statistics.
    pub fn capture_bn_batch_stats(&mut self, x: &Tensor<f32>) -> Result<Vec<ChannelStats>> {
        if self.bn_layers().next().is_none() {
            return Err(Error::BnStatsUnavailable("model has no batch-norm layers".into()));
        }
        self.forward(x, Mode::BatchStats)?;
        self.last_bn_batch_stats().map(<[_]>::to_vec)
    }

    /// Statistics recorded by the most recent batch-statistics forward.
    pub fn last_bn_batch_stats(&self) -> Result<&[ChannelStats]> {
        self.captured
            .as_deref()
            .ok_or_else(|| Error::BnStatsUnavailable("no batch-statistics forward has run yet".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_linear() -> ModelGraph {
        ModelGraph::new(
            "identity",
            vec![
                Layer::Flatten,
                Layer::Linear(Linear {
                    in_features: 2,
                    out_features: 2,
                    weight: Weights::Float(vec![1.0, 0.0, 0.0, 1.0]),
                    bias: vec![0.0, 0.0],
                }),
            ],
            2,
            [2, 1, 1],
        )
        .unwrap()
    }

    fn single_bn(channels: usize, h: usize, w: usize) -> ModelGraph {
        ModelGraph::new(
            "bn",
            vec![
                Layer::from_spec(&LayerSpec::BatchNorm2d { channels, momentum: 0.1 }),
                Layer::AvgPool2d { kernel: h.min(w), stride: 1 },
                Layer::Flatten,
                Layer::Linear(Linear {
                    in_features: channels * (h - h.min(w) + 1) * (w - h.min(w) + 1),
                    out_features: 2,
                    weight: Weights::Float(vec![0.5; 2 * channels * (h - h.min(w) + 1) * (w - h.min(w) + 1)]),
                    bias: vec![0.0; 2],
                }),
            ],
            2,
            [channels, h, w],
        )
        .unwrap()
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let mut m = identity_linear();
        let x = Tensor::new(vec![1, 2, 1, 1], vec![0.3, 0.7]).unwrap();
        assert_eq!(m.forward(&x, Mode::Eval).unwrap().data(), &[0.3, 0.7]);
    }

    #[test]
    fn eval_bn_with_identity_stats_is_identity() {
        let bn = Layer::from_spec(&LayerSpec::BatchNorm2d { channels: 2, momentum: 0.1 });
        let m = ModelGraph::new(
            "bn",
            vec![
                bn,
                Layer::Flatten,
                Layer::Linear(Linear {
                    in_features: 2,
                    out_features: 2,
                    weight: Weights::Float(vec![1.0, 0.0, 0.0, 1.0]),
                    bias: vec![0.0; 2],
                }),
            ],
            2,
            [2, 1, 1],
        )
        .unwrap();
        let x = Tensor::new(vec![2, 2, 1, 1], vec![0.5, -1.5, 3.0, 0.25]).unwrap();
        let y = m.forward_eval(&x).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((*a as f64 - *b as f64 * scale).abs() < 1e-6);
        }
    }

    #[test]
    fn capture_on_hand_example() {
        let mut m = single_bn(1, 2, 2);
        assert!(matches!(m.last_bn_batch_stats(), Err(Error::BnStatsUnavailable(_))));
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let stats = m.capture_bn_batch_stats(&x).unwrap();
        assert_eq!(stats[0].mean, vec![2.0]);
        assert_eq!(stats[0].std, vec![1.0]);
        // capture must not move running statistics
        assert_eq!(m.running_stats()[0].mean, vec![0.0]);
    }

    #[test]
    fn constant_input_has_zero_std() {
        let mut m = single_bn(2, 3, 3);
        let x = Tensor::full(vec![4, 2, 3, 3], 1.75).unwrap();
        let stats = m.capture_bn_batch_stats(&x).unwrap();
        assert_eq!(stats[0].mean, vec![1.75, 1.75]);
        assert_eq!(stats[0].std, vec![0.0, 0.0]);
    }

    #[test]
    fn train_forward_moves_running_stats_with_momentum() {
        let mut m = single_bn(1, 2, 2);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        m.forward(&x, Mode::Train).unwrap();
        let bn = m.bn_layers().next().unwrap().1;
        assert!((bn.stats.running_mean[0] - 0.2).abs() < 1e-7);
        assert!((bn.stats.running_var[0] - (0.9 + 0.1)).abs() < 1e-7);
    }

    #[test]
    fn class_count_mismatch_is_consistency_error() {
        let layers = identity_linear().layers().to_vec();
        let err = ModelGraph::new("bad", layers, 4, [2, 1, 1]).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)), "{err}");
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let mut m = identity_linear();
        let x = Tensor::new(vec![1, 3, 1, 1], vec![0.0; 3]).unwrap();
        assert!(matches!(m.forward(&x, Mode::Eval), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut m = identity_linear();
        if let Layer::Linear(l) = &mut m.layers_mut()[1] {
            l.weight = Weights::Float(vec![3e38, 3e38, 0.0, 1.0]);
        }
        let x = Tensor::new(vec![1, 2, 1, 1], vec![3e38, 3e38]).unwrap();
        assert!(matches!(m.forward(&x, Mode::Eval), Err(Error::NonFiniteActivation { layer: 1 })));
    }
}
