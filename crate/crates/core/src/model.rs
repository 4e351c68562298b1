//! Main-task classifier: a sequence of layer descriptors over a named
//! parameter store, with separate batch-norm running moments for the main
//! task and the watermark task.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Op, Tape};
use crate::kernels::{window_out, ConvGeom};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Dropout {
        p: f32,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Flatten => "flatten",
        }
    }
}

/// Image input dimensions, reported as (H, W, C).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        InputShape {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Final activation of the transposed model. `Sigmoid` keeps images in
/// (0, 1); `Linear` leaves them unbounded until emission clamps them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    #[default]
    Sigmoid,
}

/// Architecture descriptor: layer kinds and shapes, input dims and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    pub input: InputShape,
    pub num_classes: usize,
    pub layers: Vec<LayerKind>,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl ArchConfig {
    /// Two conv blocks (conv, BN, ReLU, 2x2 max-pool) followed by two fully
    /// connected layers.
    pub fn tiny_vgg(input: InputShape, num_classes: usize) -> Self {
        Self::tiny_vgg_with(input, num_classes, 16, 32, 32)
    }

    /// [`ArchConfig::tiny_vgg`] with explicit conv widths and hidden size.
    pub fn tiny_vgg_with(input: InputShape, num_classes: usize, c1: usize, c2: usize, hidden: usize) -> Self {
        let flat = c2 * (input.height / 4) * (input.width / 4);
        ArchConfig {
            name: "tiny_vgg".into(),
            input,
            num_classes,
            output_activation: OutputActivation::default(),
            layers: vec![
                LayerKind::Conv {
                    in_channels: input.channels,
                    out_channels: c1,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerKind::BatchNorm { channels: c1 },
                LayerKind::Relu,
                LayerKind::MaxPool {
                    kernel: 2,
                    stride: 2,
                },
                LayerKind::Conv {
                    in_channels: c1,
                    out_channels: c2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerKind::BatchNorm { channels: c2 },
                LayerKind::Relu,
                LayerKind::MaxPool {
                    kernel: 2,
                    stride: 2,
                },
                LayerKind::Flatten,
                LayerKind::Linear {
                    in_features: flat,
                    out_features: hidden,
                },
                LayerKind::Relu,
                LayerKind::Linear {
                    in_features: hidden,
                    out_features: num_classes,
                },
            ],
        }
    }
}

/// Activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        match *self {
            FeatureShape::Map { c, h, w } => c * h * w,
            FeatureShape::Flat(f) => f,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn dims(&self) -> [usize; 3] {
        match *self {
            FeatureShape::Map { c, h, w } => [c, h, w],
            FeatureShape::Flat(f) => [f, 1, 1],
        }
    }

    fn describe(&self) -> String {
        match *self {
            FeatureShape::Map { c, h, w } => format!("{c}x{h}x{w} feature map"),
            FeatureShape::Flat(f) => format!("{f} features"),
        }
    }
}

/// One layer of the main model with the parameter names it references.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub params: Vec<String>,
    pub input: FeatureShape,
    pub output: FeatureShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
}

/// Named learnable arrays, each with a gradient slot. Both the main and the
/// transposed model address parameters through this single store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

pub type ParamId = usize;

impl ParameterStore {
    fn insert(&mut self, name: String, shape: Vec<usize>, role: ParamRole, data: Vec<f32>) -> ParamId {
        let id = self.params.len();
        let n = data.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.params.push(Param {
            shape,
            role,
            data,
            grad: vec![0.0; n],
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(move |i| &mut self.params[i])
    }

    pub fn by_id(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.names.iter().map(String::as_str).zip(self.params.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// All values concatenated in store order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.count());
        for p in &self.params {
            out.extend_from_slice(&p.data);
        }
        out
    }

    pub fn flatten_grad(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.count());
        for p in &self.params {
            out.extend_from_slice(&p.grad);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::shape(format!(
                "parameter vector has {} values, model has {}",
                flat.len(),
                self.count()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Byte ranges of each parameter inside the flattened vector.
    pub fn layout(&self) -> Vec<(String, ParamRole, std::ops::Range<usize>)> {
        let mut off = 0;
        self.iter()
            .map(|(n, p)| {
                let r = off..off + p.data.len();
                off = r.end;
                (n.to_string(), p.role, r)
            })
            .collect()
    }
}

/// Which task's batch-norm running moments are read and written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Main,
    Watermark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl Moments {
    pub fn fresh(channels: usize) -> Self {
        Moments {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerStats {
    pub main: Moments,
    pub watermark: Moments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualBatchNormState {
    pub momentum: f32,
    pub eps: f32,
    pub layers: Vec<BnLayerStats>,
}

impl DualBatchNormState {
    pub fn moments(&self, slot: usize, mode: BnMode) -> &Moments {
        match mode {
            BnMode::Main => &self.layers[slot].main,
            BnMode::Watermark => &self.layers[slot].watermark,
        }
    }

    pub fn moments_mut(&mut self, slot: usize, mode: BnMode) -> &mut Moments {
        match mode {
            BnMode::Main => &mut self.layers[slot].main,
            BnMode::Watermark => &mut self.layers[slot].watermark,
        }
    }

    /// One mode's moments for every BN layer, in layer order.
    pub fn snapshot(&self, mode: BnMode) -> Vec<Moments> {
        (0..self.layers.len())
            .map(|i| self.moments(i, mode).clone())
            .collect()
    }

    pub fn install(&mut self, mode: BnMode, stats: &[Moments]) -> Result<()> {
        if stats.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} BN layers supplied, model has {}",
                stats.len(),
                self.layers.len()
            )));
        }
        for (i, s) in stats.iter().enumerate() {
            let ch = self.layers[i].main.mean.len();
            if s.mean.len() != ch || s.var.len() != ch {
                return Err(Error::shape(format!(
                    "BN layer {i} expects {ch} channels, got {}",
                    s.mean.len()
                )));
            }
        }
        for (i, s) in stats.iter().enumerate() {
            *self.moments_mut(i, mode) = s.clone();
        }
        Ok(())
    }

    pub fn reset(&mut self, mode: BnMode) {
        for l in &mut self.layers {
            let ch = l.main.mean.len();
            match mode {
                BnMode::Main => l.main = Moments::fresh(ch),
                BnMode::Watermark => l.watermark = Moments::fresh(ch),
            }
        }
    }

    pub fn channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.main.mean.len()).collect()
    }
}

/// Flattened moments (mean then var per layer) for aggregation.
pub fn flatten_moments(stats: &[Moments]) -> Vec<f32> {
    let mut out = Vec::new();
    for m in stats {
        out.extend_from_slice(&m.mean);
        out.extend_from_slice(&m.var);
    }
    out
}

pub fn unflatten_moments(flat: &[f32], channels: &[usize]) -> Result<Vec<Moments>> {
    let need: usize = channels.iter().map(|c| 2 * c).sum();
    if flat.len() != need {
        return Err(Error::shape(format!(
            "BN statistics vector has {} values, expected {need}",
            flat.len()
        )));
    }
    let mut off = 0;
    Ok(channels
        .iter()
        .map(|&c| {
            let mean = flat[off..off + c].to_vec();
            let var = flat[off + c..off + 2 * c].to_vec();
            off += 2 * c;
            Moments { mean, var }
        })
        .collect())
}

/// The main-task classifier.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub(crate) arch: ArchConfig,
    pub(crate) layers: Vec<LayerSpec>,
    pub(crate) ops: Vec<Op>,
    pub(crate) store: ParameterStore,
    pub(crate) bn: DualBatchNormState,
    pub(crate) mode: BnMode,
    pub(crate) training: bool,
    pub(crate) dropout_rng: ChaCha8Rng,
}

struct Builder {
    store: ParameterStore,
    bn: Vec<BnLayerStats>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn kaiming(&mut self, fan_in: usize, n: usize) -> Vec<f32> {
        let bound = (6.0 / fan_in as f32).sqrt();
        (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
    }
}

/// Construct a model with fresh parameters (Kaiming-uniform fan-in weights,
/// zero biases, unit BN scale) and fresh BN moments in both modes.
pub fn build_model(arch: &ArchConfig, seed: u64) -> Result<ModelGraph> {
    if arch.input.is_empty() || arch.num_classes == 0 {
        return Err(Error::invalid("input dims and class count must be positive"));
    }
    let mut b = Builder {
        store: ParameterStore::default(),
        bn: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut shape = FeatureShape::Map {
        c: arch.input.channels,
        h: arch.input.height,
        w: arch.input.width,
    };
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut ops = Vec::with_capacity(arch.layers.len());

    let mismatch = |i: usize, prev: &str, kind: &LayerKind, detail: String| Error::LayerComposition {
        from: i.saturating_sub(1),
        from_kind: prev.to_string(),
        to: i,
        to_kind: kind.name().to_string(),
        detail,
    };

    for (i, kind) in arch.layers.iter().enumerate() {
        let prev = if i == 0 {
            "input"
        } else {
            arch.layers[i - 1].name()
        };
        let input = shape;
        let (output, op, params) = match *kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let FeatureShape::Flat(f) = shape else {
                    return Err(mismatch(
                        i,
                        prev,
                        kind,
                        format!("linear needs flat features, got {}", shape.describe()),
                    ));
                };
                if f != in_features {
                    return Err(mismatch(
                        i,
                        prev,
                        kind,
                        format!("linear expects {in_features} features, previous layer produces {f}"),
                    ));
                }
                let (wn, bn) = (format!("layer{i}.weight"), format!("layer{i}.bias"));
                let wdata = b.kaiming(in_features, in_features * out_features);
                let w = b
                    .store
                    .insert(wn.clone(), vec![out_features, in_features], ParamRole::Weight, wdata);
                let bias = b
                    .store
                    .insert(bn.clone(), vec![out_features], ParamRole::Bias, vec![0.0; out_features]);
                (
                    FeatureShape::Flat(out_features),
                    Op::Linear {
                        w,
                        b: bias,
                        in_f: in_features,
                        out_f: out_features,
                    },
                    vec![wn, bn],
                )
            }
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let FeatureShape::Map { c, h, w } = shape else {
                    return Err(mismatch(
                        i,
                        prev,
                        kind,
                        format!("conv needs a feature map, got {}", shape.describe()),
                    ));
                };
                if c != in_channels {
                    return Err(mismatch(
                        i,
                        prev,
                        kind,
                        format!("conv expects {in_channels} channels, previous layer produces {c}"),
                    ));
                }
                let (Some(oh), Some(ow)) = (
                    window_out(h, kernel, stride, padding),
                    window_out(w, kernel, stride, padding),
                ) else {
                    return Err(mismatch(
                        i,
                        prev,
                        kind,
                        format!("kernel {kernel} does not fit a {h}x{w} input"),
                    ));
                };
                let geom = ConvGeom {
                    in_c: c,
                    out_c: out_channels,
                    kernel,
                    stride,
                    padding,
                    in_h: h,
                    in_w: w,
                    out_h: oh,
                    out_w: ow,
                };
                let (wn, bn) = (format!("layer{i}.weight"), format!("layer{i}.bias"));
                let fan_in = c * kernel * kernel;
                let wdata = b.kaiming(fan_in, out_channels * fan_in);
                let wid = b.store.insert(
                    wn.clone(),
                    vec![out_channels, c, kernel, kernel],
                    ParamRole::Weight,
                    wdata,
                );
                let bid = b
                    .store
                    .insert(bn.clone(), vec![out_channels], ParamRole::Bias, vec![0.0; out_channels]);
                (
                    FeatureShape::Map {
                        c: out_channels,
                        h: oh,
                        w: ow,
                    },
                    Op::Conv {
                        w: wid,
                        b: bid,
                        geom,
                    },
                    vec![wn, bn],
                )
            }
            LayerKind::BatchNorm { channels } => {
                let c = match shape {
                    FeatureShape::Map { c, .. } => c,
                    FeatureShape::Flat(f) => f,
                };
                if c != channels {
                    return Err(mismatch(
                        i,
                        prev,
                        kind,
                        format!("batchnorm over {channels} channels, previous layer produces {c}"),
                    ));
                }
                let (gn, bn) = (format!("layer{i}.gamma"), format!("layer{i}.beta"));
                let gamma = b
                    .store
                    .insert(gn.clone(), vec![channels], ParamRole::BnScale, vec![1.0; channels]);
                let beta = b
                    .store
                    .insert(bn.clone(), vec![channels], ParamRole::BnShift, vec![0.0; channels]);
                let slot = b.bn.len();
                b.bn.push(BnLayerStats {
                    main: Moments::fresh(channels),
                    watermark: Moments::fresh(channels),
                });
                (
                    shape,
                    Op::Bn {
                        slot,
                        gamma,
                        beta,
                        channels,
                    },
                    vec![gn, bn],
                )
            }
            LayerKind::Relu => (shape, Op::Relu, vec![]),
            LayerKind::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
                }
                (shape, Op::Dropout { p }, vec![])
            }
            LayerKind::MaxPool { kernel, stride } => {
                let FeatureShape::Map { c, h, w } = shape else {
                    return Err(mismatch(
                        i,
                        prev,
                        kind,
                        format!("maxpool needs a feature map, got {}", shape.describe()),
                    ));
                };
                let (Some(oh), Some(ow)) = (window_out(h, kernel, stride, 0), window_out(w, kernel, stride, 0))
                else {
                    return Err(mismatch(
                        i,
                        prev,
                        kind,
                        format!("pool window {kernel} does not fit a {h}x{w} input"),
                    ));
                };
                let geom = ConvGeom {
                    in_c: c,
                    out_c: c,
                    kernel,
                    stride,
                    padding: 0,
                    in_h: h,
                    in_w: w,
                    out_h: oh,
                    out_w: ow,
                };
                (FeatureShape::Map { c, h: oh, w: ow }, Op::MaxPool { geom }, vec![])
            }
            LayerKind::Flatten => {
                let [c, h, w] = shape.dims();
                (FeatureShape::Flat(c * h * w), Op::Flatten { c, h, w }, vec![])
            }
        };
        layers.push(LayerSpec {
            kind: kind.clone(),
            params,
            input,
            output,
        });
        ops.push(op);
        shape = output;
    }

    match shape {
        FeatureShape::Flat(f) if f == arch.num_classes => {}
        other => {
            return Err(Error::shape(format!(
                "final layer produces {}, expected {} class scores",
                other.describe(),
                arch.num_classes
            )))
        }
    }

    let dropout_seed = b.rng.random();
    Ok(ModelGraph {
        arch: arch.clone(),
        layers,
        ops,
        store: b.store,
        bn: DualBatchNormState {
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            layers: b.bn,
        },
        mode: BnMode::Main,
        training: false,
        dropout_rng: ChaCha8Rng::seed_from_u64(dropout_seed),
    })
}

impl ModelGraph {
    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &ParameterStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn bn_state(&self) -> &DualBatchNormState {
        &self.bn
    }

    pub fn bn_state_mut(&mut self) -> &mut DualBatchNormState {
        &mut self.bn
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_shape(&self) -> InputShape {
        self.arch.input
    }

    pub fn bn_mode(&self) -> BnMode {
        self.mode
    }

    /// Subsequent forwards read and update only this mode's moments.
    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.mode = mode;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub(crate) fn require_mode(&self, required: BnMode) -> Result<()> {
        if self.mode != required {
            return Err(Error::BnMode {
                active: self.mode,
                required,
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let i = self.arch.input;
        if s[1] != i.channels || s[2] != i.height || s[3] != i.width {
            return Err(Error::shape(format!(
                "batch items are {}x{}x{} (CxHxW), model expects {}x{}x{}",
                s[1], s[2], s[3], i.channels, i.height, i.width
            )));
        }
        if s[0] == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    /// Class scores of shape `(batch, num_classes, 1, 1)`.
    pub fn forward_main(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.require_mode(BnMode::Main)?;
        self.check_input(batch)?;
        let (y, _) = exec::forward(
            &self.ops,
            &self.store,
            &mut self.bn,
            BnMode::Main,
            self.training,
            &mut self.dropout_rng,
            batch.clone(),
            false,
        )?;
        Ok(y)
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_main_recorded(&mut self, batch: &Tensor) -> Result<(Tensor, Tape)> {
        self.require_mode(BnMode::Main)?;
        self.check_input(batch)?;
        exec::forward(
            &self.ops,
            &self.store,
            &mut self.bn,
            BnMode::Main,
            self.training,
            &mut self.dropout_rng,
            batch.clone(),
            true,
        )
    }

    /// Accumulate parameter gradients for a recorded main forward; returns
    /// the gradient with respect to the input batch.
    pub fn backward_main(&mut self, tape: Tape, grad_out: Tensor) -> Result<Tensor> {
        exec::backward(&self.ops, &mut self.store, tape, grad_out, true)
    }

    /// Argmax predictions in eval mode with main-task statistics.
    pub fn predict(&mut self, batch: &Tensor) -> Result<Vec<usize>> {
        let (mode, training) = (self.mode, self.training);
        self.mode = BnMode::Main;
        self.training = false;
        let out = self.forward_main(batch);
        self.mode = mode;
        self.training = training;
        let out = out?;
        let k = self.num_classes();
        Ok(out
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn flat_params(&self) -> Vec<f32> {
        self.store.flatten()
    }

    pub fn load_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        self.store.load_flat(flat)
    }
}
