//! Transposed model: the main model's layers in reverse order, each replaced
//! by its inverse-direction counterpart, reading every learnable parameter
//! from the main model's store.
//!
//! | forward      | transposed                                         |
//! |--------------|----------------------------------------------------|
//! | linear       | `y = (x - b) W`                                    |
//! | conv         | transposed conv with the same kernel, `y - b` first |
//! | maxpool      | transposed conv, same stride, fixed uniform kernel  |
//! | batchnorm    | batchnorm, same γ/β, watermark-mode moments         |
//! | relu/dropout | unchanged (dropout is the identity)                 |
//! | flatten      | reshape to the recorded feature map                 |

use crate::error::{Error, Result};
use crate::exec::{self, Op, Tape};
use crate::model::{BnMode, FeatureShape, InputShape, LayerKind, LayerSpec, ModelGraph, OutputActivation};
use crate::tensor::Tensor;

/// Transposed convolution descriptor. `kernel_source` is `None` when the
/// kernel is the fixed uniform one used to invert pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct TransposedConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub kernel_source: Option<String>,
    pub bias_source: Option<String>,
    pub fixed_weight: Option<f32>,
}

impl TransposedConvSpec {
    /// `(input - 1) * stride - 2 * padding + kernel + output_padding`
    pub fn output_size(&self, input: usize) -> usize {
        ((input as i64 - 1) * self.stride as i64 - 2 * self.padding as i64 + self.kernel as i64
            + self.output_padding as i64)
            .max(0) as usize
    }
}

/// Smallest nonnegative `output_padding` (below the stride) that maps `input`
/// to `target` through a transposed conv.
pub fn solve_output_padding(input: usize, target: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let base = (input as i64 - 1) * stride as i64 - 2 * padding as i64 + kernel as i64;
    let required = target as i64 - base;
    if required < 0 || required >= stride.max(1) as i64 {
        return Err(Error::OutputPadding {
            input,
            target,
            kernel,
            stride,
            padding,
            required,
        });
    }
    Ok(required as usize)
}

/// Transposed-conv spec for a forward conv or maxpool layer. The result maps
/// the forward output size back to the forward input size.
pub fn transpose_conv_spec(spec: &LayerSpec) -> Result<TransposedConvSpec> {
    let (FeatureShape::Map { c: in_c, h: in_h, w: in_w }, FeatureShape::Map { h: out_h, w: out_w, .. }) =
        (spec.input, spec.output)
    else {
        return Err(Error::shape("conv/pool layer without feature-map shapes"));
    };
    let (out_c, kernel, stride, padding, kernel_source, bias_source, fixed_weight) = match spec.kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => (
            out_channels,
            kernel,
            stride,
            padding,
            spec.params.first().cloned(),
            spec.params.get(1).cloned(),
            None,
        ),
        LayerKind::MaxPool { kernel, stride } => {
            let ratio = stride as f32 / kernel as f32;
            (in_c, kernel, stride, 0, None, None, Some(ratio * ratio))
        }
        ref other => return Err(Error::UnsupportedLayer(format!("{} is not a conv or pool layer", other.name()))),
    };
    let op_h = solve_output_padding(out_h, in_h, kernel, stride, padding)?;
    let op_w = solve_output_padding(out_w, in_w, kernel, stride, padding)?;
    if op_h != op_w {
        return Err(Error::shape(format!(
            "non-square output padding ({op_h}, {op_w}) is not supported"
        )));
    }
    Ok(TransposedConvSpec {
        in_channels: out_c,
        out_channels: in_c,
        kernel,
        stride,
        padding,
        output_padding: op_h,
        kernel_source,
        bias_source,
        fixed_weight,
    })
}

/// `(x - b) W` for a linear layer with weight rows `w` (one per output).
pub fn transpose_linear_forward(x: &[f32], w: &[Vec<f32>], b: &[f32]) -> Result<Vec<f32>> {
    if x.len() != b.len() || x.len() != w.len() {
        return Err(Error::shape(format!(
            "transposed linear: x has {}, b has {}, W has {} rows",
            x.len(),
            b.len(),
            w.len()
        )));
    }
    let cols = w.first().map_or(0, Vec::len);
    if w.iter().any(|r| r.len() != cols) {
        return Err(Error::shape("ragged weight matrix"));
    }
    let mut y = vec![0.0; cols];
    for ((xi, bi), row) in x.iter().zip(b).zip(w) {
        let d = xi - bi;
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += d * wij;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransposedKind {
    TransposedLinear { in_features: usize, out_features: usize },
    TransposedConv(TransposedConvSpec),
    BatchNorm { channels: usize },
    Relu,
    Dropout { p: f32 },
    Reshape { c: usize, h: usize, w: usize },
    Sigmoid,
}

impl TransposedKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransposedKind::TransposedLinear { .. } => "transposed_linear",
            TransposedKind::TransposedConv(_) => "transposed_conv",
            TransposedKind::BatchNorm { .. } => "batchnorm",
            TransposedKind::Relu => "relu",
            TransposedKind::Dropout { .. } => "dropout",
            TransposedKind::Reshape { .. } => "reshape",
            TransposedKind::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransposedLayer {
    pub kind: TransposedKind,
    /// Names of the shared parameters this layer reads.
    pub params: Vec<String>,
    pub input: FeatureShape,
    pub output: FeatureShape,
}

/// Reverse-mapping network from a class-dimension vector to an input-sized
/// image. Holds no parameters of its own.
#[derive(Debug, Clone)]
pub struct TransposedModel {
    layers: Vec<TransposedLayer>,
    ops: Vec<Op>,
    input_dim: usize,
    output: InputShape,
}

/// Build the transposed counterpart of `model`.
pub fn build_transposed(model: &ModelGraph) -> Result<TransposedModel> {
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut ops = Vec::with_capacity(model.ops.len());
    for (spec, op) in model.layers.iter().zip(&model.ops).rev() {
        let (kind, top) = match (&spec.kind, op) {
            (LayerKind::Linear { in_features, out_features }, &Op::Linear { w, b, in_f, out_f }) => (
                TransposedKind::TransposedLinear {
                    in_features: *out_features,
                    out_features: *in_features,
                },
                Op::LinearT { w, b, in_f, out_f },
            ),
            (LayerKind::Conv { .. }, &Op::Conv { w, b, geom }) => {
                let t = transpose_conv_spec(spec)?;
                (TransposedKind::TransposedConv(t), Op::ConvT { w, b, geom })
            }
            (LayerKind::MaxPool { .. }, &Op::MaxPool { geom }) => {
                let t = transpose_conv_spec(spec)?;
                let weight = t.fixed_weight.unwrap_or(1.0);
                (TransposedKind::TransposedConv(t), Op::Spread { geom, weight })
            }
            (LayerKind::BatchNorm { channels }, op @ Op::Bn { .. }) => {
                (TransposedKind::BatchNorm { channels: *channels }, op.clone())
            }
            (LayerKind::Relu, Op::Relu) => (TransposedKind::Relu, Op::Relu),
            (LayerKind::Dropout { p }, Op::Dropout { .. }) => (TransposedKind::Dropout { p: *p }, Op::Dropout { p: 0.0 }),
            (LayerKind::Flatten, &Op::Flatten { c, h, w }) => {
                (TransposedKind::Reshape { c, h, w }, Op::Unflatten { c, h, w })
            }
            (kind, _) => return Err(Error::UnsupportedLayer(kind.name().to_string())),
        };
        layers.push(TransposedLayer {
            kind,
            params: spec.params.clone(),
            input: spec.output,
            output: spec.input,
        });
        ops.push(top);
    }
    if model.arch().output_activation == OutputActivation::Sigmoid {
        let shape = model.layers.first().map(|l| l.input).ok_or_else(|| Error::invalid("empty model"))?;
        layers.push(TransposedLayer {
            kind: TransposedKind::Sigmoid,
            params: Vec::new(),
            input: shape,
            output: shape,
        });
        ops.push(Op::Sigmoid);
    }
    Ok(TransposedModel {
        layers,
        ops,
        input_dim: model.num_classes(),
        output: model.input_shape(),
    })
}

impl TransposedModel {
    pub fn layers(&self) -> &[TransposedLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn image_shape(&self) -> InputShape {
        self.output
    }

    /// Output shape reported as `(batch, H, W, C)`.
    pub fn output_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.output.height, self.output.width, self.output.channels]
    }

    /// Learnable parameters owned by the transposed model itself.
    pub fn own_parameter_count(&self) -> usize {
        0
    }

    fn check(&self, model: &ModelGraph, v: &Tensor) -> Result<()> {
        model.require_mode(BnMode::Watermark)?;
        if v.item_len() != self.input_dim {
            return Err(Error::shape(format!(
                "extraction vectors have {} entries, model has {} classes",
                v.item_len(),
                self.input_dim
            )));
        }
        if v.batch() == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    fn as_features(&self, v: &Tensor) -> Result<Tensor> {
        v.clone().reshape([v.batch(), self.input_dim, 1, 1])
    }

    /// Raw (pre-clamp) images of shape `(batch, C, H, W)`. In training mode
    /// this updates watermark-mode BN moments only.
    pub fn forward_watermark(&self, model: &mut ModelGraph, v: &Tensor) -> Result<Tensor> {
        self.check(model, v)?;
        let (y, _) = exec::forward(
            &self.ops,
            &model.store,
            &mut model.bn,
            BnMode::Watermark,
            model.training,
            &mut model.dropout_rng,
            self.as_features(v)?,
            false,
        )?;
        Ok(y)
    }

    pub fn forward_watermark_recorded(&self, model: &mut ModelGraph, v: &Tensor) -> Result<(Tensor, Tape)> {
        self.check(model, v)?;
        exec::forward(
            &self.ops,
            &model.store,
            &mut model.bn,
            BnMode::Watermark,
            model.training,
            &mut model.dropout_rng,
            self.as_features(v)?,
            true,
        )
    }

    /// Accumulates shared-parameter gradients; returns d/d(input vectors).
    pub fn backward(&self, model: &mut ModelGraph, tape: Tape, grad_out: Tensor) -> Result<Tensor> {
        exec::backward(&self.ops, &mut model.store, tape, grad_out, true)
    }

    /// Eval-mode image for each vector, clamped to [0, 1], using whatever
    /// watermark-mode moments are installed. Restores the model's mode flags.
    pub fn reconstruct(&self, model: &mut ModelGraph, v: &Tensor) -> Result<Tensor> {
        let (mode, training) = (model.mode, model.training);
        model.mode = BnMode::Watermark;
        model.training = false;
        let out = self.forward_watermark(model, v);
        model.mode = mode;
        model.training = training;
        Ok(clamp_unit(&out?))
    }

    /// Gradient with respect to the input vectors only; parameter gradient
    /// slots are left untouched.
    pub fn input_gradient(&self, model: &mut ModelGraph, tape: Tape, grad_out: Tensor) -> Result<Tensor> {
        exec::backward(&self.ops, &mut model.store, tape, grad_out, false)
    }
}

/// Clamp raw transposed outputs to the displayable range.
pub fn clamp_unit(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}
