//! Op-sequence executor shared by the main model and its transposed
//! counterpart. Ops address parameters by id in the shared store; BN ops
//! address a slot in the dual running-moment state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::model::{BnMode, DualBatchNormState, ParamId, ParameterStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    /// `y = x W^T + b`, W is (out, in).
    Linear {
        w: ParamId,
        b: ParamId,
        in_f: usize,
        out_f: usize,
    },
    /// `y = (x - b) W`, mapping `out_f` features back to `in_f`.
    LinearT {
        w: ParamId,
        b: ParamId,
        in_f: usize,
        out_f: usize,
    },
    Conv {
        w: ParamId,
        b: ParamId,
        geom: ConvGeom,
    },
    /// Transposed convolution with the forward kernel: `col2im(W^T (y - b))`.
    /// `geom` is the forward layer's geometry.
    ConvT {
        w: ParamId,
        b: ParamId,
        geom: ConvGeom,
    },
    MaxPool {
        geom: ConvGeom,
    },
    /// Fixed uniform-kernel transposed convolution inverting a pooling layer.
    Spread {
        geom: ConvGeom,
        weight: f32,
    },
    Bn {
        slot: usize,
        gamma: ParamId,
        beta: ParamId,
        channels: usize,
    },
    Relu,
    Sigmoid,
    Dropout {
        p: f32,
    },
    Flatten {
        c: usize,
        h: usize,
        w: usize,
    },
    Unflatten {
        c: usize,
        h: usize,
        w: usize,
    },
}

#[derive(Debug, Clone)]
enum Cache {
    Nothing,
    Input(Tensor),
    Bn {
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Mask(Vec<f32>),
    Argmax(Vec<u32>, [usize; 4]),
}

/// Intermediate values recorded by a forward pass for its backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Cache>,
}

fn feature_dims(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    (s[1], s[2], s[3])
}

/// Run `ops` on `x`. With `train` set, BN uses batch statistics and updates
/// the running moments of `mode`, and dropout is active; otherwise nothing
/// is mutated.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(
    ops: &[Op],
    store: &ParameterStore,
    bn: &mut DualBatchNormState,
    mode: BnMode,
    train: bool,
    rng: &mut ChaCha8Rng,
    mut x: Tensor,
    record: bool,
) -> Result<(Tensor, Tape)> {
    let mut caches = Vec::with_capacity(if record { ops.len() } else { 0 });
    let n = x.batch();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    for op in ops {
        let cache;
        x = match *op {
            Op::Linear { w, b, in_f, out_f } => {
                if x.item_len() != in_f {
                    return Err(Error::shape(format!("linear expects {in_f} features, got {}", x.item_len())));
                }
                let (wd, bd) = (&store.by_id(w).data, &store.by_id(b).data);
                let mut y = Tensor::zeros([n, out_f, 1, 1]);
                for row in y.data_mut().chunks_mut(out_f) {
                    row.copy_from_slice(bd);
                }
                kernels::gemm(n, in_f, out_f, x.data(), false, wd, true, y.data_mut(), 1.0);
                cache = if record { Cache::Input(x) } else { Cache::Nothing };
                y
            }
            Op::LinearT { w, b, in_f, out_f } => {
                if x.item_len() != out_f {
                    return Err(Error::shape(format!(
                        "transposed linear expects {out_f} features, got {}",
                        x.item_len()
                    )));
                }
                let (wd, bd) = (&store.by_id(w).data, &store.by_id(b).data);
                let mut centered = x;
                for row in centered.data_mut().chunks_mut(out_f) {
                    for (v, bias) in row.iter_mut().zip(bd) {
                        *v -= bias;
                    }
                }
                let mut y = Tensor::zeros([n, in_f, 1, 1]);
                kernels::gemm(n, out_f, in_f, centered.data(), false, wd, false, y.data_mut(), 0.0);
                cache = if record { Cache::Input(centered) } else { Cache::Nothing };
                y
            }
            Op::Conv { w, b, ref geom } => {
                let (wd, bd) = (&store.by_id(w).data, &store.by_id(b).data);
                let mut y = Tensor::zeros([n, geom.out_c, geom.out_h, geom.out_w]);
                let mut cols = vec![0.0; geom.cols_rows() * geom.out_hw()];
                for i in 0..n {
                    kernels::conv_forward(x.item(i), wd, bd, geom, &mut cols, y.item_mut(i));
                }
                cache = if record { Cache::Input(x) } else { Cache::Nothing };
                y
            }
            Op::ConvT { w, b, ref geom } => {
                let (wd, bd) = (&store.by_id(w).data, &store.by_id(b).data);
                let ohw = geom.out_hw();
                let mut centered = x;
                for i in 0..n {
                    for (c, plane) in centered.item_mut(i).chunks_mut(ohw).enumerate() {
                        plane.iter_mut().for_each(|v| *v -= bd[c]);
                    }
                }
                let mut y = Tensor::zeros([n, geom.in_c, geom.in_h, geom.in_w]);
                let mut cols = vec![0.0; geom.cols_rows() * ohw];
                for i in 0..n {
                    kernels::conv_input_adjoint(centered.item(i), wd, geom, &mut cols, y.item_mut(i));
                }
                cache = if record { Cache::Input(centered) } else { Cache::Nothing };
                y
            }
            Op::MaxPool { ref geom } => {
                let mut y = Tensor::zeros([n, geom.in_c, geom.out_h, geom.out_w]);
                let mut argmax = vec![0u32; y.data().len()];
                let ol = geom.out_len();
                for i in 0..n {
                    kernels::maxpool_forward(x.item(i), geom, y.item_mut(i), &mut argmax[i * ol..(i + 1) * ol]);
                }
                cache = if record {
                    Cache::Argmax(argmax, x.shape())
                } else {
                    Cache::Nothing
                };
                y
            }
            Op::Spread { ref geom, weight } => {
                let mut y = Tensor::zeros([n, geom.in_c, geom.in_h, geom.in_w]);
                for i in 0..n {
                    kernels::spread_forward(x.item(i), geom, weight, y.item_mut(i));
                }
                cache = Cache::Nothing;
                y
            }
            Op::Bn {
                slot,
                gamma,
                beta,
                channels,
            } => {
                let (c, h, w) = feature_dims(&x);
                if c != channels {
                    return Err(Error::shape(format!("batchnorm over {channels} channels, got {c}")));
                }
                let hw = h * w;
                let m = (n * hw) as f32;
                let (g, be) = (&store.by_id(gamma).data, &store.by_id(beta).data);
                let mut mean = vec![0.0f32; c];
                let mut inv_std = vec![0.0f32; c];
                if train {
                    let mut var = vec![0.0f32; c];
                    for ch in 0..c {
                        let mut s = 0.0f64;
                        for i in 0..n {
                            s += x.item(i)[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
                        }
                        let mu = s / m as f64;
                        let mut sq = 0.0f64;
                        for i in 0..n {
                            sq += x.item(i)[ch * hw..(ch + 1) * hw]
                                .iter()
                                .map(|&v| (v as f64 - mu).powi(2))
                                .sum::<f64>();
                        }
                        mean[ch] = mu as f32;
                        var[ch] = (sq / m as f64) as f32;
                    }
                    let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                    let (momentum, eps) = (bn.momentum, bn.eps);
                    let running = bn.moments_mut(slot, mode);
                    for ch in 0..c {
                        running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * mean[ch];
                        running.var[ch] = (1.0 - momentum) * running.var[ch] + momentum * var[ch] * unbiased;
                        inv_std[ch] = 1.0 / (var[ch] + eps).sqrt();
                    }
                } else {
                    let running = bn.moments(slot, mode);
                    for ch in 0..c {
                        mean[ch] = running.mean[ch];
                        inv_std[ch] = 1.0 / (running.var[ch].max(0.0) + bn.eps).sqrt();
                    }
                }
                let mut xhat = if record { vec![0.0; x.data().len()] } else { Vec::new() };
                let mut y = x;
                for i in 0..n {
                    let off = i * c * hw;
                    let item = y.item_mut(i);
                    for ch in 0..c {
                        for (k, v) in item[ch * hw..(ch + 1) * hw].iter_mut().enumerate() {
                            let xh = (*v - mean[ch]) * inv_std[ch];
                            if record {
                                xhat[off + ch * hw + k] = xh;
                            }
                            *v = xh * g[ch] + be[ch];
                        }
                    }
                }
                cache = if record {
                    Cache::Bn {
                        xhat,
                        inv_std,
                        batch_stats: train,
                    }
                } else {
                    Cache::Nothing
                };
                y
            }
            Op::Relu => {
                let mut y = x;
                let mut mask = if record { Vec::with_capacity(y.data().len()) } else { Vec::new() };
                for v in y.data_mut() {
                    let keep = *v > 0.0;
                    if !keep {
                        *v = 0.0;
                    }
                    if record {
                        mask.push(if keep { 1.0 } else { 0.0 });
                    }
                }
                cache = if record { Cache::Mask(mask) } else { Cache::Nothing };
                y
            }
            Op::Sigmoid => {
                let mut y = x;
                y.data_mut().iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
                cache = if record { Cache::Input(y.clone()) } else { Cache::Nothing };
                y
            }
            Op::Dropout { p } => {
                if train && p > 0.0 {
                    let scale = 1.0 / (1.0 - p);
                    let mut y = x;
                    let mask: Vec<f32> = (0..y.data().len())
                        .map(|_| if rng.random::<f32>() < p { 0.0 } else { scale })
                        .collect();
                    y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    cache = if record { Cache::Mask(mask) } else { Cache::Nothing };
                    y
                } else {
                    cache = Cache::Nothing;
                    x
                }
            }
            Op::Flatten { c, h, w } => {
                cache = Cache::Nothing;
                x.reshape([n, c * h * w, 1, 1])?
            }
            Op::Unflatten { c, h, w } => {
                cache = Cache::Nothing;
                x.reshape([n, c, h, w])?
            }
        };
        if record {
            caches.push(cache);
        }
    }
    Ok((x, Tape { caches }))
}

/// Reverse pass over `ops`. Accumulates parameter gradients into `store`
/// when `param_grads` is set and returns the gradient w.r.t. the input.
pub(crate) fn backward(
    ops: &[Op],
    store: &mut ParameterStore,
    tape: Tape,
    mut g: Tensor,
    param_grads: bool,
) -> Result<Tensor> {
    if tape.caches.len() != ops.len() {
        return Err(Error::invalid("tape was not recorded for this op sequence"));
    }
    let n = g.batch();
    for (op, cache) in ops.iter().zip(tape.caches).rev() {
        g = match (op, cache) {
            (&Op::Linear { w, b, in_f, out_f }, Cache::Input(x)) => {
                if param_grads {
                    let mut dw = std::mem::take(&mut store.by_id_mut(w).grad);
                    kernels::gemm(out_f, n, in_f, g.data(), true, x.data(), false, &mut dw, 1.0);
                    store.by_id_mut(w).grad = dw;
                    let db = &mut store.by_id_mut(b).grad;
                    for row in g.data().chunks(out_f) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                let mut gx = Tensor::zeros([n, in_f, 1, 1]);
                kernels::gemm(n, out_f, in_f, g.data(), false, &store.by_id(w).data, false, gx.data_mut(), 0.0);
                gx
            }
            (&Op::LinearT { w, b, in_f, out_f }, Cache::Input(centered)) => {
                // y = (x - b) W
                if param_grads {
                    let mut dw = std::mem::take(&mut store.by_id_mut(w).grad);
                    kernels::gemm(out_f, n, in_f, centered.data(), true, g.data(), false, &mut dw, 1.0);
                    store.by_id_mut(w).grad = dw;
                }
                let mut gx = Tensor::zeros([n, out_f, 1, 1]);
                kernels::gemm(n, in_f, out_f, g.data(), false, &store.by_id(w).data, true, gx.data_mut(), 0.0);
                if param_grads {
                    let db = &mut store.by_id_mut(b).grad;
                    for row in gx.data().chunks(out_f) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d -= v);
                    }
                }
                gx
            }
            (&Op::Conv { w, b, ref geom }, Cache::Input(x)) => {
                let ohw = geom.out_hw();
                let mut cols = vec![0.0; geom.cols_rows() * ohw];
                let mut gx = Tensor::zeros(x.shape());
                let mut dw = if param_grads {
                    std::mem::take(&mut store.by_id_mut(w).grad)
                } else {
                    Vec::new()
                };
                for i in 0..n {
                    let gi = g.item(i);
                    if param_grads {
                        kernels::im2col(x.item(i), geom, &mut cols);
                        kernels::conv_weight_grad(gi, &cols, geom, &mut dw);
                        let db = &mut store.by_id_mut(b).grad;
                        for (c, plane) in gi.chunks(ohw).enumerate() {
                            db[c] += plane.iter().sum::<f32>();
                        }
                    }
                    kernels::conv_input_adjoint(gi, &store.by_id(w).data, geom, &mut cols, gx.item_mut(i));
                }
                if param_grads {
                    store.by_id_mut(w).grad = dw;
                }
                gx
            }
            (&Op::ConvT { w, b, ref geom }, Cache::Input(centered)) => {
                // out = col2im(W^T z), z = y - b
                let ohw = geom.out_hw();
                let mut cols = vec![0.0; geom.cols_rows() * ohw];
                let mut gz = Tensor::zeros(centered.shape());
                let mut dw = if param_grads {
                    std::mem::take(&mut store.by_id_mut(w).grad)
                } else {
                    Vec::new()
                };
                let wd = &store.by_id(w).data;
                for i in 0..n {
                    kernels::im2col(g.item(i), geom, &mut cols);
                    kernels::gemm(geom.out_c, geom.cols_rows(), ohw, wd, false, &cols, false, gz.item_mut(i), 0.0);
                    if param_grads {
                        kernels::conv_weight_grad(centered.item(i), &cols, geom, &mut dw);
                    }
                }
                if param_grads {
                    store.by_id_mut(w).grad = dw;
                    let db = &mut store.by_id_mut(b).grad;
                    for i in 0..n {
                        for (c, plane) in gz.item(i).chunks(ohw).enumerate() {
                            db[c] -= plane.iter().sum::<f32>();
                        }
                    }
                }
                gz
            }
            (&Op::MaxPool { .. }, Cache::Argmax(argmax, in_shape)) => {
                let mut gx = Tensor::zeros(in_shape);
                let ol = g.item_len();
                for i in 0..n {
                    let gi = g.item(i);
                    let dst = gx.item_mut(i);
                    for (o, &at) in argmax[i * ol..(i + 1) * ol].iter().enumerate() {
                        dst[at as usize] += gi[o];
                    }
                }
                gx
            }
            (&Op::Spread { ref geom, weight }, Cache::Nothing) => {
                let mut gy = Tensor::zeros([n, geom.in_c, geom.out_h, geom.out_w]);
                for i in 0..n {
                    kernels::spread_adjoint(g.item(i), geom, weight, gy.item_mut(i));
                }
                gy
            }
            (
                &Op::Bn {
                    gamma,
                    beta,
                    channels: c,
                    ..
                },
                Cache::Bn {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            ) => {
                let hw = g.item_len() / c;
                let m = (n * hw) as f32;
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for i in 0..n {
                    let gi = g.item(i);
                    for ch in 0..c {
                        for k in 0..hw {
                            let idx = ch * hw + k;
                            dgamma[ch] += gi[idx] * xhat[i * c * hw + idx];
                            dbeta[ch] += gi[idx];
                        }
                    }
                }
                let gam = store.by_id(gamma).data.clone();
                if param_grads {
                    store.by_id_mut(gamma).grad.iter_mut().zip(&dgamma).for_each(|(d, v)| *d += v);
                    store.by_id_mut(beta).grad.iter_mut().zip(&dbeta).for_each(|(d, v)| *d += v);
                }
                let mut gx = g;
                for i in 0..n {
                    let item = gx.item_mut(i);
                    for ch in 0..c {
                        let k1 = gam[ch] * inv_std[ch];
                        for k in 0..hw {
                            let idx = ch * hw + k;
                            item[idx] = if batch_stats {
                                // dx = γ/σ (g - mean(g) - x̂ mean(g x̂))
                                k1 * (item[idx] - dbeta[ch] / m - xhat[i * c * hw + idx] * dgamma[ch] / m)
                            } else {
                                k1 * item[idx]
                            };
                        }
                    }
                }
                gx
            }
            (Op::Relu, Cache::Mask(mask)) | (Op::Dropout { .. }, Cache::Mask(mask)) => {
                let mut gx = g;
                gx.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                gx
            }
            (Op::Sigmoid, Cache::Input(y)) => {
                let mut gx = g;
                gx.data_mut().iter_mut().zip(y.data()).for_each(|(d, s)| *d *= s * (1.0 - s));
                gx
            }
            (Op::Dropout { .. }, Cache::Nothing) => g,
            (&Op::Flatten { c, h, w }, Cache::Nothing) => g.reshape([n, c, h, w])?,
            (&Op::Unflatten { c, h, w }, Cache::Nothing) => g.reshape([n, c * h * w, 1, 1])?,
            (op, _) => {
                return Err(Error::invalid(format!("tape entry does not match op {op:?}")));
            }
        };
    }
    Ok(g)
}
