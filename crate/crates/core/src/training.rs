//! The watermark objective and one client's local round.
//!
//! Every optimization step interleaves one main-task batch (BN mode
//! `Main`) with one watermark batch pushed through the transposed model
//! (BN mode `Watermark`); both backward passes accumulate into the shared
//! parameter gradients before a single SGD step.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{ssim, ssim_with_grad, SsimConfig};
use crate::model::{BnMode, ModelGraph, Moments, ParameterStore};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;
use crate::transpose::TransposedModel;
use crate::watermark::{augment_vectors, AugmentedVectorSet, ExtractionVector, Label, WatermarkImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the watermark term in the joint loss.
    pub lambda: f32,
    /// Positive-branch weight; negatives get `1 - y_w`.
    pub y_w: f32,
    pub margin: f32,
    pub local_epochs: usize,
    pub main_batch: usize,
    /// Augmented vectors per step, in addition to the key vector itself.
    pub wm_batch: usize,
    /// Size of the augmented set rebuilt each round; 0 disables the
    /// watermark task entirely.
    pub num_vectors: usize,
    /// Cosine threshold separating positives from negatives.
    pub delta: f32,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
    pub contrastive_enabled: bool,
    pub ssim: SsimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            y_w: 0.3,
            margin: 0.5,
            local_epochs: 2,
            main_batch: 16,
            wm_batch: 8,
            num_vectors: 32,
            delta: 0.95,
            lr: 0.02,
            momentum: 0.9,
            seed: 0,
            contrastive_enabled: true,
            ssim: SsimConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Same optimizer settings with the watermark task switched off.
    pub fn without_watermark(&self) -> Self {
        TrainConfig {
            lambda: 0.0,
            num_vectors: 0,
            ..self.clone()
        }
    }

    pub fn watermark_enabled(&self) -> bool {
        self.num_vectors > 0 && self.lambda > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f32| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        unit("y_w", self.y_w)?;
        unit("margin", self.margin)?;
        unit("delta", self.delta)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.local_epochs == 0 || self.main_batch == 0 {
            return Err(Error::invalid("local_epochs and main_batch must be >= 1"));
        }
        if self.num_vectors > 0 && (self.num_vectors < 2 || self.wm_batch == 0) {
            return Err(Error::invalid("a watermark task needs num_vectors >= 2 and wm_batch >= 1"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "need lr > 0 and momentum in [0, 1), got {} and {}",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

/// Contrastive watermark loss over a batch of transposed outputs and its
/// gradient with respect to those outputs.
///
/// Positives contribute `y_w * (1 - SSIM)`, negatives
/// `(1 - y_w) * max(0, m - SSIM)`; the result is the batch mean.
pub fn contrastive_loss(
    outputs: &Tensor,
    labels: &[Label],
    wm: &WatermarkImage,
    y_w: f32,
    margin: f32,
    cfg: &SsimConfig,
) -> Result<(f64, Tensor)> {
    check_batch(outputs, labels, wm)?;
    let b = outputs.batch() as f64;
    let mut grad = Tensor::zeros(outputs.shape());
    let mut total = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let (s, g) = ssim_with_grad(outputs.item(i), &wm.data, wm.dims(), cfg)?;
        let scale = match label {
            Label::Positive => {
                total += y_w as f64 * (1.0 - s);
                -(y_w as f64)
            }
            Label::Negative if s < margin as f64 => {
                total += (1.0 - y_w) as f64 * (margin as f64 - s);
                -((1.0 - y_w) as f64)
            }
            Label::Negative => 0.0,
        };
        if scale != 0.0 {
            let k = (scale / b) as f32;
            grad.item_mut(i).iter_mut().zip(&g).for_each(|(d, g)| *d = k * g);
        }
    }
    Ok((total / b, grad))
}

/// Positive-only reconstruction loss `mean(1 - SSIM)` used when contrastive
/// learning is switched off. Negatives are ignored.
pub fn reconstruction_loss(
    outputs: &Tensor,
    labels: &[Label],
    wm: &WatermarkImage,
    cfg: &SsimConfig,
) -> Result<(f64, Tensor)> {
    check_batch(outputs, labels, wm)?;
    let npos = labels.iter().filter(|l| **l == Label::Positive).count();
    if npos == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut grad = Tensor::zeros(outputs.shape());
    let mut total = 0.0;
    for (i, _) in labels.iter().enumerate().filter(|(_, l)| **l == Label::Positive) {
        let (s, g) = ssim_with_grad(outputs.item(i), &wm.data, wm.dims(), cfg)?;
        total += 1.0 - s;
        let k = -1.0 / npos as f32;
        grad.item_mut(i).iter_mut().zip(&g).for_each(|(d, g)| *d = k * g);
    }
    Ok((total / npos as f64, grad))
}

fn check_batch(outputs: &Tensor, labels: &[Label], wm: &WatermarkImage) -> Result<()> {
    if labels.is_empty() || outputs.batch() == 0 {
        return Err(Error::EmptyBatch);
    }
    if outputs.batch() != labels.len() {
        return Err(Error::shape(format!("{} outputs but {} labels", outputs.batch(), labels.len())));
    }
    if outputs.item_len() != wm.data.len() {
        return Err(Error::shape(format!(
            "outputs have {} values per item, watermark has {}",
            outputs.item_len(),
            wm.data.len()
        )));
    }
    Ok(())
}

pub fn joint_loss(main_loss: f64, c_loss: f64, lambda: f32) -> f64 {
    main_loss + lambda as f64 * c_loss
}

/// Mean softmax cross-entropy of `(batch, classes, 1, 1)` logits and its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let b = logits.batch();
    if b == 0 || b != labels.len() {
        return Err(Error::shape(format!("{b} logit rows but {} labels", labels.len())));
    }
    let k = logits.item_len();
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} outside 0..{k}")));
        }
        let row = logits.item(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&z| ((z - max) as f64).exp()).sum();
        total += sum.ln() - (row[y] - max) as f64;
        for (j, g) in grad.item_mut(i).iter_mut().enumerate() {
            let p = ((row[j] - max) as f64).exp() / sum;
            let t = if j == y { 1.0 } else { 0.0 };
            *g = ((p - t) / b as f64) as f32;
        }
    }
    Ok((total / b as f64, grad))
}

/// SGD with heavy-ball momentum over a parameter store.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParameterStore) {
        if self.velocity.is_empty() {
            self.velocity = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        }
        for ((_, p), vel) in store.iter_mut().zip(&mut self.velocity) {
            for ((w, g), v) in p.data.iter_mut().zip(&p.grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
    }
}

/// Client-side gradient corrections supplied by the aggregation scheme.
#[derive(Debug, Clone, Copy, Default)]
pub enum LocalCorrection<'a> {
    #[default]
    None,
    /// Gradient of `(mu/2) * ||w - reference||^2`.
    Proximal { mu: f32, reference: &'a [f32] },
    /// Control-variate drift correction `c - c_i`.
    Scaffold { server: &'a [f32], client: &'a [f32] },
}

impl LocalCorrection<'_> {
    fn apply(&self, store: &mut ParameterStore) {
        let mut off = 0;
        for (_, p) in store.iter_mut() {
            let n = p.grad.len();
            match *self {
                LocalCorrection::None => {}
                LocalCorrection::Proximal { mu, reference } => {
                    for ((g, w), r) in p.grad.iter_mut().zip(&p.data).zip(&reference[off..off + n]) {
                        *g += mu * (w - r);
                    }
                }
                LocalCorrection::Scaffold { server, client } => {
                    for ((g, c), ci) in p.grad.iter_mut().zip(&server[off..off + n]).zip(&client[off..off + n]) {
                        *g += c - ci;
                    }
                }
            }
            off += n;
        }
    }
}

/// One client's private state. Its watermark-mode BN moments never leave it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Indices into the federation's training set.
    pub shard: Vec<usize>,
    pub vector: ExtractionVector,
    pub watermark: WatermarkImage,
    pub wm_bn: Vec<Moments>,
    /// Augmentation noise scale.
    pub sigma: f32,
    pub seed: u64,
}

/// What the server broadcasts: learnable parameters and main-task moments.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub params: Vec<f32>,
    pub main_bn: Vec<Moments>,
}

impl GlobalModel {
    pub fn from_model(model: &ModelGraph) -> Self {
        GlobalModel {
            params: model.flat_params(),
            main_bn: model.bn_state().snapshot(BnMode::Main),
        }
    }

    pub fn load_into(&self, model: &mut ModelGraph) -> Result<()> {
        model.load_flat_params(&self.params)?;
        model.bn_state_mut().install(BnMode::Main, &self.main_bn)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub main_loss: f64,
    pub wm_loss: f64,
    /// SSIM of the clamped eval-mode reconstruction `T(v)` against `wm`.
    pub ssim: f64,
    pub steps: usize,
}

/// A client's upload: the full parameter vector and main-task moments.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client: usize,
    pub params: Vec<f32>,
    pub main_bn: Vec<Moments>,
    pub samples: usize,
    pub metrics: RoundMetrics,
}

/// Eval-mode SSIM of the client's reconstruction, with the client's
/// watermark moments installed in `model`.
pub fn local_ssim(model: &mut ModelGraph, t: &TransposedModel, client: &ClientState, cfg: &SsimConfig) -> Result<f64> {
    let out = t.reconstruct(model, &client.vector.to_tensor())?;
    ssim(out.item(0), &client.watermark.data, client.watermark.dims(), cfg)
}

/// Vectors the watermark batches cycle through: the whole augmented set,
/// or only its positives when the contrastive term is disabled.
pub fn watermark_pool(set: &AugmentedVectorSet, cfg: &TrainConfig) -> Vec<(Vec<f32>, Label)> {
    if cfg.contrastive_enabled {
        set.entries.clone()
    } else {
        set.positives().map(|v| (v.clone(), Label::Positive)).collect()
    }
}

/// Forward and backward one watermark batch (the key vector plus the next
/// `wm_batch` pool entries) in watermark BN mode, accumulating λ-scaled
/// gradients. Returns the unscaled watermark loss.
pub fn watermark_backward(
    model: &mut ModelGraph,
    t: &TransposedModel,
    client: &ClientState,
    pool: &[(Vec<f32>, Label)],
    cursor: &mut usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let take = cfg.wm_batch.min(pool.len());
    let mut rows = vec![client.vector.values.clone()];
    let mut labels = vec![Label::Positive];
    for k in 0..take {
        let (v, l) = &pool[(*cursor + k) % pool.len()];
        rows.push(v.clone());
        labels.push(*l);
    }
    *cursor = (*cursor + take) % pool.len().max(1);
    model.set_bn_mode(BnMode::Watermark);
    let (out, tape) = t.forward_watermark_recorded(model, &Tensor::from_rows(&rows)?)?;
    let (loss, mut g) = if cfg.contrastive_enabled {
        contrastive_loss(&out, &labels, &client.watermark, cfg.y_w, cfg.margin, &cfg.ssim)?
    } else {
        reconstruction_loss(&out, &labels, &client.watermark, &cfg.ssim)?
    };
    g.data_mut().iter_mut().for_each(|v| *v *= cfg.lambda);
    t.backward(model, tape, g)?;
    Ok(loss)
}

/// Run one local round for `client` starting from `global`. `model` is a
/// scratch model of the right architecture; it ends holding the client's
/// trained state. The client's watermark moments are updated in place.
#[allow(clippy::too_many_arguments)]
pub fn local_round(
    model: &mut ModelGraph,
    t: &TransposedModel,
    client: &mut ClientState,
    data: &Dataset,
    global: &GlobalModel,
    round: usize,
    cfg: &TrainConfig,
    correction: LocalCorrection<'_>,
) -> Result<LocalUpdate> {
    cfg.validate()?;
    if client.shard.is_empty() {
        return Err(Error::EmptyBatch);
    }
    global.load_into(model)?;
    model.bn_state_mut().install(BnMode::Watermark, &client.wm_bn)?;
    model.set_training(true);
    model.reseed_dropout(derive_seed(cfg.seed ^ client.seed, "dropout", round as u64, client.id as u64));
    let watermarking = cfg.watermark_enabled();
    let (round_u, id_u) = (round as u64, client.id as u64);
    let set = if watermarking {
        let mut rng = rng_for(cfg.seed ^ client.seed, "augment", round_u, id_u);
        Some(augment_vectors(&client.vector, cfg.num_vectors, client.sigma, cfg.delta, &mut rng)?)
    } else {
        None
    };
    let wm_pool = match &set {
        Some(s) => watermark_pool(s, cfg),
        None => Vec::new(),
    };
    let mut shuffle = rng_for(cfg.seed ^ client.seed, "shuffle", round_u, id_u);
    let mut order = client.shard.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let nonfinite = |detail: String| Error::NonFiniteLoss {
        round,
        client: client.id,
        detail,
    };
    let (mut main_sum, mut wm_sum, mut steps, mut cursor) = (0.0, 0.0, 0usize, 0usize);
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.main_batch) {
            model.params_mut().zero_grad();
            model.set_bn_mode(BnMode::Main);
            let (x, y) = data.batch(chunk);
            let (logits, tape) = model.forward_main_recorded(&x)?;
            let (main_loss, g) = cross_entropy(&logits, &y)?;
            model.backward_main(tape, g)?;
            let wm_loss = if watermarking {
                watermark_backward(model, t, client, &wm_pool, &mut cursor, cfg)?
            } else {
                0.0
            };
            let total = joint_loss(main_loss, wm_loss, cfg.lambda);
            if !total.is_finite() {
                return Err(nonfinite(format!("main {main_loss}, watermark {wm_loss} at step {steps}")));
            }
            correction.apply(model.params_mut());
            opt.step(model.params_mut());
            main_sum += main_loss;
            wm_sum += wm_loss;
            steps += 1;
        }
    }
    model.set_bn_mode(BnMode::Main);
    client.wm_bn = model.bn_state().snapshot(BnMode::Watermark);
    let ssim_now = if watermarking {
        local_ssim(model, t, client, &cfg.ssim)?
    } else {
        0.0
    };
    model.set_training(false);
    let params = model.flat_params();
    if params.iter().any(|v| !v.is_finite()) {
        return Err(nonfinite("parameters diverged".into()));
    }
    Ok(LocalUpdate {
        client: client.id,
        params,
        main_bn: model.bn_state().snapshot(BnMode::Main),
        samples: client.shard.len(),
        metrics: RoundMetrics {
            main_loss: main_sum / steps as f64,
            wm_loss: wm_sum / steps as f64,
            ssim: ssim_now,
            steps,
        },
    })
}

/// Fraction of `data` classified correctly in eval mode.
pub fn accuracy(model: &mut ModelGraph, data: &Dataset) -> Result<f64> {
    const CHUNK: usize = 256;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, y) = data.batch(chunk);
        correct += model.predict(&x)?.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchConfig, InputShape, LayerKind};
    use crate::transpose::build_transposed;
    use crate::watermark::{generate_extraction_vector, glyph_watermark, Provenance};

    fn wm_of(data: Vec<f32>, h: usize, w: usize) -> WatermarkImage {
        WatermarkImage::new(InputShape::new(h, w, 1), data, Provenance::Raw).unwrap()
    }

    #[test]
    fn perfect_positive_and_satisfied_negative_cost_nothing() {
        let wm = glyph_watermark(0, InputShape::new(8, 8, 1));
        let out = Tensor::from_vec([1, 1, 8, 8], wm.data.clone()).unwrap();
        let cfg = SsimConfig::uniform(3, 1.0);
        let (l, _) = contrastive_loss(&out, &[Label::Positive], &wm, 0.3, 0.5, &cfg).unwrap();
        assert!(l.abs() < 1e-9);
        let (l, g) = contrastive_loss(&out, &[Label::Negative], &wm, 0.3, 0.5, &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn contrastive_hand_value() {
        // Build two outputs whose SSIM against wm is known exactly, then
        // evaluate the loss formula by hand.
        let wm = glyph_watermark(1, InputShape::new(8, 8, 1));
        let cfg = SsimConfig::uniform(3, 1.0);
        let a: Vec<f32> = wm.data.iter().map(|v| 0.8 * v + 0.1).collect();
        let b: Vec<f32> = wm.data.iter().rev().cloned().collect();
        let sa = ssim(&a, &wm.data, wm.dims(), &cfg).unwrap();
        let sb = ssim(&b, &wm.data, wm.dims(), &cfg).unwrap();
        assert!(sb < 0.5);
        let mut rows = a.clone();
        rows.extend(&b);
        let out = Tensor::from_vec([2, 1, 8, 8], rows).unwrap();
        let (l, _) = contrastive_loss(&out, &[Label::Positive, Label::Negative], &wm, 0.5, 0.5, &cfg).unwrap();
        let expect = (0.5 * (1.0 - sa) + 0.5 * (0.5 - sb)) / 2.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn spec_scalar_example() {
        // y_w = m = 0.5, positive SSIM 0.8, negative SSIM 0.1
        let pos = 0.5 * (1.0 - 0.8);
        let neg = 0.5 * (0.5f64 - 0.1).max(0.0);
        assert!(((pos + neg) / 2.0 - 0.15).abs() < 1e-12);
        assert_eq!(joint_loss(0.7, 0.15, 0.0), 0.7);
        assert!((joint_loss(0.7, 0.15, 1.0) - 0.85).abs() < 1e-12);
    }

    #[test]
    fn hinge_is_monotone_in_negative_ssim() {
        let wm = glyph_watermark(2, InputShape::new(8, 8, 1));
        let cfg = SsimConfig::uniform(3, 1.0);
        let noise: Vec<f32> = (0..64).map(|i| ((i * 37 % 64) as f32) / 64.0).collect();
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let t = k as f32 / 10.0;
            let x: Vec<f32> = wm.data.iter().zip(&noise).map(|(w, n)| t * w + (1.0 - t) * n).collect();
            let out = Tensor::from_vec([1, 1, 8, 8], x).unwrap();
            let (l, _) = contrastive_loss(&out, &[Label::Negative], &wm, 0.3, 0.5, &cfg).unwrap();
            assert!(l <= last + 1e-12);
            last = l;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn loss_rejects_bad_batches() {
        let wm = wm_of(vec![0.5; 64], 8, 8);
        let cfg = SsimConfig::uniform(3, 1.0);
        let out = Tensor::zeros([2, 1, 8, 8]);
        assert!(matches!(
            contrastive_loss(&out, &[], &wm, 0.3, 0.5, &cfg),
            Err(Error::EmptyBatch)
        ));
        assert!(contrastive_loss(&out, &[Label::Positive], &wm, 0.3, 0.5, &cfg).is_err());
        assert!(reconstruction_loss(&out, &[Label::Negative, Label::Negative], &wm, &cfg).is_err());
    }

    #[test]
    fn cross_entropy_matches_softmax_by_hand() {
        let logits = Tensor::from_vec([1, 3, 1, 1], vec![1.0, 2.0, 0.5]).unwrap();
        let (l, g) = cross_entropy(&logits, &[1]).unwrap();
        let z: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).sum();
        assert!((l - (z.ln() - 2.0)).abs() < 1e-6);
        assert!((g.data()[0] as f64 - 1f64.exp() / z).abs() < 1e-6);
        assert!((g.data()[1] as f64 - (2f64.exp() / z - 1.0)).abs() < 1e-6);
    }

    fn micro_arch(kinked: bool) -> ArchConfig {
        let mut layers = vec![
            LayerKind::Conv {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerKind::BatchNorm { channels: 2 },
        ];
        let features = if kinked {
            layers.extend([LayerKind::Relu, LayerKind::MaxPool { kernel: 2, stride: 2 }]);
            18
        } else {
            72
        };
        layers.extend([
            LayerKind::Flatten,
            LayerKind::Linear {
                in_features: features,
                out_features: 3,
            },
        ]);
        ArchConfig {
            name: "micro".into(),
            input: InputShape::new(6, 6, 1),
            num_classes: 3,
            layers,
            output_activation: crate::model::OutputActivation::Sigmoid,
        }
    }

    /// Joint loss of a fixed main batch and a fixed watermark batch, with
    /// BN in eval mode so the loss is a pure function of the parameters.
    #[allow(clippy::too_many_arguments)]
    fn joint_at(
        model: &mut ModelGraph,
        t: &TransposedModel,
        x: &Tensor,
        y: &[usize],
        v: &Tensor,
        labels: &[Label],
        wm: &WatermarkImage,
        cfg: &SsimConfig,
        backward: bool,
    ) -> f64 {
        model.params_mut().zero_grad();
        model.set_bn_mode(BnMode::Main);
        let (logits, tape) = model.forward_main_recorded(x).unwrap();
        let (lm, g) = cross_entropy(&logits, y).unwrap();
        if backward {
            model.backward_main(tape, g).unwrap();
        }
        model.set_bn_mode(BnMode::Watermark);
        let (out, tape) = t.forward_watermark_recorded(model, v).unwrap();
        let (lc, g) = contrastive_loss(&out, labels, wm, 0.3, 0.5, cfg).unwrap();
        if backward {
            t.backward(model, tape, g).unwrap();
        }
        joint_loss(lm, lc, 1.0)
    }

    /// Analytic joint-loss gradient against central differences with step
    /// `h`. Returns (worst per-coordinate relative error, norm-wise error).
    fn gradient_errors(kinked: bool, h: f32) -> (f64, f64) {
        let mut model = build_model(&micro_arch(kinked), 4).unwrap();
        assert!(model.params().count() <= 500);
        model.set_training(false);
        // non-trivial watermark-mode moments
        let stats: Vec<Moments> = model
            .bn_state()
            .channels()
            .iter()
            .map(|&c| Moments {
                mean: (0..c).map(|i| 0.1 * i as f32 - 0.05).collect(),
                var: (0..c).map(|i| 0.5 + 0.3 * i as f32).collect(),
            })
            .collect();
        model.bn_state_mut().install(BnMode::Watermark, &stats).unwrap();
        let t = build_transposed(&model).unwrap();
        let ds = crate::data::synthetic(
            &crate::data::SyntheticSpec {
                shape: InputShape::new(6, 6, 1),
                classes: 3,
                blobs_per_class: 1,
                prototype_seed: 1,
                jitter: 0.5,
                noise: 0.05,
            },
            4,
            2,
        )
        .unwrap();
        let (x, y) = ds.batch(&[0, 1, 2, 3]);
        let key = generate_extraction_vector(5, 3).unwrap();
        let rows = vec![
            key.values.clone(),
            key.values.iter().map(|v| v * 1.1).collect(),
            key.values.iter().map(|v| -v).collect(),
            vec![key.values[1], key.values[2], key.values[0]],
        ];
        let v = Tensor::from_rows(&rows).unwrap();
        let labels = [Label::Positive, Label::Positive, Label::Negative, Label::Negative];
        let mut wmv = vec![0.0f32; 36];
        for (i, p) in wmv.iter_mut().enumerate() {
            *p = if (i / 6 + i % 6) % 3 == 0 { 0.9 } else { 0.2 };
        }
        let wm = wm_of(wmv, 6, 6);
        let cfg = SsimConfig::uniform(3, 1.0);
        joint_at(&mut model, &t, &x, &y, &v, &labels, &wm, &cfg, true);
        let analytic = model.params().flatten_grad();
        let base = model.flat_params();
        let gmax = analytic.iter().fold(0.0f32, |m, g| m.max(g.abs())) as f64;
        let (mut worst, mut diff2, mut norm2) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            model.load_flat_params(&p).unwrap();
            let up = joint_at(&mut model, &t, &x, &y, &v, &labels, &wm, &cfg, false);
            p[i] -= 2.0 * h;
            model.load_flat_params(&p).unwrap();
            let dn = joint_at(&mut model, &t, &x, &y, &v, &labels, &wm, &cfg, false);
            let fd = (up - dn) / (2.0 * h as f64);
            let an = analytic[i] as f64;
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-2 * gmax));
            diff2 += (fd - an).powi(2);
            norm2 += fd * fd;
        }
        (worst, (diff2 / norm2).sqrt())
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        // f32 rounding dominates below this step; the error grows as 1/h
        let (worst, _) = gradient_errors(false, 1e-2);
        assert!(worst < 1e-3, "worst per-coordinate relative error {worst}");
    }

    #[test]
    fn joint_gradient_through_relu_and_pooling() {
        // kinks make per-coordinate differences step-size dependent; the
        // norm-wise error still has to vanish as the step shrinks
        let (_, normwise) = gradient_errors(true, 3e-4);
        assert!(normwise < 1e-3, "norm-wise relative error {normwise}");
    }

    fn tiny_client(model: &ModelGraph, shard: Vec<usize>) -> ClientState {
        let key = generate_extraction_vector(11, model.num_classes()).unwrap();
        let sigma = crate::watermark::calibrate_sigma(&key, 0.95, 3).unwrap();
        ClientState {
            id: 0,
            shard,
            watermark: glyph_watermark(0, model.input_shape()),
            wm_bn: model.bn_state().snapshot(BnMode::Watermark),
            vector: key,
            sigma,
            seed: 9,
        }
    }

    fn tiny_setup() -> (ModelGraph, TransposedModel, Dataset) {
        let spec = crate::data::SyntheticSpec::gray28(1);
        let ds = crate::data::synthetic(&spec, 64, 1).unwrap();
        let model = build_model(&ArchConfig::tiny_vgg(spec.shape, 10), 1).unwrap();
        let t = build_transposed(&model).unwrap();
        (model, t, ds)
    }

    #[test]
    fn local_round_is_deterministic_and_keeps_bn_custody() {
        let (model, t, ds) = tiny_setup();
        let global = GlobalModel::from_model(&model);
        let cfg = TrainConfig {
            local_epochs: 1,
            main_batch: 16,
            num_vectors: 8,
            wm_batch: 4,
            ..TrainConfig::default()
        };
        let mut c1 = tiny_client(&model, (0..32).collect());
        let mut c2 = c1.clone();
        let fresh = c1.wm_bn.clone();
        let (mut m1, mut m2) = (model.clone(), model.clone());
        let u1 = local_round(&mut m1, &t, &mut c1, &ds, &global, 0, &cfg, LocalCorrection::None).unwrap();
        let u2 = local_round(&mut m2, &t, &mut c2, &ds, &global, 0, &cfg, LocalCorrection::None).unwrap();
        assert_eq!(u1.params, u2.params);
        assert_eq!(c1.wm_bn, c2.wm_bn);
        assert_ne!(c1.wm_bn, fresh, "watermark moments were exercised");
        assert_eq!(u1.params.len(), model.params().count());
        assert_eq!(u1.samples, 32);
        assert_eq!(u1.metrics.steps, 2);
        assert_ne!(u1.main_bn, global.main_bn);
    }

    #[test]
    fn watermark_free_round_equals_plain_sgd() {
        let (model, t, ds) = tiny_setup();
        let global = GlobalModel::from_model(&model);
        let cfg = TrainConfig {
            local_epochs: 1,
            main_batch: 16,
            ..TrainConfig::default()
        }
        .without_watermark();
        let mut client = tiny_client(&model, (0..16).collect());
        let mut m = model.clone();
        let u = local_round(&mut m, &t, &mut client, &ds, &global, 0, &cfg, LocalCorrection::None).unwrap();
        // one step by hand: shuffled single batch covers the whole shard
        let mut plain = model.clone();
        plain.set_training(true);
        plain.params_mut().zero_grad();
        let mut idx: Vec<usize> = (0..16).collect();
        idx.shuffle(&mut rng_for(cfg.seed ^ client.seed, "shuffle", 0, 0));
        let (x, y) = ds.batch(&idx);
        let (logits, tape) = plain.forward_main_recorded(&x).unwrap();
        let (_, g) = cross_entropy(&logits, &y).unwrap();
        plain.backward_main(tape, g).unwrap();
        Sgd::new(cfg.lr, cfg.momentum).step(plain.params_mut());
        assert_eq!(u.params, plain.flat_params());
        assert_eq!(client.wm_bn, model.bn_state().snapshot(BnMode::Watermark));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = TrainConfig {
            y_w: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            local_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
