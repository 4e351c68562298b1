//! Attacks on saved global checkpoints: pruning, fine-tuning, quantization,
//! overwriting and forgery of an extraction vector.
//!
//! Attacks see checkpoints only. Scoring against a client's key happens in
//! [`evaluate`] and [`score_forgeries`], which the caller invokes with the
//! verifier's material.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{asr, SsimConfig};
use crate::model::{BnMode, Moments, ParamRole};
use crate::par::{map_range, Execution};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;
use crate::training::{
    accuracy, cross_entropy, local_round, local_ssim, watermark_backward, watermark_pool, ClientState, GlobalModel,
    LocalCorrection, Sgd, TrainConfig,
};
use crate::transpose::build_transposed;
use crate::verify::{reconstruct, WatermarkKey};
use crate::watermark::{
    augment_vectors, calibrate_sigma, generate_extraction_vector, ExtractionVector, Provenance, WatermarkImage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub rounds: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            rounds: 15,
            lr: 0.001,
            momentum: 0.9,
            batch: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverwriteConfig {
    pub rounds: usize,
    /// Train jointly with the main task on the attacker's data; otherwise
    /// run `steps_per_round` watermark-only steps per round.
    pub with_main_task: bool,
    pub steps_per_round: usize,
    pub train: TrainConfig,
}

impl Default for OverwriteConfig {
    fn default() -> Self {
        OverwriteConfig {
            rounds: 50,
            with_main_task: true,
            steps_per_round: 32,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgeMode {
    /// Optimize toward the genuine watermark (partial knowledge of it).
    Targeted,
    /// Optimize toward a fresh random image.
    Untargeted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub mode: ForgeMode,
    pub steps: usize,
    pub attempts: usize,
    pub lr: f32,
    pub taus: Vec<f64>,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            mode: ForgeMode::Targeted,
            steps: 500,
            attempts: 50,
            lr: 0.05,
            taus: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackKind {
    Prune { ratio: f64 },
    Finetune(FinetuneConfig),
    Quantize { bits: u32 },
    Overwrite(OverwriteConfig),
    Forge(ForgeConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub kind: AttackKind,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            AttackKind::Prune { ratio } if !(0.0..1.0).contains(ratio) => {
                Err(Error::invalid(format!("prune ratio must lie in [0, 1), got {ratio}")))
            }
            AttackKind::Quantize { bits } if ![2, 4, 8, 16].contains(bits) => {
                Err(Error::invalid(format!("quantization bits must be 2, 4, 8 or 16, got {bits}")))
            }
            AttackKind::Finetune(f) if f.batch == 0 || f.lr.is_nan() || f.lr < 0.0 => {
                Err(Error::invalid("fine-tuning needs batch >= 1 and lr >= 0"))
            }
            AttackKind::Overwrite(o) => o.train.validate(),
            AttackKind::Forge(f) if f.attempts == 0 => Err(Error::invalid("forgery needs at least one attempt")),
            AttackKind::Forge(f) if f.taus.iter().any(|t| !t.is_finite()) => {
                Err(Error::invalid("forgery thresholds must be finite"))
            }
            _ => Ok(()),
        }
    }
}

fn weight_ranges(ckpt: &Checkpoint) -> Result<Vec<std::ops::Range<usize>>> {
    let model = ckpt.to_model()?;
    Ok(model
        .params()
        .layout()
        .into_iter()
        .filter(|(_, role, _)| *role == ParamRole::Weight)
        .map(|(_, _, r)| r)
        .collect())
}

/// Zero the `ratio` fraction of smallest-magnitude entries across all
/// slices jointly. Ties are broken by position, so exactly
/// `floor(ratio * n)` entries are zeroed.
pub fn prune_weights(tensors: &mut [&mut [f32]], ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("prune ratio must lie in [0, 1), got {ratio}")));
    }
    let mut all: Vec<(f32, usize, usize)> = Vec::new();
    for (t, w) in tensors.iter().enumerate() {
        all.extend(w.iter().enumerate().map(|(i, v)| (v.abs(), t, i)));
    }
    let k = (ratio * all.len() as f64).floor() as usize;
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, t, i) in &all[..k] {
        tensors[t][i] = 0.0;
    }
    Ok(())
}

/// Global unstructured magnitude pruning of conv and linear weights.
/// Biases and BN parameters are left alone.
pub fn prune(ckpt: &Checkpoint, ratio: f64) -> Result<Checkpoint> {
    let ranges = weight_ranges(ckpt)?;
    let mut out = ckpt.clone();
    let mut rest: &mut [f32] = &mut out.params;
    let mut offset = 0;
    let mut slices = Vec::with_capacity(ranges.len());
    for r in &ranges {
        let (_, tail) = std::mem::take(&mut rest).split_at_mut(r.start - offset);
        let (mine, tail) = tail.split_at_mut(r.len());
        slices.push(mine);
        rest = tail;
        offset = r.end;
    }
    prune_weights(&mut slices, ratio)?;
    Ok(out)
}

/// Symmetric per-tensor quantize-dequantize onto `2^(bits-1) - 1` levels
/// each side of zero.
pub fn quantize_tensor(w: &mut [f32], bits: u32) -> Result<()> {
    if ![2, 4, 8, 16].contains(&bits) {
        return Err(Error::invalid(format!("quantization bits must be 2, 4, 8 or 16, got {bits}")));
    }
    let max = w.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
    if max == 0.0 {
        return Ok(());
    }
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    for v in w.iter_mut() {
        let q = (*v as f64 / max * levels).round().clamp(-levels, levels);
        *v = (q / levels * max) as f32;
    }
    Ok(())
}

pub fn quantize(ckpt: &Checkpoint, bits: u32) -> Result<Checkpoint> {
    let ranges = weight_ranges(ckpt)?;
    let mut out = ckpt.clone();
    for r in ranges {
        quantize_tensor(&mut out.params[r], bits)?;
    }
    Ok(out)
}

/// Main-task-only SGD on the attacker's data; one round is one pass.
pub fn finetune(ckpt: &Checkpoint, data: &Dataset, cfg: &FinetuneConfig, seed: u64) -> Result<Checkpoint> {
    let mut model = ckpt.to_model()?;
    if cfg.rounds == 0 {
        return Ok(ckpt.clone());
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    model.set_training(true);
    model.set_bn_mode(BnMode::Main);
    model.reseed_dropout(derive_seed(seed, "finetune-dropout", 0, 0));
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for round in 0..cfg.rounds {
        order.shuffle(&mut rng_for(seed, "finetune", round as u64, 0));
        for chunk in order.chunks(cfg.batch) {
            model.params_mut().zero_grad();
            let (x, y) = data.batch(chunk);
            let (logits, tape) = model.forward_main_recorded(&x)?;
            let (loss, g) = cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    round,
                    client: usize::MAX,
                    detail: format!("fine-tuning loss {loss}"),
                });
            }
            model.backward_main(tape, g)?;
            opt.step(model.params_mut());
        }
    }
    Ok(Checkpoint::from_model(&model, ckpt.round))
}

#[derive(Debug, Clone)]
pub struct OverwriteOutcome {
    pub checkpoint: Checkpoint,
    /// The adversary's own key material, usable like a client's.
    pub attacker: ClientState,
    /// Attacker SSIM on its own watermark after each round.
    pub ssim_trace: Vec<f64>,
}

/// Re-run the watermarking procedure with a fresh key vector, fresh
/// watermark moments and the attacker's own image.
pub fn overwrite(
    ckpt: &Checkpoint,
    data: Option<&Dataset>,
    attacker_wm: &WatermarkImage,
    cfg: &OverwriteConfig,
    seed: u64,
) -> Result<OverwriteOutcome> {
    let mut model = ckpt.to_model()?;
    let t = build_transposed(&model)?;
    if attacker_wm.shape != model.input_shape() {
        return Err(Error::shape("attacker watermark does not match the model input"));
    }
    let vector = generate_extraction_vector(derive_seed(seed, "attacker-vector", 0, 0), model.num_classes())?;
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    tcfg.validate()?;
    let main_data = if cfg.with_main_task {
        Some(data.ok_or_else(|| Error::invalid("overwriting with the main task needs attacker data"))?)
    } else {
        None
    };
    let mut attacker = ClientState {
        id: 0,
        shard: main_data.map(|d| (0..d.len()).collect()).unwrap_or_default(),
        sigma: calibrate_sigma(&vector, tcfg.delta, derive_seed(seed, "attacker-sigma", 0, 0))?,
        vector,
        watermark: attacker_wm.clone(),
        wm_bn: model.bn_state().channels().into_iter().map(Moments::fresh).collect(),
        seed: derive_seed(seed, "attacker", 0, 0),
    };
    let mut global = GlobalModel::from_model(&model);
    let mut trace = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        match main_data {
            Some(d) => {
                let u = local_round(&mut model, &t, &mut attacker, d, &global, round, &tcfg, LocalCorrection::None)?;
                global = GlobalModel {
                    params: u.params,
                    main_bn: u.main_bn,
                };
            }
            None => {
                global.load_into(&mut model)?;
                model.bn_state_mut().install(BnMode::Watermark, &attacker.wm_bn)?;
                model.set_training(true);
                let mut rng = rng_for(seed, "attacker-augment", round as u64, 0);
                let set = augment_vectors(&attacker.vector, tcfg.num_vectors, attacker.sigma, tcfg.delta, &mut rng)?;
                let pool = watermark_pool(&set, &tcfg);
                let mut opt = Sgd::new(tcfg.lr, tcfg.momentum);
                let mut cursor = 0;
                for _ in 0..cfg.steps_per_round {
                    model.params_mut().zero_grad();
                    watermark_backward(&mut model, &t, &attacker, &pool, &mut cursor, &tcfg)?;
                    opt.step(model.params_mut());
                }
                attacker.wm_bn = model.bn_state().snapshot(BnMode::Watermark);
                global = GlobalModel::from_model(&model);
            }
        }
        global.load_into(&mut model)?;
        model.bn_state_mut().install(BnMode::Watermark, &attacker.wm_bn)?;
        trace.push(local_ssim(&mut model, &t, &attacker, &tcfg.ssim)?);
    }
    global.load_into(&mut model)?;
    Ok(OverwriteOutcome {
        checkpoint: Checkpoint::from_model(&model, ckpt.round),
        attacker,
        ssim_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgedVector {
    pub attempt: usize,
    pub vector: Vec<f32>,
    /// Surrogate-model objective at the last step.
    pub loss: f64,
}

fn random_image(like: crate::model::InputShape, rng: &mut ChaCha8Rng) -> Result<WatermarkImage> {
    let data = (0..like.len()).map(|_| rng.random::<f32>()).collect();
    Ok(WatermarkImage::new(like, data, Provenance::Raw)?.quantized())
}

/// Optimize `attempts` independent vectors with Adam on
/// `mean((T(v) - wm)^2)` through a surrogate transposed model whose
/// watermark moments are zero mean, unit variance. `target` is the
/// (partially known) genuine watermark and is only used when targeted.
pub fn forge(
    ckpt: &Checkpoint,
    target: Option<&WatermarkImage>,
    cfg: &ForgeConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<ForgedVector>> {
    if cfg.attempts == 0 {
        return Err(Error::invalid("forgery needs at least one attempt"));
    }
    let mut surrogate = ckpt.to_model()?;
    surrogate.bn_state_mut().reset(BnMode::Watermark);
    surrogate.set_bn_mode(BnMode::Watermark);
    surrogate.set_training(false);
    let shape = surrogate.input_shape();
    if cfg.mode == ForgeMode::Targeted {
        let wm = target.ok_or_else(|| Error::invalid("a targeted forgery needs the target watermark"))?;
        if wm.shape != shape {
            return Err(Error::shape("target watermark does not match the model input"));
        }
    }
    let t = build_transposed(&surrogate)?;
    let results = map_range(exec, cfg.attempts, |attempt| -> Result<ForgedVector> {
        let mut model = surrogate.clone();
        let mut rng = rng_for(seed, "forge", 0, attempt as u64);
        let goal = match cfg.mode {
            ForgeMode::Targeted => target.expect("checked above").clone(),
            ForgeMode::Untargeted => random_image(shape, &mut rng)?,
        };
        let mut v = generate_extraction_vector(rng.random(), t.input_dim())?.values;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let mut m = vec![0.0f64; v.len()];
        let mut s = vec![0.0f64; v.len()];
        let n = goal.data.len() as f32;
        let mut loss = 0.0;
        for step in 1..=cfg.steps {
            let x = Tensor::from_rows(std::slice::from_ref(&v))?;
            let (out, tape) = t.forward_watermark_recorded(&mut model, &x)?;
            let mut g = Tensor::zeros(out.shape());
            loss = 0.0;
            for ((d, o), w) in g.data_mut().iter_mut().zip(out.data()).zip(&goal.data) {
                let r = o - w;
                loss += (r * r) as f64;
                *d = 2.0 * r / n;
            }
            loss /= n as f64;
            let gv = t.input_gradient(&mut model, tape, g)?;
            let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
            for (i, gi) in gv.data().iter().enumerate() {
                let gi = *gi as f64;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                s[i] = b2 * s[i] + (1.0 - b2) * gi * gi;
                v[i] -= (cfg.lr as f64 * (m[i] / c1) / ((s[i] / c2).sqrt() + eps)) as f32;
            }
        }
        Ok(ForgedVector { attempt, vector: v, loss })
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrEntry {
    pub tau: f64,
    /// Percent of attempts with SSIM ≥ τ.
    pub asr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeryReport {
    pub mode: ForgeMode,
    /// Verifier-side SSIM of each forged vector against the genuine mark.
    pub ssims: Vec<f64>,
    pub asr: Vec<AsrEntry>,
}

/// Score forged vectors the way a verifier would: the genuine client's
/// watermark moments installed, output clamped and quantized.
pub fn score_forgeries(
    ckpt: &Checkpoint,
    key: &WatermarkKey,
    genuine: &WatermarkImage,
    forged: &[ForgedVector],
    mode: ForgeMode,
    taus: &[f64],
) -> Result<ForgeryReport> {
    let model = ckpt.to_model()?;
    key.check_compatible(&model)?;
    let cfg = SsimConfig::default();
    let ssims = forged
        .iter()
        .map(|f| {
            let v = ExtractionVector {
                values: f.vector.clone(),
                seed: 0,
            };
            reconstruct(&model, &v, &key.wm_bn, genuine, &cfg).map(|r| r.ssim)
        })
        .collect::<Result<Vec<_>>>()?;
    let asr = taus
        .iter()
        .map(|&tau| Ok(AsrEntry { tau, asr: asr(&ssims, tau)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForgeryReport { mode, ssims, asr })
}

/// Main-task accuracy on `test` and, given a key and its image, the
/// verification SSIM.
pub fn evaluate(
    ckpt: &Checkpoint,
    test: &Dataset,
    key: Option<(&WatermarkKey, &WatermarkImage)>,
) -> Result<(f64, Option<f64>)> {
    let mut model = ckpt.to_model()?;
    let acc = accuracy(&mut model, test)?;
    let ssim = match key {
        Some((k, wm)) => {
            k.check_compatible(&model)?;
            Some(reconstruct(&model, &k.vector, &k.wm_bn, wm, &SsimConfig::default())?.ssim)
        }
        None => None,
    };
    Ok((acc, ssim))
}

/// JSON record written next to every attacked checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub attack: AttackConfig,
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
    pub ssim_before: Option<f64>,
    pub ssim_after: Option<f64>,
    pub forgery: Option<ForgeryReport>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchConfig, InputShape};
    use crate::watermark::glyph_watermark;
    use proptest::prelude::*;

    fn ckpt() -> Checkpoint {
        let m = build_model(&ArchConfig::tiny_vgg(InputShape::new(28, 28, 1), 10), 5).unwrap();
        Checkpoint::from_model(&m, 3)
    }

    fn data(n: usize) -> Dataset {
        crate::data::synthetic(&crate::data::SyntheticSpec::gray28(2), n, 4).unwrap()
    }

    #[test]
    fn prune_zeroes_the_smallest_magnitudes() {
        let mut w = [0.5f32, -0.1, 0.9, 0.05, -0.7, 0.3, -0.02, 0.8, -0.4, 0.6];
        prune_weights(&mut [&mut w[..]], 0.5).unwrap();
        assert_eq!(w, [0.5, 0.0, 0.9, 0.0, -0.7, 0.0, 0.0, 0.8, 0.0, 0.6]);
        let mut w = [1.0f32, 2.0];
        prune_weights(&mut [&mut w[..]], 0.0).unwrap();
        assert_eq!(w, [1.0, 2.0]);
        assert!(prune_weights(&mut [&mut w[..]], 1.0).is_err());
    }

    #[test]
    fn prune_touches_only_weights() {
        let c = ckpt();
        let p = prune(&c, 0.6).unwrap();
        let model = c.to_model().unwrap();
        let mut zeroed = 0;
        let mut total = 0;
        for (_, role, r) in model.params().layout() {
            if role == ParamRole::Weight {
                total += r.len();
                zeroed += p.params[r].iter().filter(|v| **v == 0.0).count();
            } else {
                assert_eq!(p.params[r.clone()], c.params[r]);
            }
        }
        assert_eq!(zeroed, (0.6 * total as f64).floor() as usize);
        assert_eq!(p.main_bn, c.main_bn);
        assert_eq!(prune(&c, 0.0).unwrap(), c);
    }

    #[test]
    fn quantize_examples() {
        let mut w: Vec<f32> = (0..200).map(|i| ((i as f32) * 0.37).sin() * 0.8).collect();
        let orig = w.clone();
        quantize_tensor(&mut w, 16).unwrap();
        let max = orig.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let worst = w.iter().zip(&orig).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst <= max / 32767.0, "{worst}");

        let mut c = vec![0.3f32; 7];
        quantize_tensor(&mut c, 4).unwrap();
        assert_eq!(c, vec![0.3f32; 7]);

        let mut w2 = orig.clone();
        quantize_tensor(&mut w2, 2).unwrap();
        let mut distinct: Vec<u32> = w2.iter().map(|v| v.to_bits()).collect();
        distinct.sort();
        distinct.dedup();
        assert!(distinct.len() <= 4);
        assert!(quantize_tensor(&mut w2, 3).is_err());
    }

    #[test]
    fn quantize_leaves_biases_and_bn() {
        let c = ckpt();
        let q = quantize(&c, 8).unwrap();
        for (_, role, r) in c.to_model().unwrap().params().layout() {
            if role != ParamRole::Weight {
                assert_eq!(q.params[r.clone()], c.params[r]);
            }
        }
        assert_ne!(q.params, c.params);
    }

    #[test]
    fn finetune_is_deterministic_and_trivial_at_zero_rounds() {
        let c = ckpt();
        let d = data(40);
        let zero = FinetuneConfig {
            rounds: 0,
            ..Default::default()
        };
        assert_eq!(finetune(&c, &d, &zero, 1).unwrap(), c);
        let two = FinetuneConfig {
            rounds: 2,
            ..Default::default()
        };
        let a = finetune(&c, &d, &two, 1).unwrap();
        assert_eq!(a, finetune(&c, &d, &two, 1).unwrap());
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn overwrite_raises_the_attackers_own_ssim() {
        let c = ckpt();
        let wm = glyph_watermark(11, InputShape::new(28, 28, 1));
        let none = OverwriteConfig {
            rounds: 0,
            with_main_task: false,
            ..Default::default()
        };
        assert_eq!(overwrite(&c, None, &wm, &none, 3).unwrap().checkpoint, c);
        let cfg = OverwriteConfig {
            rounds: 4,
            with_main_task: false,
            steps_per_round: 40,
            ..Default::default()
        };
        let out = overwrite(&c, None, &wm, &cfg, 3).unwrap();
        let trace = &out.ssim_trace;
        assert_eq!(trace.len(), 4);
        assert!(trace[3] > trace[0] + 0.05, "{trace:?}");
        assert!(out.attacker.wm_bn.iter().any(|m| m.mean.iter().any(|v| *v != 0.0)));
        assert_eq!(out.checkpoint.main_bn, c.main_bn);
    }

    #[test]
    fn overwrite_with_main_task_needs_data() {
        let wm = glyph_watermark(11, InputShape::new(28, 28, 1));
        let cfg = OverwriteConfig {
            rounds: 1,
            ..Default::default()
        };
        assert!(overwrite(&ckpt(), None, &wm, &cfg, 0).is_err());
    }

    #[test]
    fn forge_is_deterministic_and_reduces_its_objective() {
        let c = ckpt();
        let wm = glyph_watermark(0, InputShape::new(28, 28, 1));
        let short = ForgeConfig {
            steps: 1,
            attempts: 3,
            ..Default::default()
        };
        let long = ForgeConfig {
            steps: 60,
            ..short.clone()
        };
        let a = forge(&c, Some(&wm), &long, 2, Execution::Sequential).unwrap();
        let b = forge(&c, Some(&wm), &long, 2, Execution::default()).unwrap();
        assert_eq!(a, b);
        let first = forge(&c, Some(&wm), &short, 2, Execution::Sequential).unwrap();
        for (x, y) in a.iter().zip(&first) {
            assert!(x.loss < y.loss, "{} vs {}", x.loss, y.loss);
        }
        assert!(forge(&c, None, &long, 2, Execution::Sequential).is_err());
        let un = ForgeConfig {
            mode: ForgeMode::Untargeted,
            ..short
        };
        assert_eq!(forge(&c, None, &un, 2, Execution::Sequential).unwrap().len(), 3);
    }

    #[test]
    fn config_validation() {
        let bad = [
            AttackKind::Prune { ratio: 1.0 },
            AttackKind::Quantize { bits: 3 },
            AttackKind::Forge(ForgeConfig {
                attempts: 0,
                ..Default::default()
            }),
        ];
        for kind in bad {
            assert!(AttackConfig { seed: 0, kind }.validate().is_err());
        }
        let ok = AttackConfig {
            seed: 1,
            kind: AttackKind::Quantize { bits: 8 },
        };
        ok.validate().unwrap();
        let json = serde_json::to_string(&ok).unwrap();
        assert_eq!(json, r#"{"seed":1,"kind":"quantize","bits":8}"#);
        assert_eq!(serde_json::from_str::<AttackConfig>(&json).unwrap(), ok);
    }

    proptest! {
        #[test]
        fn pruned_nonzero_fraction(w in proptest::collection::vec(-1.0f32..1.0, 1..300), ratio in 0.0f64..0.99) {
            let mut w = w;
            let n = w.len();
            let nonzero_before = w.iter().filter(|v| **v != 0.0).count();
            prune_weights(&mut [&mut w[..]], ratio).unwrap();
            let k = (ratio * n as f64).floor() as usize;
            let nonzero = w.iter().filter(|v| **v != 0.0).count();
            prop_assert!(nonzero <= n - k);
            prop_assert!(nonzero + k >= nonzero_before);
        }

        #[test]
        fn quantization_error_is_half_a_step(w in proptest::collection::vec(-5.0f32..5.0, 1..200), b in 0usize..4) {
            let bits = [2u32, 4, 8, 16][b];
            let mut q = w.clone();
            quantize_tensor(&mut q, bits).unwrap();
            let max = w.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
            let step = max / ((1u64 << (bits - 1)) - 1) as f64;
            for (a, o) in q.iter().zip(&w) {
                prop_assert!(((a - o).abs() as f64) <= step / 2.0 + 1e-6 * max.max(1.0));
            }
        }
    }
}
