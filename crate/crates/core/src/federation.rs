//! Federated orchestration: Dirichlet non-IID partitioning, the five
//! aggregation schemes, and the round loop that trains, aggregates and
//! broadcasts.
//!
//! Rounds are sequential barriers. Within a round clients train
//! concurrently, each on its own copy of the global model; aggregation
//! runs single-threaded over the collected uploads.

use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::SsimConfig;
use crate::model::{build_model, flatten_moments, unflatten_moments, ArchConfig, BnMode, ModelGraph, Moments};
use crate::par::{map_mut, Execution};
use crate::rng::{derive_seed, rng_for};
use crate::training::{accuracy, local_round, ClientState, GlobalModel, LocalCorrection, LocalUpdate, TrainConfig};
use crate::transpose::build_transposed;
use crate::verify::{reconstruct, WatermarkKey};
use crate::watermark::{
    calibrate_sigma, dotcode_encode, generate_extraction_vector, glyph_watermark, load_watermark,
};

/// Split sample indices over `n` clients: for every class a
/// Dirichlet(alpha, ..., alpha) draw sets each client's share.
///
/// Draws that leave a client empty are repeated (up to a cap); any client
/// still empty then takes one sample from the largest shard.
pub fn dirichlet_partition(labels: &[usize], n: usize, alpha: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 clients, got {n}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if labels.len() < n {
        return Err(Error::invalid(format!("{} samples cannot cover {n} clients", labels.len())));
    }
    const MAX_REDRAWS: usize = 100;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = rng_for(seed, "dirichlet", 0, 0);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut shards = Vec::new();
    for attempt in 0..=MAX_REDRAWS {
        shards = vec![Vec::new(); n];
        for idx in &by_class {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = p.iter().sum();
            if total > 0.0 {
                p.iter_mut().for_each(|v| *v /= total);
            } else {
                // all-underflow draw at tiny alpha: one client takes the class
                let k = rng.random_range(0..n);
                p = (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
            }
            let mut start = 0;
            let mut acc = 0.0;
            for (c, share) in p.iter().enumerate() {
                acc += share;
                let end = if c + 1 == n {
                    idx.len()
                } else {
                    ((acc * idx.len() as f64).round() as usize).min(idx.len())
                };
                shards[c].extend_from_slice(&idx[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if shards.iter().all(|s| !s.is_empty()) || attempt == MAX_REDRAWS {
            break;
        }
    }
    for c in 0..n {
        if shards[c].is_empty() {
            let donor = (0..n).max_by_key(|&i| shards[i].len()).expect("n >= 2");
            let moved = shards[donor].pop().expect("donor has samples");
            shards[c].push(moved);
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Aggregation weights `p_i = |D_i| / |D|`.
pub fn client_weights(samples: &[usize]) -> Result<Vec<f64>> {
    let total: usize = samples.iter().sum();
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(samples.iter().map(|&s| s as f64 / total as f64).collect())
}

fn check_updates(updates: &[(&[f32], usize)]) -> Result<usize> {
    let first = updates.first().ok_or(Error::EmptyBatch)?;
    let len = first.0.len();
    if let Some(bad) = updates.iter().find(|u| u.0.len() != len) {
        return Err(Error::shape(format!("update of length {} among updates of length {len}", bad.0.len())));
    }
    Ok(len)
}

/// Sample-weighted mean of client parameter vectors.
pub fn aggregate_fedavg(updates: &[(&[f32], usize)]) -> Result<Vec<f32>> {
    let len = check_updates(updates)?;
    let w = client_weights(&updates.iter().map(|u| u.1).collect::<Vec<_>>())?;
    let mut acc = vec![0.0f64; len];
    for ((params, _), p) in updates.iter().zip(&w) {
        for (a, v) in acc.iter_mut().zip(params.iter()) {
            *a += p * *v as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// `(mu / 2) * ||local - global_ref||^2`.
pub fn proximal_term(local: &[f32], global_ref: &[f32], mu: f32) -> f64 {
    let sq: f64 = local.iter().zip(global_ref).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    0.5 * mu as f64 * sq
}

/// Gradient of [`proximal_term`] with respect to `local`.
pub fn proximal_grad(local: &[f32], global_ref: &[f32], mu: f32) -> Vec<f32> {
    local.iter().zip(global_ref).map(|(a, b)| mu * (a - b)).collect()
}

/// Uniform quantize-dequantize of `x` to `levels` values spanning its
/// own [min, max].
pub fn quantize_uniform(x: &[f32], levels: u64) -> Vec<f32> {
    let (lo, hi) = x.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if x.is_empty() || hi <= lo || levels < 2 {
        return x.to_vec();
    }
    let (lo64, hi64) = (lo as f64, hi as f64);
    let step = (hi64 - lo64) / (levels - 1) as f64;
    x.iter()
        .map(|&v| {
            let k = ((v as f64 - lo64) / step).round();
            (lo64 + k * step).clamp(lo64, hi64) as f32
        })
        .collect()
}

/// FedPAQ: every client's delta from `global` is quantized per tensor to
/// `levels` levels, the deltas are sample-weighted and added back.
pub fn aggregate_fedpaq(
    global: &[f32],
    updates: &[(&[f32], usize)],
    levels: u64,
    layout: &[Range<usize>],
) -> Result<Vec<f32>> {
    let len = check_updates(updates)?;
    if len != global.len() {
        return Err(Error::shape(format!("updates have {len} entries, global has {}", global.len())));
    }
    let w = client_weights(&updates.iter().map(|u| u.1).collect::<Vec<_>>())?;
    let mut acc: Vec<f64> = global.iter().map(|&v| v as f64).collect();
    for ((params, _), p) in updates.iter().zip(&w) {
        let delta: Vec<f32> = params.iter().zip(global).map(|(a, b)| a - b).collect();
        for r in layout {
            let q = quantize_uniform(&delta[r.clone()], levels);
            for (a, d) in acc[r.clone()].iter_mut().zip(q) {
                *a += p * d as f64;
            }
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Server-side Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// FedADAM: the weighted mean delta is a pseudo-gradient for one Adam step
/// `x += lr * m / (sqrt(v) + tau)` (no bias correction).
pub fn aggregate_fedadam(
    global: &[f32],
    updates: &[(&[f32], usize)],
    state: &mut AdamState,
    lr: f32,
    beta1: f32,
    beta2: f32,
    tau: f32,
) -> Result<Vec<f32>> {
    let mean = aggregate_fedavg(updates)?;
    if mean.len() != global.len() || state.m.len() != global.len() {
        return Err(Error::shape("FedADAM state, updates and global model differ in length"));
    }
    let mut out = global.to_vec();
    for i in 0..global.len() {
        let d = mean[i] - global[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * d;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * d * d;
        out[i] += lr * state.m[i] / (state.v[i].sqrt() + tau);
    }
    Ok(out)
}

/// SCAFFOLD control variates: one server control and one per client.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldState {
    pub server: Vec<f32>,
    pub clients: Vec<Vec<f32>>,
}

impl ScaffoldState {
    pub fn zeros(len: usize, clients: usize) -> Self {
        ScaffoldState {
            server: vec![0.0; len],
            clients: vec![vec![0.0; len]; clients],
        }
    }
}

/// Client `i` after local training: its parameters, the number of local
/// steps it took and the effective step size of each.
pub struct ScaffoldUpload<'a> {
    pub params: &'a [f32],
    pub samples: usize,
    pub steps: usize,
    pub step_size: f32,
}

/// Apply SCAFFOLD's server step and option-II control update:
/// `c_i+ = c_i - c + (x - y_i) / (K_i * eta)`, `c += mean(c_i+ - c_i)`,
/// `x += server_lr * sum p_i (y_i - x)`.
pub fn scaffold_round(
    global: &[f32],
    uploads: &[ScaffoldUpload<'_>],
    state: &mut ScaffoldState,
    server_lr: f32,
) -> Result<Vec<f32>> {
    if uploads.len() != state.clients.len() {
        return Err(Error::shape(format!(
            "{} uploads for {} client controls",
            uploads.len(),
            state.clients.len()
        )));
    }
    let pairs: Vec<(&[f32], usize)> = uploads.iter().map(|u| (u.params, u.samples)).collect();
    let mean = aggregate_fedavg(&pairs)?;
    let n = uploads.len() as f32;
    let mut dc = vec![0.0f32; global.len()];
    for (u, ci) in uploads.iter().zip(&mut state.clients) {
        let k = (u.steps.max(1) as f32) * u.step_size;
        for j in 0..global.len() {
            let next = ci[j] - state.server[j] + (global[j] - u.params[j]) / k;
            dc[j] += (next - ci[j]) / n;
            ci[j] = next;
        }
    }
    state.server.iter_mut().zip(&dc).for_each(|(c, d)| *c += d);
    Ok(global.iter().zip(&mean).map(|(x, m)| x + server_lr * (m - x)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Scheme {
    FedAvg,
    FedProx {
        #[serde(default = "default_mu")]
        mu: f32,
    },
    FedPaq {
        #[serde(default = "default_levels")]
        levels: u64,
    },
    FedAdam {
        #[serde(default = "default_server_lr")]
        lr: f32,
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default = "default_tau")]
        tau: f32,
    },
    Scaffold {
        #[serde(default = "one")]
        server_lr: f32,
    },
}

fn default_mu() -> f32 {
    0.01
}
fn default_levels() -> u64 {
    256
}
fn default_server_lr() -> f32 {
    1e-2
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.99
}
fn default_tau() -> f32 {
    1e-3
}
fn one() -> f32 {
    1.0
}

impl Scheme {
    pub fn all_defaults() -> [Scheme; 5] {
        [
            Scheme::FedAvg,
            Scheme::FedProx { mu: default_mu() },
            Scheme::FedPaq {
                levels: default_levels(),
            },
            Scheme::FedAdam {
                lr: default_server_lr(),
                beta1: default_beta1(),
                beta2: default_beta2(),
                tau: default_tau(),
            },
            Scheme::Scaffold { server_lr: 1.0 },
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            Scheme::FedAvg => "fedavg",
            Scheme::FedProx { .. } => "fedprox",
            Scheme::FedPaq { .. } => "fedpaq",
            Scheme::FedAdam { .. } => "fedadam",
            Scheme::Scaffold { .. } => "scaffold",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Scheme::FedAvg => true,
            Scheme::FedProx { mu } => mu >= 0.0,
            Scheme::FedPaq { levels } => levels >= 2,
            Scheme::FedAdam { lr, beta1, beta2, tau } => {
                lr > 0.0 && tau > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)
            }
            Scheme::Scaffold { server_lr } => server_lr > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad {} hyperparameters: {self:?}", self.label())))
        }
    }
}

/// How each client's watermark image is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WatermarkSource {
    /// Block-letter marks, one per client index.
    Glyph,
    /// Dot-code images of `bits` random bits per client.
    DotCode { bits: usize },
    /// One image file per client, resized to the input dims.
    Files { paths: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    /// Dirichlet concentration of the non-IID split.
    pub alpha: f64,
    pub scheme: Scheme,
    pub train: TrainConfig,
    pub watermarks: WatermarkSource,
    /// Write a checkpoint and reconstructions every this many rounds (0 =
    /// final round only).
    pub checkpoint_every: usize,
    /// Evaluate test accuracy every this many rounds (the final round is
    /// always evaluated).
    pub eval_every: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            seed: 0,
            clients: 4,
            rounds: 50,
            alpha: 0.8,
            scheme: Scheme::FedAvg,
            train: TrainConfig::default(),
            watermarks: WatermarkSource::Glyph,
            checkpoint_every: 0,
            eval_every: 10,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub main_loss: f64,
    pub wm_loss: f64,
    /// SSIM of the client's own model right after local training.
    pub local_ssim: f64,
    /// SSIM of the aggregated global model with the client's key.
    pub global_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Test accuracy of the global model, when evaluated this round.
    pub accuracy: Option<f64>,
    pub clients: Vec<ClientRecord>,
}

pub struct FederationOutcome {
    pub global: ModelGraph,
    pub clients: Vec<ClientState>,
    pub history: Vec<RoundRecord>,
    pub final_accuracy: f64,
}

impl FederationOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.global, self.history.len())
    }

    pub fn final_ssims(&self) -> Vec<f64> {
        self.history
            .last()
            .map(|r| r.clients.iter().map(|c| c.global_ssim).collect())
            .unwrap_or_default()
    }
}

/// The random bit string client `client` embeds under
/// [`WatermarkSource::DotCode`].
pub fn dotcode_payload(seed: u64, client: usize, bits: usize) -> Vec<bool> {
    let mut rng = rng_for(seed, "dotcode", 0, client as u64);
    (0..bits).map(|_| rng.random()).collect()
}

/// Build every client's private state: shard, key vector, watermark image,
/// fresh watermark moments and calibrated augmentation noise.
pub fn make_clients(
    cfg: &FederationConfig,
    model: &ModelGraph,
    train: &Dataset,
) -> Result<Vec<ClientState>> {
    let shards = if cfg.clients == 1 {
        vec![(0..train.len()).collect()]
    } else {
        dirichlet_partition(&train.labels, cfg.clients, cfg.alpha, derive_seed(cfg.seed, "partition", 0, 0))?
    };
    let shape = model.input_shape();
    let fresh = model.bn_state().snapshot(BnMode::Watermark);
    shards
        .into_iter()
        .enumerate()
        .map(|(i, shard)| {
            let id = i as u64;
            let vector = generate_extraction_vector(derive_seed(cfg.seed, "vector", 0, id), model.num_classes())?;
            let watermark = match &cfg.watermarks {
                WatermarkSource::Glyph => glyph_watermark(i, shape),
                WatermarkSource::DotCode { bits } => {
                    dotcode_encode(&dotcode_payload(cfg.seed, i, *bits), shape.height, shape.width, shape.channels)?
                }
                WatermarkSource::Files { paths } => {
                    let p = paths.get(i).ok_or_else(|| {
                        Error::invalid(format!("{} watermark files for {} clients", paths.len(), cfg.clients))
                    })?;
                    load_watermark(p, shape)?
                }
            };
            let sigma = calibrate_sigma(&vector, cfg.train.delta, derive_seed(cfg.seed, "sigma", 0, id))?;
            Ok(ClientState {
                id: i,
                shard,
                vector,
                watermark,
                wm_bn: fresh.clone(),
                sigma,
                seed: derive_seed(cfg.seed, "client", 0, id),
            })
        })
        .collect()
}

fn mean_moments(updates: &[LocalUpdate], channels: &[usize]) -> Result<Vec<Moments>> {
    let flat: Vec<Vec<f32>> = updates.iter().map(|u| flatten_moments(&u.main_bn)).collect();
    let pairs: Vec<(&[f32], usize)> = flat.iter().zip(updates).map(|(f, u)| (f.as_slice(), u.samples)).collect();
    unflatten_moments(&aggregate_fedavg(&pairs)?, channels)
}

/// Per-round output sinks inside a run directory.
struct RunDir {
    root: PathBuf,
    metrics: fs::File,
}

impl RunDir {
    fn create(root: &Path, cfg: &FederationConfig) -> Result<Self> {
        for sub in ["checkpoints", "keys", "images"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let snap = root.join("config.json");
        fs::write(&snap, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&snap, e))?;
        let path = root.join("metrics.csv");
        let mut metrics = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(metrics, "round,client,acc,ssim,local_ssim,main_loss,wm_loss").map_err(|e| Error::io(&path, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            metrics,
        })
    }

    fn record(&mut self, r: &RoundRecord) -> Result<()> {
        let path = self.root.join("metrics.csv");
        for c in &r.clients {
            let acc = r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            writeln!(
                self.metrics,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.round, c.client, acc, c.global_ssim, c.local_ssim, c.main_loss, c.wm_loss
            )
            .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn snapshot(&self, global: &ModelGraph, clients: &[ClientState], round: usize) -> Result<()> {
        Checkpoint::from_model(global, round).save(&self.root.join(format!("checkpoints/round_{round}")))?;
        let cfg = SsimConfig::default();
        for c in clients {
            let rec = reconstruct(global, &c.vector, &c.wm_bn, &c.watermark, &cfg)?;
            crate::watermark::save_planar_png(
                &rec.image,
                c.watermark.dims(),
                &self.root.join(format!("images/round_{round}_client_{}.png", c.id)),
            )?;
        }
        Ok(())
    }

    fn keys(&self, clients: &[ClientState], round: usize) -> Result<()> {
        for c in clients {
            let img = format!("client_{}.png", c.id);
            c.watermark.save_png(&self.root.join("keys").join(&img))?;
            WatermarkKey::from_client(c, img.into(), round).save(&self.root.join(format!("keys/client_{}.key", c.id)))?;
        }
        Ok(())
    }
}

/// Run the whole federation. With `run_dir`, metrics, checkpoints, keys and
/// reconstructed images are written there.
pub fn run_federation(
    cfg: &FederationConfig,
    arch: &ArchConfig,
    train: &Dataset,
    test: &Dataset,
    run_dir: Option<&Path>,
) -> Result<FederationOutcome> {
    cfg.scheme.validate()?;
    cfg.train.validate()?;
    if cfg.clients == 0 || cfg.rounds == 0 {
        return Err(Error::invalid("clients and rounds must be >= 1"));
    }
    let tcfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let mut global = build_model(arch, derive_seed(cfg.seed, "init", 0, 0))?;
    let t = build_transposed(&global)?;
    let mut clients = make_clients(cfg, &global, train)?;
    let mut sink = run_dir.map(|d| RunDir::create(d, cfg)).transpose()?;
    let layout: Vec<Range<usize>> = global.params().layout().into_iter().map(|(_, _, r)| r).collect();
    let channels = global.bn_state().channels();
    let plen = global.params().count();
    let mut adam = AdamState::zeros(plen);
    let mut scaffold = ScaffoldState::zeros(plen, clients.len());
    let ssim_cfg = SsimConfig::default();
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut final_accuracy = 0.0;
    for round in 0..cfg.rounds {
        let snapshot = GlobalModel::from_model(&global);
        let template = &global;
        let (server_c, client_c) = (&scaffold.server, &scaffold.clients);
        let results = map_mut(cfg.execution, &mut clients, |i, client| {
            let mut model = template.clone();
            let correction = match cfg.scheme {
                Scheme::FedProx { mu } => LocalCorrection::Proximal {
                    mu,
                    reference: &snapshot.params,
                },
                Scheme::Scaffold { .. } => LocalCorrection::Scaffold {
                    server: server_c,
                    client: &client_c[i],
                },
                _ => LocalCorrection::None,
            };
            local_round(&mut model, &t, client, train, &snapshot, round, &tcfg, correction).map_err(|e| {
                Error::Client {
                    round,
                    client: i,
                    source: Box::new(e),
                }
            })
        });
        let updates = results.into_iter().collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(&[f32], usize)> = updates.iter().map(|u| (u.params.as_slice(), u.samples)).collect();
        let params = match cfg.scheme {
            Scheme::FedAvg | Scheme::FedProx { .. } => aggregate_fedavg(&pairs)?,
            Scheme::FedPaq { levels } => aggregate_fedpaq(&snapshot.params, &pairs, levels, &layout)?,
            Scheme::FedAdam { lr, beta1, beta2, tau } => {
                aggregate_fedadam(&snapshot.params, &pairs, &mut adam, lr, beta1, beta2, tau)?
            }
            Scheme::Scaffold { server_lr } => {
                // momentum SGD moves roughly lr / (1 - momentum) per unit gradient
                let step_size = tcfg.lr / (1.0 - tcfg.momentum);
                let uploads: Vec<ScaffoldUpload<'_>> = updates
                    .iter()
                    .map(|u| ScaffoldUpload {
                        params: &u.params,
                        samples: u.samples,
                        steps: u.metrics.steps,
                        step_size,
                    })
                    .collect();
                scaffold_round(&snapshot.params, &uploads, &mut scaffold, server_lr)?
            }
        };
        global.load_flat_params(&params)?;
        let main_bn = mean_moments(&updates, &channels)?;
        global.bn_state_mut().install(BnMode::Main, &main_bn)?;
        let last = round + 1 == cfg.rounds;
        let accuracy_now = if last || (cfg.eval_every > 0 && (round + 1) % cfg.eval_every == 0) {
            let mut eval = global.clone();
            Some(accuracy(&mut eval, test)?)
        } else {
            None
        };
        if let Some(a) = accuracy_now {
            final_accuracy = a;
        }
        let mut records = Vec::with_capacity(clients.len());
        for (c, u) in clients.iter().zip(&updates) {
            let global_ssim = if tcfg.watermark_enabled() {
                reconstruct(&global, &c.vector, &c.wm_bn, &c.watermark, &ssim_cfg)?.ssim
            } else {
                0.0
            };
            records.push(ClientRecord {
                client: c.id,
                main_loss: u.metrics.main_loss,
                wm_loss: u.metrics.wm_loss,
                local_ssim: u.metrics.ssim,
                global_ssim,
            });
        }
        let rec = RoundRecord {
            round,
            accuracy: accuracy_now,
            clients: records,
        };
        if let Some(s) = sink.as_mut() {
            s.record(&rec)?;
            if last || (cfg.checkpoint_every > 0 && (round + 1) % cfg.checkpoint_every == 0) {
                s.snapshot(&global, &clients, round + 1)?;
            }
        }
        history.push(rec);
    }
    if let Some(s) = sink.as_ref() {
        s.keys(&clients, cfg.rounds)?;
        Checkpoint::from_model(&global, cfg.rounds).save(&s.root.join("checkpoints/final"))?;
    }
    Ok(FederationOutcome {
        global,
        clients,
        history,
        final_accuracy,
    })
}
