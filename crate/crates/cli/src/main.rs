//! `wmfed`: train watermarked federations, verify ownership, attack
//! checkpoints, measure dot-code capacity and summarize runs.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use wmfed_core::attacks::{
    evaluate, finetune, forge, overwrite, prune, quantize, score_forgeries, AttackConfig, AttackKind, AttackRecord,
    FinetuneConfig, ForgeConfig, ForgeMode, OverwriteConfig,
};
use wmfed_core::capacity::run_capacity;
use wmfed_core::checkpoint::Checkpoint;
use wmfed_core::data::load_splits;
use wmfed_core::federation::{run_federation, FederationConfig, WatermarkSource};
use wmfed_core::par::Execution;
use wmfed_core::verify::{verify_files, Verdict, WatermarkKey};
use wmfed_core::watermark::{glyph_watermark, load_watermark, WatermarkImage};

use config::{DatasetChoice, Experiment};

#[derive(Parser)]
#[command(name = "wmfed", version, about = "Federated watermarking laboratory")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "WMFED_RUN_DIR", default_value = "runs")]
    run_dir: PathBuf,
    /// Run clients and forgery attempts one at a time.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federation described by a TOML experiment file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output subdirectory (defaults to the experiment name).
        #[arg(long)]
        name: Option<String>,
    },
    /// Verify a checkpoint against a watermark key.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
        tau: f64,
        /// Where to write the reconstructed watermark.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Attack a checkpoint and record accuracy and SSIM before and after.
    Attack(AttackArgs),
    /// Embed a random dot-code payload and measure its bit error rate.
    Capacity {
        #[arg(long, default_value_t = 784)]
        bits: usize,
        #[arg(long, default_value = "synthetic-gray")]
        dataset: String,
        #[arg(long, default_value_t = 1)]
        clients: usize,
        #[arg(long, default_value_t = 50)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a training run and any attack records.
    Report {
        /// Run directory (relative to the run root unless absolute).
        #[arg(long)]
        run: PathBuf,
        /// Directory holding attack outputs.
        #[arg(long)]
        attacks: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AttackArgs {
    /// Checkpoint to attack; it is never modified in place.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Keys used only to score the attack; repeatable.
    #[arg(long)]
    key: Vec<PathBuf>,
    /// Experiment file whose dataset supplies holdout and test data.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (defaults to `<run-dir>/attacks/<kind>-<seed>`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    kind: AttackCmd,
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Zero the smallest-magnitude fraction of weights.
    Prune {
        #[arg(long)]
        ratio: f64,
    },
    /// Continue training on holdout data with the main task only.
    Finetune {
        #[arg(long, default_value_t = 15)]
        rounds: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f32,
        #[arg(long, default_value_t = 0.9)]
        momentum: f32,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Round weight tensors to a symmetric uniform grid.
    Quantize {
        #[arg(long)]
        bits: u32,
    },
    /// Embed the attacker's own watermark over the existing ones.
    Overwrite {
        #[arg(long, default_value_t = 50)]
        rounds: usize,
        /// Attacker watermark image; a built-in glyph otherwise.
        #[arg(long)]
        watermark: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        glyph: usize,
        /// Train on the watermark task alone.
        #[arg(long)]
        no_main_task: bool,
        #[arg(long, default_value_t = 32)]
        steps_per_round: usize,
    },
    /// Search for key vectors that reconstruct a watermark.
    Forge {
        #[arg(long, value_enum, default_value_t = Mode::Targeted)]
        mode: Mode,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 50)]
        attempts: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f32,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5, 0.7, 0.9])]
        tau: Vec<f64>,
        /// Image the targeted attacker optimizes toward; defaults to the
        /// first key's reference image.
        #[arg(long)]
        target: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Targeted,
    Untargeted,
}

/// Errors in how the tool was invoked rather than in the work itself.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

enum Outcome {
    Done,
    VerifyFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::VerifyFailed) => ExitCode::from(3),
        Err(e) => {
            let usage = e.downcast_ref::<UsageError>().is_some();
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("wmfed: error: {}: {msg}", if usage { "usage" } else { "failed" });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn execution(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let exec = execution(&cli);
    match &cli.command {
        Command::Train { config, name } => train(&cli.run_dir, config, name.as_deref(), exec),
        Command::Verify {
            checkpoint,
            key,
            tau,
            image,
            report,
        } => verify_cmd(&cli.run_dir, checkpoint, key, *tau, image.clone(), report.clone()),
        Command::Attack(args) => attack(&cli.run_dir, args, exec),
        Command::Capacity {
            bits,
            dataset,
            clients,
            rounds,
            seed,
        } => capacity(&cli.run_dir, *bits, dataset, *clients, *rounds, *seed, exec),
        Command::Report { run, attacks } => {
            let run = resolve(&cli.run_dir, run);
            let attacks = attacks.clone().unwrap_or_else(|| cli.run_dir.join("attacks"));
            let summary = report::summarize(&run, &attacks)?;
            println!("{}", summary.display());
            Ok(Outcome::Done)
        }
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || p.exists() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn train(root: &Path, config: &Path, name: Option<&str>, exec: Execution) -> Result<Outcome> {
    let exp = Experiment::load(config)?;
    let splits = load_splits(&exp.dataset.source()?)?;
    let arch = exp.arch_for(&splits.train);
    let mut fed = exp.federation.clone();
    fed.execution = exec;
    let dir = root.join(name.unwrap_or(&exp.name));
    let out = run_federation(&fed, &arch, &splits.train, &splits.test, Some(&dir))?;
    fs::write(dir.join("arch.json"), serde_json::to_vec_pretty(&arch)?)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        run_dir: &'a Path,
        rounds: usize,
        accuracy: f64,
        ssims: Vec<f64>,
    }
    print_json(&Summary {
        run_dir: &dir,
        rounds: fed.rounds,
        accuracy: out.final_accuracy,
        ssims: out.final_ssims(),
    })?;
    Ok(Outcome::Done)
}

fn verify_cmd(
    root: &Path,
    checkpoint: &Path,
    key: &Path,
    tau: f64,
    image: Option<PathBuf>,
    report: Option<PathBuf>,
) -> Result<Outcome> {
    let stem = key.file_stem().and_then(|s| s.to_str()).unwrap_or("key").to_string();
    let image = image.unwrap_or_else(|| root.join("verify").join(format!("{stem}.png")));
    let report_path = report.unwrap_or_else(|| image.with_extension("json"));
    if let Some(d) = image.parent() {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let rep = verify_files(checkpoint, key, tau, Some(&image))?;
    write_json(&report_path, &rep)?;
    print_json(&rep)?;
    Ok(match rep.verdict {
        Verdict::Pass => Outcome::Done,
        Verdict::Fail => Outcome::VerifyFailed,
    })
}

fn attack(root: &Path, args: &AttackArgs, exec: Execution) -> Result<Outcome> {
    let exp = match &args.config {
        Some(p) => Experiment::load(p)?,
        None => Experiment::default(),
    };
    let splits = load_splits(&exp.dataset.source()?)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let keys: Vec<(WatermarkKey, WatermarkImage)> = args
        .key
        .iter()
        .map(|p| {
            let k = WatermarkKey::load(p)?;
            let img = k.reference_image(p)?;
            Ok((k, img))
        })
        .collect::<Result<_>>()?;
    let first = keys.first().map(|(k, i)| (k, i));
    let kind = attack_kind(&args.kind);
    let cfg = AttackConfig { seed: args.seed, kind };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let label = match &cfg.kind {
        AttackKind::Prune { .. } => "prune",
        AttackKind::Finetune(_) => "finetune",
        AttackKind::Quantize { .. } => "quantize",
        AttackKind::Overwrite(_) => "overwrite",
        AttackKind::Forge(_) => "forge",
    };
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| root.join("attacks").join(format!("{label}-{}", args.seed)));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let (acc_before, ssim_before) = evaluate(&ckpt, &splits.test, first)?;
    let shape = ckpt.to_model()?.input_shape();

    let mut record = AttackRecord {
        attack: cfg.clone(),
        accuracy_before: Some(acc_before),
        accuracy_after: None,
        ssim_before,
        ssim_after: None,
        forgery: None,
    };
    let attacked = match &cfg.kind {
        AttackKind::Prune { ratio } => Some(prune(&ckpt, *ratio)?),
        AttackKind::Quantize { bits } => Some(quantize(&ckpt, *bits)?),
        AttackKind::Finetune(f) => Some(finetune(&ckpt, &splits.holdout, f, cfg.seed)?),
        AttackKind::Overwrite(o) => {
            let wm = match &args.kind {
                AttackCmd::Overwrite {
                    watermark: Some(p), ..
                } => load_watermark(p, shape)?,
                AttackCmd::Overwrite { glyph, .. } => glyph_watermark(*glyph, shape),
                _ => unreachable!(),
            };
            let res = overwrite(&ckpt, Some(&splits.holdout), &wm, o, cfg.seed)?;
            wm.save_png(&out_dir.join("attacker.png"))?;
            WatermarkKey::from_client(&res.attacker, "attacker.png".into(), ckpt.round)
                .save(&out_dir.join("attacker.key"))?;
            Some(res.checkpoint)
        }
        AttackKind::Forge(f) => {
            let Some((key, genuine)) = first else {
                return Err(UsageError("forge needs --key to score forged vectors".into()).into());
            };
            let target = match &args.kind {
                AttackCmd::Forge { target: Some(p), .. } => load_watermark(p, shape)?,
                _ => genuine.clone(),
            };
            let forged = forge(&ckpt, Some(&target), f, cfg.seed, exec)?;
            record.forgery = Some(score_forgeries(&ckpt, key, genuine, &forged, f.mode, &f.taus)?);
            write_json(&out_dir.join("forged_vectors.json"), &forged)?;
            None
        }
    };
    if let Some(c) = &attacked {
        c.save(&out_dir.join("checkpoint"))?;
        let (acc, ssim) = evaluate(c, &splits.test, first)?;
        record.accuracy_after = Some(acc);
        record.ssim_after = ssim;
    }
    write_json(&out_dir.join("record.json"), &record)?;
    print_json(&record)?;
    Ok(Outcome::Done)
}

fn attack_kind(cmd: &AttackCmd) -> AttackKind {
    match *cmd {
        AttackCmd::Prune { ratio } => AttackKind::Prune { ratio },
        AttackCmd::Quantize { bits } => AttackKind::Quantize { bits },
        AttackCmd::Finetune {
            rounds,
            lr,
            momentum,
            batch,
        } => AttackKind::Finetune(FinetuneConfig {
            rounds,
            lr,
            momentum,
            batch,
        }),
        AttackCmd::Overwrite {
            rounds,
            no_main_task,
            steps_per_round,
            ..
        } => AttackKind::Overwrite(OverwriteConfig {
            rounds,
            with_main_task: !no_main_task,
            steps_per_round,
            ..Default::default()
        }),
        AttackCmd::Forge {
            mode,
            steps,
            attempts,
            lr,
            ref tau,
            ..
        } => AttackKind::Forge(ForgeConfig {
            mode: match mode {
                Mode::Targeted => ForgeMode::Targeted,
                Mode::Untargeted => ForgeMode::Untargeted,
            },
            steps,
            attempts,
            lr,
            taus: tau.clone(),
        }),
    }
}

fn capacity(
    root: &Path,
    bits: usize,
    dataset: &str,
    clients: usize,
    rounds: usize,
    seed: u64,
    exec: Execution,
) -> Result<Outcome> {
    let source = DatasetChoice::Named(dataset.to_string())
        .source()
        .map_err(|e| UsageError(e.to_string()))?;
    if bits == 0 {
        bail!(UsageError("--bits must be at least 1".into()));
    }
    let splits = load_splits(&source)?;
    let exp = Experiment::default();
    let arch = exp.arch_for(&splits.train);
    let cfg = FederationConfig {
        seed,
        clients,
        rounds,
        watermarks: WatermarkSource::DotCode { bits },
        execution: exec,
        ..Default::default()
    };
    let dir = root.join("capacity").join(format!("bits{bits}-seed{seed}"));
    let rep = run_capacity(&cfg, &arch, &splits.train, &splits.test, Some(&dir))?;
    write_json(&dir.join("capacity.json"), &rep)?;
    print_json(&rep)?;
    Ok(Outcome::Done)
}
