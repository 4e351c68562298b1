//! Run summaries: final metrics from `metrics.csv`, attack records, and a
//! contact sheet pairing each client's reference with its reconstruction.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use wmfed_core::attacks::AttackRecord;
use wmfed_core::checkpoint::Checkpoint;
use wmfed_core::metrics::Dims;
use wmfed_core::watermark::{load_watermark, save_planar_png};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientLine {
    pub client: usize,
    pub ssim: f64,
    pub local_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    /// Rounds completed.
    pub rounds: usize,
    pub accuracy: Option<f64>,
    pub clients: Vec<ClientLine>,
    pub lpips: &'static str,
    pub attacks: Vec<AttackRecord>,
}

/// Parse `metrics.csv` into the number of rounds completed, the latest
/// recorded accuracy and the last round's client lines.
pub fn parse_metrics(text: &str) -> Result<(usize, Option<f64>, Vec<ClientLine>)> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            bail!("metrics.csv line {}: expected 7 fields, got {}", n + 1, f.len());
        }
        let num = |i: usize| f[i].parse::<f64>().with_context(|| format!("metrics.csv line {}", n + 1));
        let acc = if f[2].is_empty() { None } else { Some(num(2)?) };
        rows.push((num(0)? as usize, acc, ClientLine {
            client: num(1)? as usize,
            ssim: num(3)?,
            local_ssim: num(4)?,
        }));
    }
    let Some(last) = rows.iter().map(|r| r.0).max() else {
        bail!("metrics.csv has no rows");
    };
    let accuracy = rows.iter().rev().find_map(|r| r.1);
    let clients = rows.into_iter().filter(|r| r.0 == last).map(|r| r.2).collect();
    Ok((last + 1, accuracy, clients))
}

fn attack_records(dir: &Path) -> Result<Vec<AttackRecord>> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(Vec::new());
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path().join("record.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

/// Latest reconstruction of `client` under `images/`.
fn latest_image(run: &Path, client: usize) -> Option<PathBuf> {
    let suffix = format!("_client_{client}.png");
    fs::read_dir(run.join("images"))
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let round: usize = name.strip_prefix("round_")?.strip_suffix(&suffix)?.parse().ok()?;
            Some((round, e.path()))
        })
        .max_by_key(|(r, _)| *r)
        .map(|(_, p)| p)
}

fn contact_sheet(run: &Path, clients: &[ClientLine], out: &Path) -> Result<()> {
    let shape = Checkpoint::load(&run.join("checkpoints/final"))?.to_model()?.input_shape();
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let gap = 2;
    let (sheet_h, sheet_w) = (clients.len() * (h + gap) - gap, 2 * w + gap);
    let mut data = vec![1.0f32; c * sheet_h * sheet_w];
    for (row, cl) in clients.iter().enumerate() {
        let reference = run.join("keys").join(format!("client_{}.png", cl.client));
        let pair = [Some(reference), latest_image(run, cl.client)];
        for (col, path) in pair.iter().enumerate() {
            let Some(path) = path else { continue };
            let img = load_watermark(path, shape)?;
            for ch in 0..c {
                for y in 0..h {
                    let dst = ch * sheet_h * sheet_w + (row * (h + gap) + y) * sheet_w + col * (w + gap);
                    let src = ch * h * w + y * w;
                    data[dst..dst + w].copy_from_slice(&img.data[src..src + w]);
                }
            }
        }
    }
    save_planar_png(&data, Dims::new(c, sheet_h, sheet_w), out)?;
    Ok(())
}

fn markdown(s: &Summary) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Run summary\n");
    let acc = s.accuracy.map(|a| format!("{:.2}%", a * 100.0)).unwrap_or_else(|| "n/a".into());
    let _ = writeln!(md, "{} rounds, test accuracy {acc}. LPIPS: {}.\n", s.rounds, s.lpips);
    let _ = writeln!(md, "| client | SSIM | local SSIM |\n|---|---|---|");
    for c in &s.clients {
        let _ = writeln!(md, "| {} | {:.4} | {:.4} |", c.client, c.ssim, c.local_ssim);
    }
    if !s.attacks.is_empty() {
        let _ = writeln!(md, "\n## Attacks\n");
        let _ = writeln!(md, "| attack | acc before | acc after | SSIM before | SSIM after | ASR |\n|---|---|---|---|---|---|");
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        for r in &s.attacks {
            let asr = r
                .forgery
                .as_ref()
                .map(|f| f.asr.iter().map(|a| format!("{}: {:.1}%", a.tau, a.asr)).collect::<Vec<_>>().join(", "))
                .unwrap_or_else(|| "-".into());
            let params = serde_json::to_string(&r.attack).unwrap_or_default();
            let _ = writeln!(
                md,
                "| `{params}` | {} | {} | {} | {} | {asr} |",
                f(r.accuracy_before),
                f(r.accuracy_after),
                f(r.ssim_before),
                f(r.ssim_after)
            );
        }
    }
    let _ = writeln!(md, "\n![reference and reconstruction per client](sheet.png)");
    md
}

/// Write `summary.md`, `summary.json` and `sheet.png` into `run`; returns
/// the markdown path.
pub fn summarize(run: &Path, attacks: &Path) -> Result<PathBuf> {
    let metrics = run.join("metrics.csv");
    let text = fs::read_to_string(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let (rounds, accuracy, clients) = parse_metrics(&text)?;
    let summary = Summary {
        rounds,
        accuracy,
        lpips: "unavailable (needs a pretrained perceptual network)",
        attacks: attack_records(attacks)?,
        clients,
    };
    contact_sheet(run, &summary.clients, &run.join("sheet.png"))?;
    fs::write(run.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    let md = run.join("summary.md");
    fs::write(&md, markdown(&summary)).with_context(|| format!("writing {}", md.display()))?;
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_keep_the_last_round() {
        let csv = "round,client,acc,ssim,local_ssim,main_loss,wm_loss\n\
                   0,0,,0.1,0.2,1.0,0.5\n0,1,,0.2,0.3,1.0,0.5\n\
                   1,0,0.8,0.6,0.7,0.5,0.2\n1,1,0.8,0.65,0.75,0.5,0.2\n";
        let (round, acc, clients) = parse_metrics(csv).unwrap();
        assert_eq!(round, 2);
        assert_eq!(acc, Some(0.8));
        assert_eq!(clients.len(), 2);
        assert_eq!(clients[1].ssim, 0.65);
        assert!(parse_metrics("header\n1,2\n").is_err());
        assert!(parse_metrics("header\n").is_err());
    }
}
