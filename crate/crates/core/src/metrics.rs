//! Image and verification metrics: SSIM (with analytic gradient), MSE, PSNR,
//! BER, cosine similarity and attack success rate.
//!
//! Images are planar `(C, H, W)` slices of `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar image dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Dims { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Window {
    Uniform,
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window: Window,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    /// 7x7 uniform window, `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, `L = 1`.
    fn default() -> Self {
        SsimConfig::uniform(7, 1.0)
    }
}

impl SsimConfig {
    pub fn uniform(window_size: usize, dynamic_range: f64) -> Self {
        SsimConfig {
            window_size,
            window: Window::Uniform,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            dynamic_range,
        }
    }

    /// The classic 11x11 Gaussian window with σ = 1.5.
    pub fn gaussian() -> Self {
        SsimConfig {
            window_size: 11,
            window: Window::Gaussian { sigma: 1.5 },
            ..SsimConfig::uniform(11, 1.0)
        }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "SSIM window must be odd and at least 3, got {}",
                self.window_size
            )));
        }
        if self.window_size > dims.h.min(dims.w) {
            return Err(Error::invalid(format!(
                "SSIM window {} exceeds the {}x{} image",
                self.window_size, dims.h, dims.w
            )));
        }
        if self.c1 <= 0.0 || self.c2 <= 0.0 {
            return Err(Error::invalid("SSIM constants must be positive"));
        }
        Ok(())
    }

    fn taps(&self) -> Vec<f64> {
        let k = self.window_size;
        match self.window {
            Window::Uniform => vec![1.0 / k as f64; k],
            Window::Gaussian { sigma } => {
                let r = (k / 2) as f64;
                let raw: Vec<f64> = (0..k)
                    .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
                    .collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            }
        }
    }
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = taps.iter().enumerate().map(|(t, c)| c * x[y * w + ox + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = taps.iter().enumerate().map(|(t, c)| c * rows[(oy + t) * ow + ox]).sum();
        }
    }
    out
}

/// Adjoint of [`filter`].
fn filter_adjoint(m: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let v = m[oy * ow + ox];
            for (t, c) in taps.iter().enumerate() {
                rows[(oy + t) * ow + ox] += c * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for ox in 0..ow {
            let v = rows[y * ow + ox];
            for (t, c) in taps.iter().enumerate() {
                out[y * w + ox + t] += c * v;
            }
        }
    }
    out
}

fn check_pair(a: &[f32], b: &[f32], dims: Dims) -> Result<()> {
    if a.len() != dims.len() || b.len() != dims.len() {
        return Err(Error::shape(format!(
            "images of {} and {} values, expected {}",
            a.len(),
            b.len(),
            dims.len()
        )));
    }
    Ok(())
}

fn ssim_impl(a: &[f32], b: &[f32], dims: Dims, cfg: &SsimConfig, want_grad: bool) -> Result<(f64, Vec<f32>)> {
    check_pair(a, b, dims)?;
    cfg.validate(dims)?;
    let taps = cfg.taps();
    let (h, w) = (dims.h, dims.w);
    let k = cfg.window_size;
    let n_windows = ((h - k + 1) * (w - k + 1)) as f64;
    let plane = h * w;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0f32; a.len()] } else { Vec::new() };
    let norm = 1.0 / (n_windows * dims.c as f64);
    for ch in 0..dims.c {
        let pa: Vec<f64> = a[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter(&pa, h, w, &taps);
        let mu_b = filter(&pb, h, w, &taps);
        let e_aa = filter(&sq_a, h, w, &taps);
        let e_bb = filter(&sq_b, h, w, &taps);
        let e_ab = filter(&ab, h, w, &taps);
        let m = mu_a.len();
        let (mut g_mu, mut g_aa, mut g_ab) = if want_grad {
            (vec![0.0; m], vec![0.0; m], vec![0.0; m])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        for i in 0..m {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let saa = e_aa[i] - ma * ma;
            let sbb = e_bb[i] - mb * mb;
            let sab = e_ab[i] - ma * mb;
            let a1 = 2.0 * ma * mb + cfg.c1;
            let a2 = 2.0 * sab + cfg.c2;
            let b1 = ma * ma + mb * mb + cfg.c1;
            let b2 = saa + sbb + cfg.c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d_mu = 2.0 * mb * a2 / (b1 * b2) - 2.0 * ma * s / b1;
                let d_saa = -s / b2;
                let d_sab = 2.0 * a1 / (b1 * b2);
                // σ_aa = E[a²] - μ_a², σ_ab = E[ab] - μ_a μ_b
                g_mu[i] = (d_mu - 2.0 * ma * d_saa - mb * d_sab) * norm;
                g_aa[i] = d_saa * norm;
                g_ab[i] = d_sab * norm;
            }
        }
        if want_grad {
            let t_mu = filter_adjoint(&g_mu, h, w, &taps);
            let t_aa = filter_adjoint(&g_aa, h, w, &taps);
            let t_ab = filter_adjoint(&g_ab, h, w, &taps);
            for p in 0..plane {
                grad[ch * plane + p] = (t_mu[p] + 2.0 * pa[p] * t_aa[p] + pb[p] * t_ab[p]) as f32;
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean windowed SSIM, averaged over channels.
pub fn ssim(a: &[f32], b: &[f32], dims: Dims, cfg: &SsimConfig) -> Result<f64> {
    ssim_impl(a, b, dims, cfg, false).map(|(v, _)| v)
}

/// SSIM and its gradient with respect to `a`. The gradient with respect to
/// `b` is obtained by swapping the arguments.
pub fn ssim_with_grad(a: &[f32], b: &[f32], dims: Dims, cfg: &SsimConfig) -> Result<(f64, Vec<f32>)> {
    ssim_impl(a, b, dims, cfg, true)
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("images of {} and {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(L² / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &[f32], b: &[f32], dynamic_range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, dynamic_range))
}

pub fn psnr_from_mse(mse: f64, dynamic_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (dynamic_range * dynamic_range / mse).log10()
    }
}

/// Fraction of positions where the two bit strings differ.
pub fn ber(sent: &[bool], received: &[bool]) -> Result<f64> {
    if sent.len() != received.len() {
        return Err(Error::shape(format!(
            "bit strings of length {} and {}",
            sent.len(),
            received.len()
        )));
    }
    if sent.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let wrong = sent.iter().zip(received).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / sent.len() as f64)
}

pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum();
    let nu: f64 = u.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Attack success rate in percent: share of attempts with SSIM ≥ τ.
pub fn asr(outcomes: &[f64], tau: f64) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let hits = outcomes.iter().filter(|&&s| s >= tau).count();
    Ok(100.0 * hits as f64 / outcomes.len() as f64)
}
