//! Extraction vectors, vector augmentation, watermark images and the
//! dot-code bit-string codec.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{cosine, Dims};
use crate::model::InputShape;
use crate::tensor::Tensor;

/// A client's secret key: entries i.i.d. uniform on [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionVector {
    pub values: Vec<f32>,
    pub seed: u64,
}

pub fn generate_extraction_vector(seed: u64, dim: usize) -> Result<ExtractionVector> {
    if dim < 2 {
        return Err(Error::invalid(format!("extraction vectors need at least 2 entries, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..dim).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    Ok(ExtractionVector { values, seed })
}

impl ExtractionVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f32 {
        self.values.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.values.len(), 1, 1], self.values.clone()).expect("shape matches")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
}

/// Labeling rule: positive iff `cosine(candidate, source) >= delta`.
pub fn label_for(candidate: &[f32], source: &[f32], delta: f32) -> Result<Label> {
    Ok(if cosine(candidate, source)? >= delta as f64 {
        Label::Positive
    } else {
        Label::Negative
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedVectorSet {
    pub entries: Vec<(Vec<f32>, Label)>,
    pub source: Vec<f32>,
    pub sigma: f32,
    pub delta: f32,
}

impl AugmentedVectorSet {
    pub fn positives(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.entries.iter().filter(|e| e.1 == Label::Positive).map(|e| &e.0)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.entries.iter().filter(|e| e.1 == Label::Negative).map(|e| &e.0)
    }

    /// Recompute every label from the stored vectors.
    pub fn relabel(&self) -> Result<Vec<Label>> {
        self.entries
            .iter()
            .map(|(v, _)| label_for(v, &self.source, self.delta))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Draws allowed per requested vector before giving up on balance.
const BALANCE_DRAWS_PER_VECTOR: usize = 200;

/// Gaussian perturbations of `v` labeled by cosine similarity, balanced to
/// `ceil(num/2)` positives and `floor(num/2)` negatives.
pub fn augment_vectors(
    v: &ExtractionVector,
    num: usize,
    sigma: f32,
    delta: f32,
    rng: &mut impl Rng,
) -> Result<AugmentedVectorSet> {
    if num < 2 {
        return Err(Error::invalid(format!("need at least 2 augmented vectors, got {num}")));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let want_pos = num.div_ceil(2);
    let want_neg = num / 2;
    let (mut pos, mut neg) = (Vec::with_capacity(want_pos), Vec::with_capacity(want_neg));
    let cap = BALANCE_DRAWS_PER_VECTOR * num;
    let mut draws = 0;
    while pos.len() < want_pos || neg.len() < want_neg {
        if draws == cap {
            return Err(Error::AugmentationBalance { attempts: cap, sigma });
        }
        draws += 1;
        let cand: Vec<f32> = v
            .values
            .iter()
            .map(|x| {
                let z: f32 = StandardNormal.sample(rng);
                x + sigma * z
            })
            .collect();
        match label_for(&cand, &v.values, delta) {
            Ok(Label::Positive) if pos.len() < want_pos => pos.push(cand),
            Ok(Label::Negative) if neg.len() < want_neg => neg.push(cand),
            // zero-norm draws and surplus labels are discarded
            _ => {}
        }
    }
    // interleave so any prefix stays roughly balanced
    let mut entries = Vec::with_capacity(num);
    let mut pi = pos.into_iter();
    let mut ni = neg.into_iter();
    loop {
        let p = pi.next();
        let n = ni.next();
        if p.is_none() && n.is_none() {
            break;
        }
        if let Some(p) = p {
            entries.push((p, Label::Positive));
        }
        if let Some(n) = n {
            entries.push((n, Label::Negative));
        }
    }
    Ok(AugmentedVectorSet {
        entries,
        source: v.values.clone(),
        sigma,
        delta,
    })
}

/// Share of `v + N(0, σ²I)` draws labeled positive, estimated from `draws`
/// samples of a fixed noise stream (monotone in σ for a fixed seed).
pub fn positive_fraction(v: &ExtractionVector, sigma: f32, delta: f32, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..draws {
        let cand: Vec<f32> = v
            .values
            .iter()
            .map(|x| {
                let z: f32 = StandardNormal.sample(&mut rng);
                x + sigma * z
            })
            .collect();
        if matches!(label_for(&cand, &v.values, delta), Ok(Label::Positive)) {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}

/// Bisect σ until the pre-balance positive fraction lands in [0.3, 0.7].
pub fn calibrate_sigma(v: &ExtractionVector, delta: f32, seed: u64) -> Result<f32> {
    const DRAWS: usize = 2000;
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let (mut lo, mut hi) = (1e-4 * norm, 2.0 * norm);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let frac = positive_fraction(v, mid, delta, DRAWS, seed);
        if (0.3..=0.7).contains(&frac) {
            return Ok(mid);
        }
        if frac > 0.7 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::AugmentationBalance {
        attempts: 60 * DRAWS,
        sigma: 0.5 * (lo + hi),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    File(PathBuf),
    DotCode { bits: usize },
    Glyph { index: usize },
    Raw,
}

/// A watermark image with values in [0, 1], stored planar `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkImage {
    pub shape: InputShape,
    pub data: Vec<f32>,
    pub provenance: Provenance,
}

impl WatermarkImage {
    pub fn new(shape: InputShape, data: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                shape.height,
                shape.width,
                shape.channels,
                shape.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("watermark pixels must lie in [0, 1]"));
        }
        Ok(WatermarkImage { shape, data, provenance })
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.shape.channels, self.shape.height, self.shape.width)
    }

    /// Snap to the 8-bit grid used by emitted files.
    pub fn quantized(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = (*v * 255.0).round() / 255.0);
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// SHA-256 over the dims and 8-bit pixel values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.shape.height, self.shape.width, self.shape.channels] {
            h.update((d as u32).to_le_bytes());
        }
        h.update(self.to_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Write as an 8-bit PNG (grayscale or RGB).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_planar_png(&self.data, self.dims(), path)
    }
}

/// Write a planar `[0, 1]` image as an 8-bit PNG.
pub fn save_planar_png(data: &[f32], dims: Dims, path: &Path) -> Result<()> {
    let (h, w, c) = (dims.h, dims.w, dims.c);
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    match c {
        1 => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([q(data[y as usize * w + x as usize])])
            });
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        3 => {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                image::Rgb([q(data[i]), q(data[h * w + i]), q(data[2 * h * w + i])])
            });
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        other => return Err(Error::invalid(format!("cannot write a {other}-channel PNG"))),
    }
    Ok(())
}

/// Load a PNG/PGM image, resize bilinearly to `target` and adapt channels
/// (Rec. 601 luminance for single-channel targets).
pub fn load_watermark(path: &Path, target: InputShape) -> Result<WatermarkImage> {
    let img = image::open(path)?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid(format!("{} has zero area", path.display())));
    }
    let rgb = img.to_rgb32f();
    let rgb = if rgb.width() as usize == target.width && rgb.height() as usize == target.height {
        rgb
    } else {
        image::imageops::resize(&rgb, target.width as u32, target.height as u32, FilterType::Triangle)
    };
    let (h, w) = (target.height, target.width);
    let mut data = vec![0.0f32; target.len()];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        let [r, g, b] = px.0;
        match target.channels {
            1 => data[i] = 0.299 * r + 0.587 * g + 0.114 * b,
            3 => {
                data[i] = r;
                data[h * w + i] = g;
                data[2 * h * w + i] = b;
            }
            other => return Err(Error::invalid(format!("unsupported channel count {other}"))),
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    WatermarkImage::new(target, data, Provenance::File(path.to_path_buf()))
}

/// Patch layout for `n_patches` square patches: the largest side `p` such
/// that a `(H/p) x (W/p)` grid holds them all, filled row-major.
fn dotcode_layout(n_patches: usize, h: usize, w: usize) -> (usize, usize) {
    let mut p = h.min(w).max(1);
    while p > 1 && (h / p) * (w / p) < n_patches {
        p -= 1;
    }
    (p, w / p)
}

/// Encode bits as a patch grid: patch `i` carries bits `i*C .. i*C + C`, one
/// per channel, as 1.0 (bit set) or 0.0. Unused patches stay 0.
pub fn dotcode_encode(bits: &[bool], h: usize, w: usize, c: usize) -> Result<WatermarkImage> {
    let capacity = h * w * c;
    if bits.len() > capacity {
        return Err(Error::Capacity {
            bits: bits.len(),
            capacity,
        });
    }
    let n_patches = bits.len().div_ceil(c.max(1));
    let (p, cols) = dotcode_layout(n_patches, h, w);
    let mut data = vec![0.0f32; capacity];
    for (k, &bit) in bits.iter().enumerate() {
        if !bit {
            continue;
        }
        let (patch, ch) = (k / c, k % c);
        let (py, px) = (patch / cols, patch % cols);
        for y in py * p..(py + 1) * p {
            for x in px * p..(px + 1) * p {
                data[ch * h * w + y * w + x] = 1.0;
            }
        }
    }
    WatermarkImage::new(
        InputShape::new(h, w, c),
        data,
        Provenance::DotCode { bits: bits.len() },
    )
}

/// Decode `nbits` bits: a patch channel whose mean exceeds 0.5 reads as 1.
pub fn dotcode_decode(img: &WatermarkImage, nbits: usize) -> Result<Vec<bool>> {
    decode_planar(&img.data, img.dims(), nbits)
}

/// [`dotcode_decode`] over a raw planar buffer.
pub fn decode_planar(data: &[f32], dims: Dims, nbits: usize) -> Result<Vec<bool>> {
    let (h, w, c) = (dims.h, dims.w, dims.c);
    if nbits > h * w * c {
        return Err(Error::Capacity {
            bits: nbits,
            capacity: h * w * c,
        });
    }
    if data.len() != dims.len() {
        return Err(Error::shape("image buffer does not match its dims"));
    }
    let (p, cols) = dotcode_layout(nbits.div_ceil(c.max(1)), h, w);
    Ok((0..nbits)
        .map(|k| {
            let (patch, ch) = (k / c, k % c);
            let (py, px) = (patch / cols, patch % cols);
            let mut sum = 0.0f64;
            for y in py * p..(py + 1) * p {
                for x in px * p..(px + 1) * p {
                    sum += data[ch * h * w + y * w + x] as f64;
                }
            }
            sum / (p * p) as f64 > 0.5
        })
        .collect())
}

/// Parse a hex string into bits, most significant bit first.
pub fn bits_from_hex(hex: &str) -> Result<Vec<bool>> {
    let mut bits = Vec::with_capacity(hex.len() * 4);
    for ch in hex.trim().trim_start_matches("0x").chars() {
        let nibble = ch
            .to_digit(16)
            .ok_or_else(|| Error::invalid(format!("'{ch}' is not a hex digit")))?;
        for s in (0..4).rev() {
            bits.push((nibble >> s) & 1 == 1);
        }
    }
    Ok(bits)
}

pub fn bits_to_hex(bits: &[bool]) -> String {
    bits.chunks(4)
        .map(|chunk| {
            let mut v = 0u32;
            for (i, &b) in chunk.iter().enumerate() {
                if b {
                    v |= 1 << (3 - i);
                }
            }
            std::char::from_digit(v, 16).expect("nibble")
        })
        .collect()
}

// 5x7 bitmap glyphs, one row per byte (low 5 bits, MSB = leftmost column).
const GLYPHS: [(char, [u8; 7]); 12] = [
    ('A', [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('T', [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04]),
    ('H', [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('Z', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F]),
    ('L', [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F]),
    ('E', [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F]),
    ('K', [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11]),
    ('N', [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11]),
    ('J', [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C]),
    ('M', [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11]),
    ('Y', [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04]),
    ('X', [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11]),
];

/// A human-recognizable watermark: a block letter over a smooth sinusoidal
/// grating. The grating orientation follows a golden-ratio sequence in
/// `index`, polarity alternates with index parity and the letter is nudged
/// off-centre, so distinct indices give structurally dissimilar images.
/// Values lie on the 8-bit grid.
pub fn glyph_watermark(index: usize, shape: InputShape) -> WatermarkImage {
    let (h, w) = (shape.height, shape.width);
    let (_, rows) = GLYPHS[index % GLYPHS.len()];
    let turn = (index as f32 * 0.618_034).fract();
    let angle = std::f32::consts::PI * turn;
    let period = 6.0 + 2.0 * (index % 3) as f32;
    let (ca, sa) = (angle.cos(), angle.sin());
    // odd indices: dark strokes on a light grating
    let (base, ink) = if index.is_multiple_of(2) { (0.35, 0.95) } else { (0.65, 0.05) };
    let cell = ((h.min(w) as f32 * 0.65) / 7.0).max(1.0);
    let (gw, gh) = (5.0 * cell, 7.0 * cell);
    let shift = (h.min(w) as f32 / 9.0).floor();
    let (dx, dy) = ((index % 3) as f32 - 1.0, ((index / 3) % 3) as f32 - 1.0);
    let x0 = ((w as f32 - gw) / 2.0 + dx * shift).max(0.0);
    let y0 = ((h as f32 - gh) / 2.0 + dy * shift).max(0.0);
    let mut plane = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let t = (x as f32 * ca + y as f32 * sa) * std::f32::consts::TAU / period;
            let mut v = base + 0.3 * t.sin();
            let (gx, gy) = ((x as f32 + 0.5 - x0) / cell, (y as f32 + 0.5 - y0) / cell);
            if gx >= 0.0 && gy >= 0.0 && (gx as usize) < 5 && (gy as usize) < 7 {
                let bit = (rows[gy as usize] >> (4 - gx as usize)) & 1;
                if bit == 1 {
                    v = ink;
                }
            }
            plane[y * w + x] = v;
        }
    }
    let mut data = Vec::with_capacity(shape.len());
    for c in 0..shape.channels {
        // tint color channels differently so RGB marks stay distinct per client
        let gain = if shape.channels > 1 {
            1.0 - 0.15 * ((c + index) % 3) as f32
        } else {
            1.0
        };
        data.extend(plane.iter().map(|v| v * gain));
    }
    WatermarkImage::new(shape, data, Provenance::Glyph { index })
        .expect("glyph values lie in [0, 1]")
        .quantized()
}

/// Mean pairwise |cosine| over a set of vectors.
pub fn mean_abs_pairwise_cosine(vectors: &[ExtractionVector]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            total += cosine(&vectors[i].values, &vectors[j].values)?.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("need at least two vectors"));
    }
    Ok(total / n as f64)
}
