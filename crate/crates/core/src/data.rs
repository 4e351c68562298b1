//! Datasets: IDX (MNIST-compatible) ingestion and a seeded synthetic
//! generator of class-conditional blob images.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::tensor::Tensor;

/// Labeled images stored as one `(n, C, H, W)` tensor with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub shape: InputShape,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s[0] != labels.len() {
            return Err(Error::shape(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            shape: InputShape::new(s[2], s[3], s[1]),
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.gather(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (images, labels) = self.batch(idx);
        Dataset {
            images,
            labels,
            shape: self.shape,
            classes: self.classes,
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            detail: "truncated IDX header".into(),
        })
}

/// Load an IDX image file and its label file (MNIST layout: big-endian
/// magic, then dimensions, then unsigned bytes). Pixels scale to [0, 1].
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let ib = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let corrupt = |path: &Path, detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let magic = be_u32(&ib, 0, images)?;
    if magic != IDX_IMAGES {
        return Err(corrupt(images, format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let magic = be_u32(&lb, 0, labels)?;
    if magic != IDX_LABELS {
        return Err(corrupt(labels, format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(&ib, 4, images)? as usize;
    let h = be_u32(&ib, 8, images)? as usize;
    let w = be_u32(&ib, 12, images)? as usize;
    let nl = be_u32(&lb, 4, labels)? as usize;
    if n != nl {
        return Err(Error::shape(format!("{n} images but {nl} labels")));
    }
    let pixels = ib
        .get(16..16 + n * h * w)
        .ok_or_else(|| corrupt(images, format!("expected {} pixel bytes", n * h * w)))?;
    let raw_labels = lb
        .get(8..8 + n)
        .ok_or_else(|| corrupt(labels, format!("expected {n} label bytes")))?;
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::from_vec([n, 1, h, w], data)?;
    Dataset::new(images, raw_labels.iter().map(|&l| l as usize).collect(), classes)
}

/// Write a dataset in IDX layout (grayscale only).
pub fn save_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    if ds.shape.channels != 1 {
        return Err(Error::invalid("IDX export supports single-channel images"));
    }
    let mut ib = Vec::with_capacity(16 + ds.images.data().len());
    ib.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    for d in [ds.len(), ds.shape.height, ds.shape.width] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    ib.extend(ds.images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lb = Vec::with_capacity(8 + ds.len());
    lb.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lb.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lb.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images, ib).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lb).map_err(|e| Error::io(labels, e))
}

/// Parameters of the synthetic blob generator. Each class owns a few
/// Gaussian blobs at prototype positions; samples jitter the blobs, vary
/// their brightness and add pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape: InputShape,
    pub classes: usize,
    pub blobs_per_class: usize,
    /// Seed of the class prototypes; splits sharing it share classes.
    pub prototype_seed: u64,
    /// Std of blob-centre jitter in pixels.
    pub jitter: f32,
    /// Std of additive pixel noise.
    pub noise: f32,
}

impl SyntheticSpec {
    pub fn gray28(prototype_seed: u64) -> Self {
        SyntheticSpec {
            shape: InputShape::new(28, 28, 1),
            classes: 10,
            blobs_per_class: 3,
            prototype_seed,
            jitter: 2.0,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    y: f32,
    x: f32,
    radius: f32,
    tint: [f32; 3],
}

fn prototypes(spec: &SyntheticSpec) -> Vec<Vec<Blob>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
    let (h, w) = (spec.shape.height as f32, spec.shape.width as f32);
    (0..spec.classes)
        .map(|_| {
            (0..spec.blobs_per_class)
                .map(|_| Blob {
                    y: rng.random_range(0.2 * h..0.8 * h),
                    x: rng.random_range(0.2 * w..0.8 * w),
                    radius: rng.random_range(0.06..0.14) * h.min(w),
                    tint: [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)],
                })
                .collect()
        })
        .collect()
}

/// Draw `n` samples with balanced, shuffled labels.
pub fn synthetic(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.blobs_per_class == 0 || spec.shape.is_empty() {
        return Err(Error::invalid("synthetic data needs >= 2 classes, >= 1 blob and a non-empty shape"));
    }
    let protos = prototypes(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0f32, spec.jitter.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let (c, h, w) = (spec.shape.channels, spec.shape.height, spec.shape.width);
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    // Fisher-Yates with the sample stream keeps labels and pixels on one seed
    for i in (1..n).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let mut data = vec![0.0f32; n * c * h * w];
    for (i, &label) in labels.iter().enumerate() {
        let img = &mut data[i * c * h * w..(i + 1) * c * h * w];
        for blob in &protos[label] {
            let (cy, cx) = (blob.y + jitter.sample(&mut rng), blob.x + jitter.sample(&mut rng));
            let amp = rng.random_range(0.6f32..1.0);
            let inv = 1.0 / (2.0 * blob.radius * blob.radius);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    let v = amp * (-d2 * inv).exp();
                    for ch in 0..c {
                        let t = if c == 1 { 1.0 } else { blob.tint[ch % 3] };
                        img[(ch * h + y) * w + x] += v * t;
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Dataset::new(Tensor::from_vec([n, c, h, w], data)?, labels, spec.classes)
}

/// Where a run's data comes from. Every source yields three disjoint
/// splits: federated training data, evaluation data, and a holdout shard
/// reserved for fine-tuning attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        spec: SyntheticSpec,
        train: usize,
        test: usize,
        holdout: usize,
        seed: u64,
    },
    Idx {
        train_images: std::path::PathBuf,
        train_labels: std::path::PathBuf,
        test_images: std::path::PathBuf,
        test_labels: std::path::PathBuf,
        classes: usize,
        /// Training samples used (0 = all), after the holdout is removed.
        limit: usize,
        holdout: usize,
    },
}

impl DatasetSource {
    /// The default desk dataset: [`DatasetSource::synthetic_gray`] with data
    /// seed 1.
    pub fn desk() -> Self {
        Self::synthetic_gray(1)
    }

    /// The desk-scale synthetic grayscale set.
    pub fn synthetic_gray(seed: u64) -> Self {
        DatasetSource::Synthetic {
            spec: SyntheticSpec::gray28(seed),
            train: 2000,
            test: 1000,
            holdout: 500,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub holdout: Dataset,
}

pub fn load_splits(src: &DatasetSource) -> Result<Splits> {
    match src {
        DatasetSource::Synthetic {
            spec,
            train,
            test,
            holdout,
            seed,
        } => Ok(Splits {
            train: synthetic(spec, *train, crate::rng::derive_seed(*seed, "train-split", 0, 0))?,
            test: synthetic(spec, *test, crate::rng::derive_seed(*seed, "test-split", 0, 0))?,
            holdout: synthetic(spec, *holdout, crate::rng::derive_seed(*seed, "holdout-split", 0, 0))?,
        }),
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
            limit,
            holdout,
        } => {
            let all = load_idx(train_images, train_labels, *classes)?;
            if *holdout >= all.len() {
                return Err(Error::invalid(format!("holdout {holdout} leaves no training data")));
            }
            let rest = all.len() - holdout;
            let n = if *limit == 0 { rest } else { (*limit).min(rest) };
            Ok(Splits {
                train: all.subset(&(0..n).collect::<Vec<_>>()),
                holdout: all.subset(&(rest..all.len()).collect::<Vec<_>>()),
                test: load_idx(test_images, test_labels, *classes)?,
            })
        }
    }
}
