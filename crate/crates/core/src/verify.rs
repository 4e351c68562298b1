//! Watermark keys and ownership verification.
//!
//! A key bundles everything a verifier needs besides the suspect model: the
//! extraction vector, the watermark-mode BN moments, and a digest-checked
//! reference to the watermark image. Verification rebuilds the transposed
//! model from the checkpoint, installs the key's moments, emits
//! `wm' = T(v)` and passes iff `SSIM(wm', wm) >= tau`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_envelope, write_envelope, Checkpoint, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::metrics::{mse, psnr_from_mse, ssim, SsimConfig};
use crate::model::{flatten_moments, unflatten_moments, BnMode, InputShape, ModelGraph, Moments};
use crate::training::ClientState;
use crate::transpose::build_transposed;
use crate::watermark::{load_watermark, save_planar_png, ExtractionVector, WatermarkImage};

const KEY_MAGIC: &[u8; 8] = b"WMFKEY\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkKey {
    pub client_id: usize,
    pub vector: ExtractionVector,
    pub wm_bn: Vec<Moments>,
    pub image_digest: String,
    /// Reference image location, relative to the key file when not absolute.
    pub image_path: PathBuf,
    pub image_shape: InputShape,
    pub created_round: usize,
    pub version: u32,
}

#[derive(Serialize, Deserialize)]
struct KeyHeader {
    client_id: usize,
    vector_seed: u64,
    vector_dim: usize,
    bn_channels: Vec<usize>,
    image_digest: String,
    image_path: PathBuf,
    image_shape: InputShape,
    created_round: usize,
}

impl WatermarkKey {
    pub fn from_client(client: &ClientState, image_path: PathBuf, created_round: usize) -> Self {
        WatermarkKey {
            client_id: client.id,
            vector: client.vector.clone(),
            wm_bn: client.wm_bn.clone(),
            image_digest: client.watermark.digest(),
            image_path,
            image_shape: client.watermark.shape,
            created_round,
            version: FORMAT_VERSION,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = KeyHeader {
            client_id: self.client_id,
            vector_seed: self.vector.seed,
            vector_dim: self.vector.dim(),
            bn_channels: self.wm_bn.iter().map(|m| m.mean.len()).collect(),
            image_digest: self.image_digest.clone(),
            image_path: self.image_path.clone(),
            image_shape: self.image_shape,
            created_round: self.created_round,
        };
        let mut payload = self.vector.values.clone();
        payload.extend(flatten_moments(&self.wm_bn));
        write_envelope(path, KEY_MAGIC, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (KeyHeader, Vec<f32>) = read_envelope(path, KEY_MAGIC)?;
        if payload.len() < h.vector_dim {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                detail: "payload shorter than the extraction vector".into(),
            });
        }
        let wm_bn = unflatten_moments(&payload[h.vector_dim..], &h.bn_channels)?;
        Ok(WatermarkKey {
            client_id: h.client_id,
            vector: ExtractionVector {
                values: payload[..h.vector_dim].to_vec(),
                seed: h.vector_seed,
            },
            wm_bn,
            image_digest: h.image_digest,
            image_path: h.image_path,
            image_shape: h.image_shape,
            created_round: h.created_round,
            version: FORMAT_VERSION,
        })
    }

    /// Check vector length, BN shapes and image dims against `model`.
    pub fn check_compatible(&self, model: &ModelGraph) -> Result<()> {
        if self.vector.dim() != model.num_classes() {
            return Err(Error::shape(format!(
                "key vector has {} entries, model has {} classes",
                self.vector.dim(),
                model.num_classes()
            )));
        }
        let want = model.bn_state().channels();
        let have: Vec<usize> = self.wm_bn.iter().map(|m| m.mean.len()).collect();
        if want != have {
            return Err(Error::shape(format!("key BN channels {have:?}, model has {want:?}")));
        }
        if self.image_shape != model.input_shape() {
            return Err(Error::shape("key watermark dims differ from the model input".to_string()));
        }
        Ok(())
    }

    /// Load the reference image next to `key_path` and check its digest.
    pub fn reference_image(&self, key_path: &Path) -> Result<WatermarkImage> {
        let path = if self.image_path.is_absolute() {
            self.image_path.clone()
        } else {
            key_path.parent().unwrap_or(Path::new(".")).join(&self.image_path)
        };
        let img = load_watermark(&path, self.image_shape)?;
        if img.digest() != self.image_digest {
            return Err(Error::Corrupt {
                path,
                detail: "watermark image does not match the digest recorded in the key".into(),
            });
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Metrics of one reconstruction against its reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Clamped, 8-bit-quantized planar image exactly as it would be written.
    pub image: Vec<f32>,
    pub ssim: f64,
    pub mse: f64,
    pub psnr: f64,
}

/// Emit `T(v)` from `model` with `wm_bn` installed and score it against
/// `reference`. `model` itself is left untouched.
pub fn reconstruct(
    model: &ModelGraph,
    vector: &ExtractionVector,
    wm_bn: &[Moments],
    reference: &WatermarkImage,
    cfg: &SsimConfig,
) -> Result<Reconstruction> {
    let mut m = model.clone();
    m.bn_state_mut().install(BnMode::Watermark, wm_bn)?;
    let t = build_transposed(&m)?;
    if vector.dim() != t.input_dim() {
        return Err(Error::shape(format!(
            "vector has {} entries, model has {} classes",
            vector.dim(),
            t.input_dim()
        )));
    }
    let out = t.reconstruct(&mut m, &vector.to_tensor())?;
    let image: Vec<f32> = out.item(0).iter().map(|v| (v * 255.0).round() / 255.0).collect();
    let dims = reference.dims();
    let s = ssim(&image, &reference.data, dims, cfg)?;
    let e = mse(&image, &reference.data)?;
    Ok(Reconstruction {
        image,
        ssim: s,
        mse: e,
        psnr: psnr_from_mse(e, cfg.dynamic_range),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checkpoint_id: String,
    pub key_id: String,
    pub tau: f64,
    pub ssim: f64,
    pub mse: f64,
    pub psnr: f64,
    pub verdict: Verdict,
    pub image_path: Option<PathBuf>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Verify `key` against an in-memory checkpoint. Writes the emitted image
/// to `image_out` when given.
pub fn verify(
    ckpt: &Checkpoint,
    key: &WatermarkKey,
    reference: &WatermarkImage,
    tau: f64,
    image_out: Option<&Path>,
) -> Result<VerificationReport> {
    let model = ckpt.to_model()?;
    key.check_compatible(&model)?;
    let rec = reconstruct(&model, &key.vector, &key.wm_bn, reference, &SsimConfig::default())?;
    if let Some(p) = image_out {
        save_planar_png(&rec.image, reference.dims(), p)?;
    }
    Ok(VerificationReport {
        checkpoint_id: format!("round-{}-{}", ckpt.round, &params_digest(&ckpt.params)[..12]),
        key_id: format!("client-{}-{}", key.client_id, &key.image_digest[..12.min(key.image_digest.len())]),
        tau,
        ssim: rec.ssim,
        mse: rec.mse,
        psnr: rec.psnr,
        verdict: if rec.ssim >= tau { Verdict::Pass } else { Verdict::Fail },
        image_path: image_out.map(Path::to_path_buf),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    })
}

/// Verify a checkpoint file against a key file. The checkpoint is only read.
pub fn verify_files(ckpt: &Path, key: &Path, tau: f64, image_out: Option<&Path>) -> Result<VerificationReport> {
    let c = Checkpoint::load(ckpt)?;
    let k = WatermarkKey::load(key)?;
    let reference = k.reference_image(key)?;
    verify(&c, &k, &reference, tau, image_out)
}

fn params_digest(params: &[f32]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in params {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchConfig};
    use crate::watermark::{generate_extraction_vector, glyph_watermark};

    fn setup(dir: &Path) -> (Checkpoint, WatermarkKey, PathBuf) {
        let arch = ArchConfig::tiny_vgg(InputShape::new(28, 28, 1), 10);
        let model = build_model(&arch, 1).unwrap();
        let wm = glyph_watermark(0, arch.input);
        wm.save_png(&dir.join("client_0.png")).unwrap();
        let client = ClientState {
            id: 0,
            shard: vec![0],
            vector: generate_extraction_vector(4, 10).unwrap(),
            watermark: wm,
            wm_bn: model.bn_state().snapshot(BnMode::Watermark),
            sigma: 0.3,
            seed: 1,
        };
        let key = WatermarkKey::from_client(&client, "client_0.png".into(), 3);
        let kp = dir.join("client_0.key");
        key.save(&kp).unwrap();
        (Checkpoint::from_model(&model, 3), key, kp)
    }

    #[test]
    fn key_round_trip_and_damage() {
        let dir = tempfile::tempdir().unwrap();
        let (_, key, kp) = setup(dir.path());
        assert_eq!(WatermarkKey::load(&kp).unwrap(), key);
        let bytes = std::fs::read(&kp).unwrap();
        std::fs::write(&kp, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(WatermarkKey::load(&kp), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn key_for_other_architecture_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let (_, key, _) = setup(dir.path());
        let big = build_model(&ArchConfig::tiny_vgg(InputShape::new(28, 28, 1), 100), 0).unwrap();
        assert!(matches!(key.check_compatible(&big), Err(Error::Shape(_))));
    }

    #[test]
    fn verdict_follows_threshold_and_emission_is_faithful() {
        let dir = tempfile::tempdir().unwrap();
        let (ckpt, _, kp) = setup(dir.path());
        let ckpt_path = dir.path().join("ckpt.bin");
        ckpt.save(&ckpt_path).unwrap();
        let before = std::fs::read(&ckpt_path).unwrap();
        let out = dir.path().join("wm_prime.png");
        let r = verify_files(&ckpt_path, &kp, 0.5, Some(&out)).unwrap();
        assert_eq!(r.verdict == Verdict::Pass, r.ssim >= 0.5);
        let again = verify_files(&ckpt_path, &kp, r.ssim, None).unwrap();
        assert_eq!(again.ssim, r.ssim);
        assert_eq!(again.verdict, Verdict::Pass);
        assert_eq!(std::fs::read(&ckpt_path).unwrap(), before);
        // the written file reproduces the reported SSIM
        let key = WatermarkKey::load(&kp).unwrap();
        let reference = key.reference_image(&kp).unwrap();
        let written = load_watermark(&out, key.image_shape).unwrap();
        let s = ssim(&written.data, &reference.data, reference.dims(), &SsimConfig::default()).unwrap();
        assert!((s - r.ssim).abs() < 1e-4);
    }

    #[test]
    fn tampered_reference_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (_, _, kp) = setup(dir.path());
        glyph_watermark(1, InputShape::new(28, 28, 1))
            .save_png(&dir.path().join("client_0.png"))
            .unwrap();
        let key = WatermarkKey::load(&kp).unwrap();
        assert!(matches!(key.reference_image(&kp), Err(Error::Corrupt { .. })));
    }
}
