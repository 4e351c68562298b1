//! Capacity experiments: a random bit string is drawn as a dot-code image,
//! embedded as client 0's watermark, then read back from the trained
//! global model and compared bit by bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{dotcode_payload, run_federation, FederationConfig, WatermarkSource};
use crate::metrics::{ber, SsimConfig};
use crate::model::ArchConfig;
use crate::verify::reconstruct;
use crate::watermark::{bits_to_hex, decode_planar, dotcode_decode, dotcode_encode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub bits: usize,
    pub payload_hex: String,
    /// Encode then decode with no model in between.
    pub codec_ber: f64,
    /// Bits read back from the trained model.
    pub ber: f64,
    pub ssim: f64,
    pub accuracy: f64,
}

/// Run the federation in `cfg` (which must use dot-code watermarks) and
/// measure the bit error rate of client 0's payload.
pub fn run_capacity(
    cfg: &FederationConfig,
    arch: &ArchConfig,
    train: &Dataset,
    test: &Dataset,
    run_dir: Option<&Path>,
) -> Result<CapacityReport> {
    let WatermarkSource::DotCode { bits } = cfg.watermarks else {
        return Err(Error::invalid("capacity runs need dot-code watermarks"));
    };
    let sent = dotcode_payload(cfg.seed, 0, bits);
    let shape = arch.input;
    let encoded = dotcode_encode(&sent, shape.height, shape.width, shape.channels)?;
    let codec_ber = ber(&sent, &dotcode_decode(&encoded, bits)?)?;
    let out = run_federation(cfg, arch, train, test, run_dir)?;
    let client = &out.clients[0];
    let rec = reconstruct(&out.global, &client.vector, &client.wm_bn, &client.watermark, &SsimConfig::default())?;
    let received = decode_planar(&rec.image, client.watermark.dims(), bits)?;
    Ok(CapacityReport {
        bits,
        payload_hex: bits_to_hex(&sent),
        codec_ber,
        ber: ber(&sent, &received)?,
        ssim: rec.ssim,
        accuracy: out.final_accuracy,
    })
}
