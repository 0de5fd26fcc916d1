//! Checkpoint directory: `checkpoint.json` (labels, shape, training config,
//! log and metric report) next to `weights.bin` (little-endian f64, image
//! projection then text projection).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{DualEncoder, EncoderMode, EncoderShape};
use super::metrics::MetricReport;
use super::train::{TrainingConfig, TrainingLog};
use super::EmotionError;
use crate::digest::sha256_hex;

pub const CHECKPOINT_FORMAT: u32 = 1;
const META_FILE: &str = "checkpoint.json";
const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub labels: Vec<String>,
    pub prompt_template: String,
    pub shape: EncoderShape,
    pub mode: EncoderMode,
    pub training: Option<TrainingConfig>,
    pub log: Option<TrainingLog>,
    pub report: Option<MetricReport>,
    pub weights_sha256: String,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EmotionError {
    EmotionError::Checkpoint(format!("{}: {e}", path.display()))
}

pub fn save_checkpoint(
    dir: &Path,
    encoder: &DualEncoder,
    training: Option<&TrainingConfig>,
    log: Option<&TrainingLog>,
    report: Option<&MetricReport>,
) -> Result<CheckpointMeta, EmotionError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut bytes = Vec::with_capacity((encoder.image_weights.len() + encoder.text_weights.len()) * 8);
    for w in encoder.image_weights.iter().chain(&encoder.text_weights) {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    fs::write(&weights_path, &bytes).map_err(|e| io_err(&weights_path, e))?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        labels: encoder.labels.clone(),
        prompt_template: encoder.prompt_template.clone(),
        shape: encoder.shape.clone(),
        mode: encoder.mode.clone(),
        training: training.cloned(),
        log: log.cloned(),
        report: report.cloned(),
        weights_sha256: sha256_hex(&bytes),
    };
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| io_err(&meta_path, e))?;
    fs::write(&meta_path, text + "\n").map_err(|e| io_err(&meta_path, e))?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(DualEncoder, CheckpointMeta), EmotionError> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| io_err(&meta_path, e))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(io_err(&meta_path, format!("unsupported format {}", meta.format)));
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights_path).map_err(|e| io_err(&weights_path, e))?;
    if sha256_hex(&bytes) != meta.weights_sha256 {
        return Err(io_err(&weights_path, "weights do not match the recorded digest"));
    }
    let n_image = meta.shape.embed_dim * meta.shape.image_dim();
    let n_text = meta.shape.embed_dim * meta.shape.text_dim;
    if bytes.len() != (n_image + n_text) * 8 {
        return Err(io_err(&weights_path, format!("expected {} weights", n_image + n_text)));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let encoder = DualEncoder::from_weights(
        meta.labels.clone(),
        &meta.prompt_template,
        meta.shape.clone(),
        meta.mode.clone(),
        values[..n_image].to_vec(),
        values[n_image..].to_vec(),
    );
    Ok((encoder, meta))
}
