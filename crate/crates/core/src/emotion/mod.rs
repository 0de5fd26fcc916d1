//! Facial emotion recognition.
//!
//! A backend maps a face crop to a probability distribution over a fixed
//! label set. The shipped backend is a small image-text [`DualEncoder`]: in
//! zero-shot mode it matches faces against prompts such as "a manga face
//! showing joy"; fine-tuning trains both projections with Adam on a labelled
//! face dataset.

mod checkpoint;
mod encoder;
mod metrics;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EmotionDataset, EmotionDatasetEntry, Page, Split};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
pub use encoder::{image_features, text_features, DualEncoder, EncoderMode, EncoderShape, Gradients, DEFAULT_PROMPT_TEMPLATE};
pub use metrics::{ClassMetrics, MetricReport};
pub use train::{evaluate_examples, finetune, predict_indices, EpochLog, TrainingConfig, TrainingLog};

#[derive(Debug, Error)]
pub enum EmotionError {
    #[error("emotion backend error: {0}")]
    Backend(String),
    #[error("face {region_id} ({x},{y} {width}x{height}) lies outside the {image_width}x{image_height} page image")]
    CropOutOfBounds {
        region_id: String,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
        image_width: u32,
        image_height: u32,
    },
    #[error("the {0} split is empty")]
    EmptySplit(String),
    #[error("training diverged in epoch {epoch} (loss {loss})")]
    DivergedTraining { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("label {0:?} is not in the backend's label set")]
    UnknownLabel(String),
    #[error("cannot read image {path}: {message}")]
    Image { path: String, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Anything that can score a face crop against a label set.
pub trait EmotionBackend: Send + Sync {
    fn id(&self) -> String;
    fn labels(&self) -> &[String];
    /// One probability per label, in `labels()` order.
    fn probabilities(&self, face: &RgbImage) -> Result<Vec<f64>, EmotionError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionPrediction {
    pub region_id: String,
    pub character: Option<String>,
    pub distribution: BTreeMap<String, f64>,
    pub top_label: String,
}

impl EmotionPrediction {
    /// Normalizes `probabilities`; the top label is the argmax, ties going to
    /// the lexicographically smallest label.
    pub fn new(region_id: &str, character: Option<String>, labels: &[String], probabilities: &[f64]) -> Result<Self, EmotionError> {
        if labels.len() != probabilities.len() || labels.is_empty() {
            return Err(EmotionError::Backend(format!(
                "{} probabilities for {} labels",
                probabilities.len(),
                labels.len()
            )));
        }
        let total: f64 = probabilities.iter().sum();
        if !(total > 0.0 && total.is_finite()) || probabilities.iter().any(|p| *p < 0.0) {
            return Err(EmotionError::Backend(format!("invalid distribution {probabilities:?}")));
        }
        let distribution: BTreeMap<String, f64> = labels
            .iter()
            .zip(probabilities)
            .map(|(l, p)| (l.clone(), p / total))
            .collect();
        let mut top: Option<(&String, f64)> = None;
        for (label, p) in &distribution {
            if top.is_none_or(|(_, best)| *p > best) {
                top = Some((label, *p));
            }
        }
        let top_label = top.expect("non-empty").0.clone();
        Ok(EmotionPrediction {
            region_id: region_id.to_string(),
            character,
            distribution,
            top_label,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.distribution[&self.top_label]
    }
}

pub fn open_image(path: &Path) -> Result<RgbImage, EmotionError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| EmotionError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

/// One prediction per face region of `page`, in annotation order.
pub fn classify_faces(page: &Page, page_image: &RgbImage, backend: &dyn EmotionBackend) -> Result<Vec<EmotionPrediction>, EmotionError> {
    let (iw, ih) = page_image.dimensions();
    page.face_regions
        .iter()
        .map(|face| {
            let b = &face.bbox;
            if b.width == 0 || b.height == 0 || !b.fits_within(iw, ih) {
                return Err(EmotionError::CropOutOfBounds {
                    region_id: face.region_id.clone(),
                    x: b.x,
                    y: b.y,
                    width: b.width,
                    height: b.height,
                    image_width: iw,
                    image_height: ih,
                });
            }
            let crop = image::imageops::crop_imm(page_image, b.x, b.y, b.width, b.height).to_image();
            let probabilities = backend.probabilities(&crop)?;
            EmotionPrediction::new(&face.region_id, face.character.clone(), backend.labels(), &probabilities)
        })
        .collect()
}

/// Load face crops of `entries` as `(features, label index)` pairs.
pub fn load_examples(
    root: &Path,
    entries: &[&EmotionDatasetEntry],
    labels: &[String],
    side: u32,
) -> Result<Vec<(Vec<f64>, usize)>, EmotionError> {
    entries
        .iter()
        .map(|e| {
            let y = labels
                .iter()
                .position(|l| *l == e.label)
                .ok_or_else(|| EmotionError::UnknownLabel(e.label.clone()))?;
            let img = open_image(&root.join(&e.image_ref))?;
            Ok((image_features(&img, side), y))
        })
        .collect()
}

/// Score any backend on dataset entries.
pub fn evaluate_backend(backend: &dyn EmotionBackend, root: &Path, entries: &[&EmotionDatasetEntry]) -> Result<MetricReport, EmotionError> {
    if entries.is_empty() {
        return Err(EmotionError::EmptySplit("evaluation".into()));
    }
    let labels = backend.labels();
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for e in entries {
        let y = labels
            .iter()
            .position(|l| *l == e.label)
            .ok_or_else(|| EmotionError::UnknownLabel(e.label.clone()))?;
        let img = open_image(&root.join(&e.image_ref))?;
        let p = EmotionPrediction::new(&e.image_ref, None, labels, &backend.probabilities(&img)?)?;
        truth.push(y);
        predicted.push(labels.iter().position(|l| *l == p.top_label).expect("label from set"));
    }
    Ok(MetricReport::from_predictions(labels, &truth, &predicted))
}

/// Fine-tune `base` on the train split of `dataset`, using the val split for
/// per-epoch monitoring, and report test-split metrics.
pub fn finetune_dataset(
    root: &Path,
    dataset: &EmotionDataset,
    base: DualEncoder,
    config: &TrainingConfig,
) -> Result<(DualEncoder, TrainingLog, MetricReport), EmotionError> {
    let side = base.shape.input_side;
    let load = |split| load_examples(root, &dataset.split(split), &dataset.labels, side);
    let train = load(Split::Train)?;
    if train.is_empty() {
        return Err(EmotionError::EmptySplit("train".into()));
    }
    let val = load(Split::Val)?;
    let test = load(Split::Test)?;
    let (encoder, log) = finetune(base, &train, &val, config)?;
    let report = evaluate_examples(&encoder, &test)?;
    Ok((encoder, log, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BoundingBox, FaceRegion};

    struct Fixed(Vec<String>, Vec<f64>);

    impl EmotionBackend for Fixed {
        fn id(&self) -> String {
            "fixed".into()
        }
        fn labels(&self) -> &[String] {
            &self.0
        }
        fn probabilities(&self, _: &RgbImage) -> Result<Vec<f64>, EmotionError> {
            Ok(self.1.clone())
        }
    }

    fn labels() -> Vec<String> {
        vec!["sad".into(), "happy".into(), "angry".into()]
    }

    #[test]
    fn ties_go_to_the_smallest_label() {
        let p = EmotionPrediction::new("f", None, &labels(), &[0.4, 0.4, 0.2]).unwrap();
        assert_eq!(p.top_label, "happy");
        let p = EmotionPrediction::new("f", None, &labels(), &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.top_label, "angry");
        assert!((p.distribution.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn page(faces: Vec<FaceRegion>) -> Page {
        Page {
            page_index: 0,
            image_ref: String::new(),
            width: 20,
            height: 20,
            face_regions: faces,
        }
    }

    fn face(id: &str, x: u32) -> FaceRegion {
        FaceRegion {
            region_id: id.into(),
            bbox: BoundingBox { x, y: 0, width: 10, height: 10 },
            character: None,
        }
    }

    #[test]
    fn classify_checks_bounds() {
        let img = RgbImage::new(20, 20);
        let backend = Fixed(labels(), vec![0.1, 0.7, 0.2]);
        assert!(classify_faces(&page(vec![]), &img, &backend).unwrap().is_empty());
        let out = classify_faces(&page(vec![face("a", 0), face("b", 10)]), &img, &backend).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].top_label, "happy");
        assert!(matches!(
            classify_faces(&page(vec![face("c", 15)]), &img, &backend),
            Err(EmotionError::CropOutOfBounds { .. })
        ));
    }
}
