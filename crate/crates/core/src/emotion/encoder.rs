//! Image-text dual encoder.
//!
//! Faces are reduced to a standardized grayscale thumbnail and label prompts
//! to a hashed bag of words and character trigrams. Each side has a linear
//! projection into a shared embedding space; class logits are scaled cosine
//! similarities between the face embedding and every label prompt embedding.

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmotionBackend, EmotionError};
use crate::digest::sha256_hex;

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a manga face showing {label}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderShape {
    /// Faces are resized to `input_side` x `input_side`.
    pub input_side: u32,
    pub text_dim: usize,
    pub embed_dim: usize,
    pub logit_scale: f64,
}

impl Default for EncoderShape {
    fn default() -> Self {
        EncoderShape {
            input_side: 24,
            text_dim: 256,
            embed_dim: 32,
            logit_scale: 10.0,
        }
    }
}

impl EncoderShape {
    pub fn image_dim(&self) -> usize {
        (self.input_side * self.input_side) as usize
    }
}

/// Pad `face` to a square with its mean colour, resize, convert to gray and
/// standardize to zero mean and unit variance.
pub fn image_features(face: &RgbImage, side: u32) -> Vec<f64> {
    let (w, h) = face.dimensions();
    let n = (w as u64 * h as u64).max(1) as f64;
    let mut sum = [0f64; 3];
    for p in face.pixels() {
        for c in 0..3 {
            sum[c] += p[c] as f64;
        }
    }
    let mean = Rgb(sum.map(|s| (s / n).round() as u8));
    let edge = w.max(h).max(1);
    let mut square = RgbImage::from_pixel(edge, edge, mean);
    image::imageops::overlay(&mut square, face, ((edge - w) / 2) as i64, ((edge - h) / 2) as i64);
    let small = image::imageops::resize(&square, side, side, FilterType::Triangle);
    let gray: Vec<f64> = small
        .pixels()
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect();
    let m = gray.iter().sum::<f64>() / gray.len() as f64;
    let var = gray.iter().map(|g| (g - m).powi(2)).sum::<f64>() / gray.len() as f64;
    let sd = var.sqrt().max(1e-6);
    gray.into_iter().map(|g| (g - m) / sd).collect()
}

/// Signed feature hashing of lowercase words and their character trigrams,
/// L2-normalized.
pub fn text_features(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0f64; dim];
    let mut add = |token: &str| {
        let h = sha256_hex(token.as_bytes());
        let bits = u64::from_str_radix(&h[..16], 16).expect("hex digest");
        let sign = if bits >> 63 == 1 { -1.0 } else { 1.0 };
        v[(bits % dim as u64) as usize] += sign;
    };
    for word in text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        add(&format!("w:{word}"));
        let padded: Vec<char> = format!("<{word}>").chars().collect();
        for tri in padded.windows(3) {
            add(&format!("c:{}", tri.iter().collect::<String>()));
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Gradients with the same layout as the encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    ZeroShot,
    FineTuned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub shape: EncoderShape,
    pub labels: Vec<String>,
    pub prompt_template: String,
    pub mode: EncoderMode,
    /// `embed_dim x image_dim`, row major.
    pub image_weights: Vec<f64>,
    /// `embed_dim x text_dim`, row major.
    pub text_weights: Vec<f64>,
    label_features: Vec<Vec<f64>>,
}

impl DualEncoder {
    /// Untrained encoder with seeded uniform weights, used for zero-shot matching
    /// and as the starting point of fine-tuning.
    pub fn base(labels: Vec<String>, prompt_template: &str, shape: EncoderShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| -> Vec<f64> {
            let a = (3.0 / cols as f64).sqrt();
            (0..rows * cols).map(|_| rng.random_range(-a..a)).collect()
        };
        let image_weights = init(shape.embed_dim, shape.image_dim());
        let text_weights = init(shape.embed_dim, shape.text_dim);
        Self::from_weights(labels, prompt_template, shape, EncoderMode::ZeroShot, image_weights, text_weights)
    }

    pub fn from_weights(
        labels: Vec<String>,
        prompt_template: &str,
        shape: EncoderShape,
        mode: EncoderMode,
        image_weights: Vec<f64>,
        text_weights: Vec<f64>,
    ) -> Self {
        let label_features = labels
            .iter()
            .map(|l| text_features(&prompt_template.replace("{label}", l), shape.text_dim))
            .collect();
        DualEncoder {
            shape,
            labels,
            prompt_template: prompt_template.to_string(),
            mode,
            image_weights,
            text_weights,
            label_features,
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.labels
            .iter()
            .map(|l| self.prompt_template.replace("{label}", l))
            .collect()
    }

    fn label_embeddings(&self) -> Vec<(Vec<f64>, f64)> {
        self.label_features
            .iter()
            .map(|t| {
                let v = matvec(&self.text_weights, self.shape.embed_dim, t);
                let n = norm(&v);
                (v, n)
            })
            .collect()
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let u = matvec(&self.image_weights, self.shape.embed_dim, features);
        let nu = norm(&u);
        self.label_embeddings()
            .iter()
            .map(|(v, nv)| self.shape.logit_scale * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
            .collect()
    }

    /// Mean cross-entropy over `batch` of `(features, label index)` and its gradient.
    pub fn loss_and_gradients(&self, batch: &[(Vec<f64>, usize)]) -> (f64, Gradients) {
        let d = self.shape.embed_dim;
        let fi = self.shape.image_dim();
        let ft = self.shape.text_dim;
        let s = self.shape.logit_scale;
        let m = batch.len().max(1) as f64;
        let labels = self.label_embeddings();
        let v_hat: Vec<Vec<f64>> = labels.iter().map(|(v, n)| v.iter().map(|x| x / n).collect()).collect();
        let mut grad_image = vec![0f64; d * fi];
        let mut grad_v_hat = vec![vec![0f64; d]; labels.len()];
        let mut loss = 0.0;
        for (x, y) in batch {
            let u = matvec(&self.image_weights, d, x);
            let nu = norm(&u);
            let u_hat: Vec<f64> = u.iter().map(|a| a / nu).collect();
            let z: Vec<f64> = v_hat
                .iter()
                .map(|v| s * u_hat.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let p = softmax(&z);
            loss -= p[*y].max(1e-300).ln();
            let g: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(k, pk)| (pk - if k == *y { 1.0 } else { 0.0 }) / m)
                .collect();
            // through the image side
            let mut du_hat = vec![0f64; d];
            for (k, gk) in g.iter().enumerate() {
                for j in 0..d {
                    du_hat[j] += s * gk * v_hat[k][j];
                    grad_v_hat[k][j] += s * gk * u_hat[j];
                }
            }
            let dot: f64 = u_hat.iter().zip(&du_hat).map(|(a, b)| a * b).sum();
            for j in 0..d {
                let du = (du_hat[j] - u_hat[j] * dot) / nu;
                if du != 0.0 {
                    let row = &mut grad_image[j * fi..(j + 1) * fi];
                    row.iter_mut().zip(x).for_each(|(gw, xi)| *gw += du * xi);
                }
            }
        }
        let mut grad_text = vec![0f64; d * ft];
        for (k, ((_, nv), t)) in labels.iter().zip(&self.label_features).enumerate() {
            let dot: f64 = v_hat[k].iter().zip(&grad_v_hat[k]).map(|(a, b)| a * b).sum();
            for j in 0..d {
                let dv = (grad_v_hat[k][j] - v_hat[k][j] * dot) / nv;
                let row = &mut grad_text[j * ft..(j + 1) * ft];
                row.iter_mut().zip(t).for_each(|(gw, ti)| *gw += dv * ti);
            }
        }
        (
            loss / m,
            Gradients {
                image: grad_image,
                text: grad_text,
            },
        )
    }
}

impl EmotionBackend for DualEncoder {
    fn id(&self) -> String {
        let mode = match self.mode {
            EncoderMode::ZeroShot => "zero-shot",
            EncoderMode::FineTuned => "fine-tuned",
        };
        let mut weights = Vec::with_capacity((self.image_weights.len() + self.text_weights.len()) * 8);
        for w in self.image_weights.iter().chain(&self.text_weights) {
            weights.extend_from_slice(&w.to_le_bytes());
        }
        format!("dual-encoder/{mode}@{}", &sha256_hex(&weights)[..12])
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn probabilities(&self, face: &RgbImage) -> Result<Vec<f64>, EmotionError> {
        let features = image_features(face, self.shape.input_side);
        Ok(softmax(&self.logits(&features)))
    }
}
