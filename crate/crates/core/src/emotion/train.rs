use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{softmax, DualEncoder, EncoderMode};
use super::metrics::MetricReport;
use super::EmotionError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// L2 penalty added to the gradient before the Adam moments.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_epsilon: 1e-6,
            weight_decay: 0.001,
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), EmotionError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_epsilon", self.adam_epsilon),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EmotionError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.adam_beta1 >= 1.0 || self.adam_beta2 >= 1.0 {
            return Err(EmotionError::InvalidConfig("Adam betas must be below 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(EmotionError::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub val_weighted_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], c: &TrainingConfig) {
        self.step += 1;
        let bias1 = 1.0 - c.adam_beta1.powi(self.step);
        let bias2 = 1.0 - c.adam_beta2.powi(self.step);
        let mut i = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, gw) in p.iter_mut().zip(g.iter()) {
                let g = gw + c.weight_decay * *w;
                self.m[i] = c.adam_beta1 * self.m[i] + (1.0 - c.adam_beta1) * g;
                self.v[i] = c.adam_beta2 * self.v[i] + (1.0 - c.adam_beta2) * g * g;
                let m_hat = self.m[i] / bias1;
                let v_hat = self.v[i] / bias2;
                *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.adam_epsilon);
                i += 1;
            }
        }
    }
}

/// Predicted label index per example: argmax with ties to the smaller index.
pub fn predict_indices(encoder: &DualEncoder, examples: &[(Vec<f64>, usize)]) -> Vec<usize> {
    examples
        .iter()
        .map(|(x, _)| {
            let p = softmax(&encoder.logits(x));
            let mut best = 0;
            for (k, pk) in p.iter().enumerate() {
                if *pk > p[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn evaluate_examples(encoder: &DualEncoder, examples: &[(Vec<f64>, usize)]) -> Result<MetricReport, EmotionError> {
    if examples.is_empty() {
        return Err(EmotionError::EmptySplit("evaluation".into()));
    }
    let truth: Vec<usize> = examples.iter().map(|(_, y)| *y).collect();
    Ok(MetricReport::from_predictions(&encoder.labels, &truth, &predict_indices(encoder, examples)))
}

/// Fine-tune both projections with Adam on mini-batches of `train`,
/// reshuffled each epoch from `config.seed`.
pub fn finetune(
    base: DualEncoder,
    train: &[(Vec<f64>, usize)],
    val: &[(Vec<f64>, usize)],
    config: &TrainingConfig,
) -> Result<(DualEncoder, TrainingLog), EmotionError> {
    config.validate()?;
    if train.is_empty() {
        return Err(EmotionError::EmptySplit("train".into()));
    }
    let mut encoder = base;
    encoder.mode = EncoderMode::FineTuned;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(encoder.image_weights.len() + encoder.text_weights.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Vec<f64>, usize)> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = encoder.loss_and_gradients(&batch);
            if !loss.is_finite() {
                return Err(EmotionError::DivergedTraining { epoch, loss });
            }
            total += loss;
            batches += 1;
            adam.update(
                &mut [&mut encoder.image_weights, &mut encoder.text_weights],
                &[&grads.image, &grads.text],
                config,
            );
        }
        let train_loss = total / batches as f64;
        let val_weighted_f1 = if val.is_empty() {
            None
        } else {
            Some(evaluate_examples(&encoder, val)?.weighted)
        };
        log::info!("epoch {epoch}: train loss {train_loss:.4}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_weighted_f1,
        });
    }
    Ok((encoder, log))
}
