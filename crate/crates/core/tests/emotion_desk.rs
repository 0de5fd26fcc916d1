use std::path::PathBuf;

use m2m_core::corpus::{load_emotion_dataset, Split};
use m2m_core::emotion::{
    evaluate_backend, finetune_dataset, load_checkpoint, save_checkpoint, DualEncoder, EncoderShape,
    TrainingConfig, DEFAULT_PROMPT_TEMPLATE,
};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/emotion")
}

/// Paper hyperparameters except the learning rate: the desk encoder starts
/// from random projections rather than a pretrained model.
pub fn desk_config() -> TrainingConfig {
    TrainingConfig {
        learning_rate: 1e-2,
        ..TrainingConfig::default()
    }
}

#[test]
fn finetuning_reduces_loss_and_beats_zero_shot() {
    let root = fixture();
    let dataset = load_emotion_dataset(&root).unwrap();
    assert_eq!(dataset.labels, ["happy", "sad", "surprise"]);
    assert_eq!(dataset.entries.len(), 30);
    let base = DualEncoder::base(dataset.labels.clone(), DEFAULT_PROMPT_TEMPLATE, EncoderShape::default(), 0);
    let test = dataset.split(Split::Test);
    let zero_shot = evaluate_backend(&base, &root, &test).unwrap();
    let (tuned, log, report) = finetune_dataset(&root, &dataset, base, &desk_config()).unwrap();
    assert_eq!(log.epochs.len(), 10);
    eprintln!("{:?}", log.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>());
    eprintln!("zero-shot {}\nfine-tuned {}", zero_shot.table(), report.table());
    assert!(log.final_loss().unwrap() < log.first_loss().unwrap());
    assert!(report.weighted > zero_shot.weighted);
    assert_eq!(evaluate_backend(&tuned, &root, &test).unwrap(), report);

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &tuned, Some(&desk_config()), Some(&log), Some(&report)).unwrap();
    let (loaded, meta) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded, tuned);
    assert_eq!(meta.report.unwrap(), report);
}
