//! The fixture models and data shipped with the crate.

use std::path::PathBuf;

use qnet_core::netmodel::NetworkModel;
use qnet_core::synthetic::{fixture_model, train_classifier, SyntheticTask, TrainConfig};
use qnet_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Weight seed of both fixture models.
pub const MODEL_SEED: u64 = 0;
/// Seed of the synthetic 10-class task.
pub const TASK_SEED: u64 = 7;
pub const TRAIN_SAMPLES: usize = 4000;
pub const TRAIN_SEED: u64 = 1;
pub const CALIB_SAMPLES: usize = 250;
pub const CALIB_SEED: u64 = 2;
/// Seed of held-out evaluation draws; never used for training or calibration.
pub const HELD_OUT_SEED: u64 = 3;

pub fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn seeded_path() -> PathBuf {
    dir().join("seeded.qnet")
}

pub fn trained_path() -> PathBuf {
    dir().join("trained.qnet")
}

pub fn calib_path() -> PathBuf {
    dir().join("calib250.qcal")
}

pub fn task() -> SyntheticTask {
    SyntheticTask::new(TASK_SEED)
}

/// Labelled draws from the task with their own seed.
pub fn draws(seed: u64, n: usize) -> (Vec<qnet_core::Tensor>, Vec<usize>) {
    task().batch(&mut ChaCha8Rng::seed_from_u64(seed), n)
}

pub fn seeded_model() -> NetworkModel {
    fixture_model(MODEL_SEED)
}

/// Trains the seeded model on the task. Returns the model and epoch losses.
pub fn train() -> Result<(NetworkModel, Vec<f64>)> {
    let (xs, ys) = draws(TRAIN_SEED, TRAIN_SAMPLES);
    train_classifier(&seeded_model(), &xs, &ys, &TrainConfig::default())
}
