//! Losses, optimizer, schedules and the supervised and adversarial loops.

mod adam;
mod batch;
mod gan;
mod log;
pub mod losses;
mod schedule;
mod supervised;

pub use adam::{Adam, AdamConfig};
pub use batch::{batch_indices, sequential_batches, to_array4, Batch};
pub use gan::{train_gan, GanOutcome};
pub use log::{EpochRow, TrainLog};
pub use losses::{
    loss_adversarial, loss_aleatoric, loss_cgan, loss_generator_total, loss_l2, loss_mse, AdversarialForm,
};
pub use schedule::{simulate_schedule, EarlyStopping, PlateauScheduler, StopVerdict};
pub use supervised::{evaluate_generator, train_supervised, SupervisedOutcome, ValidationScores};

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub lambda: f64,
    pub d_update_every: usize,
    pub seed: u64,
    pub epsilon_log: f64,
    pub adversarial_form: AdversarialForm,
    /// Hard cap on optimizer iterations across all epochs.
    pub max_iterations: Option<usize>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 32,
            lr_generator: 1e-3,
            lr_discriminator: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            early_stop_patience: 15,
            plateau_patience: 4,
            plateau_factor: 0.1,
            lambda: 1e6,
            d_update_every: 2,
            seed: 0,
            epsilon_log: 1e-7,
            adversarial_form: AdversarialForm::Saturating,
            max_iterations: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str| Err(Error::Config(format!("`{k}` must be positive")));
        if self.max_epochs == 0 {
            return bad("max_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.lr_generator > 0.0) {
            return bad("lr_generator");
        }
        if !(self.lr_discriminator > 0.0) {
            return bad("lr_discriminator");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("`plateau_factor` must lie in (0, 1)".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("`lambda` must be non-negative".into()));
        }
        if self.d_update_every == 0 {
            return bad("d_update_every");
        }
        if !(self.epsilon_log > 0.0 && self.epsilon_log < 0.5) {
            return Err(Error::Config("`epsilon_log` must lie in (0, 0.5)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("`beta1` and `beta2` must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Random stream for one epoch; independent of earlier epochs so runs can resume.
    pub fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        rng
    }
}

/// Where a run writes checkpoints and logs.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Continue from the last saved epoch in `dir` if one exists.
    pub resume: bool,
    /// Recorded in checkpoint sidecars for denormalization.
    pub norm_max: f64,
}

impl RunOutput {
    pub fn in_memory(norm_max: f64) -> Self {
        Self {
            dir: None,
            resume: false,
            norm_max,
        }
    }

    pub fn to_dir(dir: impl Into<PathBuf>, norm_max: f64) -> Self {
        Self {
            dir: Some(dir.into()),
            resume: false,
            norm_max,
        }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

fn check_splits(train: &[crate::data::Sample], val: &[crate::data::Sample]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    Ok(())
}
