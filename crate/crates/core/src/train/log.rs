use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One epoch of a training run. Adversarial columns stay empty for supervised runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean training objective (MSE, aleatoric or generator total).
    pub train_loss: f64,
    pub train_mse: f64,
    pub train_adversarial: Option<f64>,
    pub train_d_loss: Option<f64>,
    pub val_mse: f64,
    /// Monitored validation objective of the generator.
    pub val_loss: f64,
    pub val_d_loss: Option<f64>,
    pub lr_g: f64,
    pub lr_d: Option<f64>,
    pub d_updates: usize,
    pub iterations: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn push(&mut self, row: EpochRow) {
        debug_assert!(self.rows.last().is_none_or(|r| r.epoch < row.epoch));
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Loss columns only, for run-to-run comparisons that ignore timing.
    pub fn loss_trace(&self) -> Vec<(usize, f64, f64, Option<f64>)> {
        self.rows
            .iter()
            .map(|r| (r.epoch, r.train_loss, r.val_loss, r.train_d_loss))
            .collect()
    }
}
