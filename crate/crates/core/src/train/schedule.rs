use serde::{Deserialize, Serialize};

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve for `patience` consecutive epochs, then restarts the count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss; returns the new learning rate when it changes.
    pub fn step(&mut self, loss: f64, lr: f64) -> Option<f64> {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return None;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            Some(lr * self.factor)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopVerdict {
    pub improved: bool,
    pub stop: bool,
}

/// Stops once `patience` consecutive epochs bring no strict improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, loss: f64) -> StopVerdict {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            StopVerdict { improved: true, stop: false }
        } else {
            self.bad_epochs += 1;
            StopVerdict {
                improved: false,
                stop: self.bad_epochs >= self.patience,
            }
        }
    }
}

/// Learning rate per epoch and the stopping epoch for a given loss sequence,
/// as the training loops apply them.
pub fn simulate_schedule(
    losses: impl IntoIterator<Item = f64>,
    lr: f64,
    factor: f64,
    plateau_patience: usize,
    stop_patience: usize,
    max_epochs: usize,
) -> (Vec<(usize, f64)>, usize) {
    let mut plateau = PlateauScheduler::new(factor, plateau_patience);
    let mut stopper = EarlyStopping::new(stop_patience);
    let mut lr = lr;
    let mut reductions = Vec::new();
    let mut last = 0;
    for (i, loss) in losses.into_iter().take(max_epochs).enumerate() {
        let epoch = i + 1;
        last = epoch;
        if let Some(new_lr) = plateau.step(loss, lr) {
            lr = new_lr;
            reductions.push((epoch, lr));
        }
        if stopper.update(loss).stop {
            break;
        }
    }
    (reductions, last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_trace() {
        let (red, stop) = simulate_schedule(std::iter::repeat(1.0), 1e-3, 0.1, 4, 15, 200);
        let epochs: Vec<usize> = red.iter().map(|r| r.0).collect();
        assert_eq!(epochs, vec![5, 9, 13]);
        assert!((red[2].1 - 1e-6).abs() < 1e-18);
        assert_eq!(stop, 16);
    }

    #[test]
    fn improving_loss_runs_to_max() {
        let (red, stop) = simulate_schedule((0..).map(|i| 1.0 / (i + 1) as f64), 1e-3, 0.1, 4, 15, 200);
        assert!(red.is_empty());
        assert_eq!(stop, 200);
    }
}
