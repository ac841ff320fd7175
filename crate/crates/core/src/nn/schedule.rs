use serde::{Deserialize, Serialize};

/// Halves the learning rate once the monitored loss has failed to improve for `patience`
/// consecutive epochs, then starts counting again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauHalving {
    pub patience: usize,
    pub best: f64,
    pub stale_epochs: usize,
    pub halvings: usize,
}

impl PlateauHalving {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, stale_epochs: 0, halvings: 0 }
    }

    /// Records one epoch's loss; returns `true` when `lr` was halved.
    pub fn observe(&mut self, loss: f64, lr: &mut f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale_epochs = 0;
            return false;
        }
        self.stale_epochs += 1;
        if self.stale_epochs >= self.patience {
            *lr *= 0.5;
            self.stale_epochs = 0;
            self.halvings += 1;
            return true;
        }
        false
    }
}
