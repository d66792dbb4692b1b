use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Knobs shared by every gradient-trained module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied per epoch.
    pub decay: f64,
    pub batch: usize,
    /// Stop once the epoch loss has improved by less than
    /// `min_improvement` for `patience` consecutive epochs.
    pub patience: usize,
    pub min_improvement: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 1000,
            lr: 1e-2,
            decay: 0.96,
            batch: 64,
            patience: 20,
            min_improvement: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Minibatch epoch driver with exponential LR decay and early stopping.
/// `run_batch(indices, lr)` performs one optimizer step and returns the batch
/// loss; the epoch loss is the sample-weighted mean over batches.
pub fn run_epochs<R: Rng, F: FnMut(&[usize], f64) -> f64>(
    n_samples: usize,
    settings: &TrainSettings,
    rng: &mut R,
    mut run_batch: F,
) -> TrainReport {
    let mut indices: Vec<usize> = (0..n_samples).collect();
    let batch = settings.batch.max(1);
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..settings.epochs {
        let lr = settings.lr * settings.decay.powi(epoch as i32);
        indices.shuffle(rng);
        let mut loss_sum = 0.0;
        for chunk in indices.chunks(batch) {
            loss_sum += run_batch(chunk, lr) * chunk.len() as f64;
        }
        let epoch_loss = loss_sum / n_samples as f64;
        report.epochs_run = epoch + 1;
        report.final_loss = epoch_loss;
        report.epoch_losses.push(epoch_loss);

        if best - epoch_loss < settings.min_improvement {
            stale += 1;
            if stale >= settings.patience {
                break;
            }
        } else {
            stale = 0;
        }
        best = best.min(epoch_loss);
    }
    report
}
