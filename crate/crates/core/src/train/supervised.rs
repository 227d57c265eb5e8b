use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, NetworkDef};
use crate::tensor::{Adam, AdamConfig, Optimizer, Tape};

/// Cross-entropy training of a classifier or feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Trains `net` in place and returns the mean loss of each epoch.
pub fn train_supervised(net: &mut NetworkDef<f32>, data: &Dataset, cfg: &SupervisedConfig) -> Result<Vec<f64>> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::invalid(
            "supervised training needs data and a positive batch size",
        ));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = data.shuffled_batches(cfg.batch, cfg.seed.wrapping_add(epoch as u64));
        for idx in &batches {
            let (x, labels) = data.batch(idx);
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let xv = tape.constant(x);
            let out = net.forward(&mut tape, &bound, xv, Mode::Train)?;
            let loss = tape.cross_entropy(out.out(), &labels)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("classification loss at epoch {epoch}")));
            }
            total += value;
            let grads = tape.backward(loss)?;
            let g: Vec<_> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
            opt.step(net.params_mut(), &g)?;
            net.update_running_stats(&out.batch_stats);
        }
        history.push(total / batches.len() as f64);
    }
    Ok(history)
}
