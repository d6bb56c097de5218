//! SGD training of one adapter on a frozen backbone.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LoraAdapter, DEFAULT_INIT_STD};
use crate::backbone::{batch_gradients, Backbone, InjectionPoint, InjectionTargets, TrainingSequence};
use crate::error::{Error, Result};
use crate::numerics::seeded_rng;
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraTrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rank: usize,
    pub scale: f32,
    pub targets: InjectionTargets,
    /// Standard deviation of the gaussian `A` init; `B` always starts at zero.
    pub init_std: f32,
}

impl Default for LoraTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            rank: 4,
            scale: 1.0,
            targets: InjectionTargets::Attention,
            init_std: DEFAULT_INIT_STD,
        }
    }
}

impl LoraTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.rank == 0 {
            return Err(Error::Contract("batch_size and rank must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean next-token loss of each epoch, in order.
    pub epoch_losses: Vec<f32>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f32 {
        *self.epoch_losses.last().expect("at least one epoch")
    }
}

/// Trains a fresh adapter on `data` with the backbone frozen. Only the
/// adapter's `A` and `B` receive updates.
pub fn train_adapter(
    backbone: &Backbone,
    data: &[TrainingSequence],
    adapter_id: &str,
    task_label: &str,
    cfg: &LoraTrainConfig,
) -> Result<(LoraAdapter, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract(format!("corpus for task `{task_label}` is empty")));
    }
    let n_layers = backbone.config().n_layers;
    let mut adapter = LoraAdapter::init_for(
        backbone.config(),
        adapter_id,
        task_label,
        cfg.rank,
        cfg.targets,
        cfg.init_std,
        cfg.seed,
    )?
    .with_scale(cfg.scale);
    let names: Vec<(String, usize)> = adapter
        .layers()
        .keys()
        .map(|n| Ok((n.clone(), n.parse::<InjectionPoint>()?.slot())))
        .collect::<Result<_>>()?;

    let mut rng = seeded_rng(cfg.seed ^ 0x5eed_a11a);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let grads = {
                let slots = adapter.side_slots(n_layers)?;
                let (loss, grads) = batch_gradients(backbone, &batch, &slots, false, Execution::Parallel)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, loss });
                }
                total += loss * batch.len() as f32;
                grads
            };
            let step = -cfg.learning_rate / batch.len() as f32;
            let layers = adapter.layers_mut();
            for (name, slot) in &names {
                if let Some((da, db)) = grads.side[*slot].as_ref() {
                    let pair = layers.get_mut(name).expect("layer listed above");
                    pair.a.axpy(step, da)?;
                    pair.b.axpy(step, db)?;
                }
            }
        }
        let mean = total / data.len() as f32;
        let finite = adapter.layers().values().all(|p| p.a.is_finite() && p.b.is_finite());
        if !mean.is_finite() || !finite {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    Ok((adapter, TrainReport { epoch_losses }))
}
