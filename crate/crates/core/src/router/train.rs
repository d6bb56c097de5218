use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mlp::{MiniMlp, DESK_WIDTHS};
use super::vectorize::HashVectorizer;
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainConfig {
    /// Hidden widths `h1, h2, h3`; the input width comes from the vectorizer.
    pub hidden: [usize; 3],
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        Self {
            hidden: [DESK_WIDTHS[1], DESK_WIDTHS[2], DESK_WIDTHS[3]],
            epochs: 20,
            learning_rate: 0.5,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedMlp {
    pub mlp: MiniMlp,
    /// Exact-match accuracy of argmax predictions on the held-out tenth.
    pub held_out_accuracy: f64,
    pub epoch_losses: Vec<f32>,
    pub n_train: usize,
    pub n_test: usize,
}

/// Stratified 9:1 split of example indices. Each class keeps
/// `max(1, round(n/10))` examples for testing. The shuffle ignores labels, so
/// relabeling classes does not change which examples are held out.
pub fn stratified_split(labels: &[usize], n_classes: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(Error::Data(format!("task index {y} outside 0..{n_classes}")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::Data(format!(
            "task {c} has {} examples; at least 2 are needed",
            counts[c]
        )));
    }
    let mut held: Vec<usize> = counts.iter().map(|&n| ((n as f64 / 10.0).round() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut seeded_rng(seed));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in order {
        let y = labels[i];
        if held[y] > 0 {
            held[y] -= 1;
            test.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, test))
}

/// Trains a mini-MLP on `(sentence, task_index)` pairs with mini-batch SGD on
/// cross-entropy and reports held-out accuracy on a stratified 9:1 split.
pub fn train_router(
    labeled: &[(String, usize)],
    n_tasks: usize,
    vectorizer: &HashVectorizer,
    cfg: &RouterTrainConfig,
) -> Result<TrainedMlp> {
    vectorizer.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || !cfg.learning_rate.is_finite() || cfg.learning_rate <= 0.0 {
        return Err(Error::Contract(
            "epochs, batch_size and learning_rate must be positive".into(),
        ));
    }
    if n_tasks == 0 {
        return Err(Error::Data("router needs at least one task".into()));
    }
    let labels: Vec<usize> = labeled.iter().map(|(_, y)| *y).collect();
    let (train, test) = stratified_split(&labels, n_tasks, cfg.seed)?;
    let features: Vec<Vec<f32>> = labeled.iter().map(|(s, _)| vectorizer.vectorize(s)).collect();

    let dims = MiniMlp::dims([vectorizer.dim, cfg.hidden[0], cfg.hidden[1], cfg.hidden[2]], n_tasks);
    let mut mlp = MiniMlp::new(&dims, cfg.seed)?;
    let mut rng = seeded_rng(cfg.seed.wrapping_add(1));
    let mut order = train.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = stack(&features, chunk, vectorizer.dim);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let cache = mlp.forward_batch(&x)?;
            let loss = MiniMlp::loss(&cache, &y);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * chunk.len() as f32;
            let grads = mlp.backward(&cache, &y)?;
            mlp.apply(&grads, cfg.learning_rate)?;
        }
        let mean = total / train.len() as f32;
        if !mlp.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }

    let correct = if test.is_empty() {
        0
    } else {
        let probs = mlp.forward_batch(&stack(&features, &test, vectorizer.dim))?.probs;
        test.iter()
            .enumerate()
            .filter(|(r, &i)| crate::backbone::argmax(probs.row(*r)) == labels[i])
            .count()
    };
    Ok(TrainedMlp {
        mlp,
        held_out_accuracy: correct as f64 / test.len().max(1) as f64,
        epoch_losses,
        n_train: train.len(),
        n_test: test.len(),
    })
}

fn stack(features: &[Vec<f32>], idx: &[usize], dim: usize) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        data.extend_from_slice(&features[i]);
    }
    Matrix::new(idx.len(), dim, data).expect("rows of equal width")
}
