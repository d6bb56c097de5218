//! The routing plugin: sentence vectorizer, 4-layer mini-MLP classifier,
//! threshold selection of tasks and their fusion weights.

mod mlp;
mod train;
mod vectorize;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::argmax;
use crate::error::{Error, Result};
use crate::numerics::softmax_in_place;

pub use mlp::{MiniMlp, MlpCache, MlpGradients, DESK_WIDTHS, FULL_WIDTHS, MLP_LAYERS};
pub use train::{stratified_split, train_router, RouterTrainConfig, TrainedMlp};
pub use vectorize::HashVectorizer;

pub const ROUTER_FORMAT_VERSION: u32 = 1;

/// How fusion weights are derived from the selected classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionWeighting {
    /// Softmax over the selected probabilities themselves.
    #[default]
    SoftmaxProbs,
    /// Selected probabilities divided by their sum.
    Renormalize,
    /// Softmax over the selected pre-softmax scores.
    SoftmaxLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Absolute per-class threshold in `(0, 1]`.
    pub p_threshold: f32,
    /// Trailing history tokens fed to the classifier.
    pub history_window: usize,
    /// Weight of the history features relative to the current sentence.
    pub history_weight: f32,
    pub weighting: FusionWeighting,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            p_threshold: 0.3,
            history_window: 64,
            history_weight: 0.5,
            weighting: FusionWeighting::SoftmaxProbs,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        check_threshold(self.p_threshold)?;
        if !(self.history_weight >= 0.0 && self.history_weight.is_finite()) {
            return Err(Error::Config(format!(
                "history_weight must be finite and non-negative, got {}",
                self.history_weight
            )));
        }
        Ok(())
    }
}

fn check_threshold(p: f32) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Contract(format!("threshold p must lie in (0, 1], got {p}")));
    }
    Ok(())
}

/// Classifier output for one routing event.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub probs: Vec<f32>,
    pub logits: Vec<f32>,
}

/// Trained classifier together with its vectorizer and the task labels its
/// outputs index. The label list is the mapping used for adapter lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    format_version: u32,
    vectorizer: HashVectorizer,
    #[serde(flatten)]
    mlp: MiniMlp,
    task_labels: Vec<String>,
}

impl Router {
    pub fn new(vectorizer: HashVectorizer, mlp: MiniMlp, task_labels: Vec<String>) -> Result<Self> {
        let r = Self {
            format_version: ROUTER_FORMAT_VERSION,
            vectorizer,
            mlp,
            task_labels,
        };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        self.vectorizer.validate()?;
        self.mlp.validate()?;
        if self.vectorizer.dim != self.mlp.input_dim() {
            return Err(Error::Config(format!(
                "vectorizer dim {} does not match router input {}",
                self.vectorizer.dim,
                self.mlp.input_dim()
            )));
        }
        if self.task_labels.len() != self.mlp.n_tasks() {
            return Err(Error::Config(format!(
                "{} task labels for a {}-way classifier",
                self.task_labels.len(),
                self.mlp.n_tasks()
            )));
        }
        Ok(())
    }

    pub fn vectorizer(&self) -> &HashVectorizer {
        &self.vectorizer
    }

    pub fn mlp(&self) -> &MiniMlp {
        &self.mlp
    }

    pub fn task_labels(&self) -> &[String] {
        &self.task_labels
    }

    pub fn n_tasks(&self) -> usize {
        self.task_labels.len()
    }

    /// Classifies `sentence` given the preceding `history` text, of which only
    /// the last `cfg.history_window` tokens are used.
    pub fn classify_detailed(&self, sentence: &str, history: &str, cfg: &RouterConfig) -> Result<Classification> {
        let hist = trailing_tokens(history, cfg.history_window);
        let features = self.vectorizer.vectorize_with_history(sentence, hist, cfg.history_weight);
        let logits = self.mlp.logits(&features)?;
        let mut probs = logits.clone();
        softmax_in_place(&mut probs);
        Ok(Classification { probs, logits })
    }

    pub fn classify(&self, sentence: &str, history: &str, cfg: &RouterConfig) -> Result<Vec<f32>> {
        Ok(self.classify_detailed(sentence, history, cfg)?.probs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Router = crate::io::read_json(path)?;
        if r.format_version != ROUTER_FORMAT_VERSION {
            return Err(Error::Version {
                expected: ROUTER_FORMAT_VERSION,
                found: r.format_version,
            });
        }
        r.validate()?;
        Ok(r)
    }
}

/// The suffix of `text` holding its last `n` whitespace-separated tokens.
pub fn trailing_tokens(text: &str, n: usize) -> &str {
    if n == 0 {
        return "";
    }
    let trimmed = text.trim_end();
    let mut seen = 0;
    let mut in_token = false;
    for (i, c) in trimmed.char_indices().rev() {
        if c.is_whitespace() {
            if in_token {
                seen += 1;
                if seen == n {
                    return &trimmed[i + c.len_utf8()..];
                }
            }
            in_token = false;
        } else {
            in_token = true;
        }
    }
    trimmed.trim_start()
}

/// Every index with `probs[i] >= p`, ascending; `{argmax}` when none
/// qualifies, so the result is never empty.
pub fn select_top_p(probs: &[f32], p: f32) -> Result<Vec<usize>> {
    check_threshold(p)?;
    if probs.is_empty() || probs.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract(
            "probabilities must be non-empty, finite and non-negative".into(),
        ));
    }
    let selected: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] >= p).collect();
    if selected.is_empty() {
        return Ok(vec![argmax(probs)]);
    }
    Ok(selected)
}

/// Softmax over the selected probabilities, aligned with `selected`.
pub fn fusion_weights(probs: &[f32], selected: &[usize]) -> Result<Vec<f32>> {
    fusion_weights_with(FusionWeighting::SoftmaxProbs, probs, None, selected)
}

/// Fusion weights under any [`FusionWeighting`]; `logits` is required for
/// [`FusionWeighting::SoftmaxLogits`].
pub fn fusion_weights_with(
    mode: FusionWeighting,
    probs: &[f32],
    logits: Option<&[f32]>,
    selected: &[usize],
) -> Result<Vec<f32>> {
    if selected.is_empty() {
        return Err(Error::Contract("fusion weights need a non-empty selection".into()));
    }
    let source = match mode {
        FusionWeighting::SoftmaxLogits => logits.ok_or_else(|| {
            Error::Contract("logit weighting needs the classifier logits".into())
        })?,
        _ => probs,
    };
    if let Some(&bad) = selected.iter().find(|&&i| i >= source.len()) {
        return Err(Error::Contract(format!(
            "selected index {bad} outside {} classes",
            source.len()
        )));
    }
    let mut w: Vec<f32> = selected.iter().map(|&i| source[i]).collect();
    match mode {
        FusionWeighting::Renormalize => {
            let sum: f32 = w.iter().sum();
            if sum <= 0.0 {
                let u = 1.0 / w.len() as f32;
                w.iter_mut().for_each(|x| *x = u);
            } else {
                w.iter_mut().for_each(|x| *x /= sum);
            }
        }
        _ => softmax_in_place(&mut w),
    }
    Ok(w)
}
