//! End-to-end pipeline: synthetic tasks → router and per-task adapters →
//! composite-stream evaluation under base, oracle and routed decoding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, NoAdaptation, Vocab};
use crate::corpus::{build_vocab, composite_stream, generate_tasks, router_examples, split_9_1, SplitCorpus, TaskCorpus, TaskKind};
use crate::engine::{run_inference, EngineConfig, Routing, SessionState};
use crate::error::{Error, Result};
use crate::fusion::{FusedAdaptation, FusionPlan, LoraRegistry};
use crate::lora::{train_adapter, LoraAdapter, LoraTrainConfig};
use crate::metrics::{EvalReport, TaskScores};
use crate::router::{train_router, HashVectorizer, Router, RouterTrainConfig, TrainedMlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub n_tasks: usize,
    pub per_task: usize,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub vectorizer: HashVectorizer,
    pub router_train: RouterTrainConfig,
    pub lora: LoraTrainConfig,
    pub engine: EngineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_tasks: 8,
            per_task: 200,
            seed: 0,
            backbone: BackboneConfig::default(),
            vectorizer: HashVectorizer::default(),
            router_train: RouterTrainConfig::default(),
            // enough for every task to converge on the default backbone
            lora: LoraTrainConfig {
                epochs: 8,
                learning_rate: 0.2,
                ..LoraTrainConfig::default()
            },
            engine: EngineConfig::default(),
        }
    }
}

/// Everything needed to serve and score routed inference.
pub struct System {
    pub vocab: Vocab,
    pub backbone: Backbone,
    pub router: Router,
    pub registry: LoraRegistry,
    pub splits: Vec<SplitCorpus>,
}

/// Per-epoch training loss keyed by task label.
pub type EpochLosses = BTreeMap<String, Vec<f32>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub router_accuracy: f64,
    pub router_epoch_losses: Vec<f32>,
    /// Per-epoch training loss of each task's adapter.
    pub adapter_epoch_losses: EpochLosses,
}

/// Adapter id used for a task inside the pipeline.
pub fn adapter_id(task_label: &str) -> String {
    format!("lora-{task_label}")
}

/// Generates data, trains the router on the training prompts, and trains
/// one adapter per task on a frozen randomly initialized backbone.
pub fn build_system(cfg: &PipelineConfig) -> Result<(System, TrainingSummary)> {
    let tasks = generate_tasks(cfg.n_tasks, cfg.per_task, cfg.seed)?;
    build_system_from(&tasks, cfg)
}

pub fn build_system_from(tasks: &[TaskCorpus], cfg: &PipelineConfig) -> Result<(System, TrainingSummary)> {
    let vocab = build_vocab(tasks);
    if vocab.len() > cfg.backbone.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary of {} exceeds backbone vocab_size {}",
            vocab.len(),
            cfg.backbone.vocab_size
        )));
    }
    let backbone = Backbone::new(cfg.backbone)?;
    let splits = tasks
        .iter()
        .map(|t| split_9_1(t, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let train: Vec<TaskCorpus> = splits.iter().map(|s| s.train.clone()).collect();

    let (router, trained) = fit_router(&train, &cfg.vectorizer, &cfg.router_train)?;
    let (adapters, adapter_epoch_losses) = fit_adapters(&backbone, &vocab, &train, &cfg.lora)?;
    let mut registry = LoraRegistry::new();
    for a in &adapters {
        registry.register(a)?;
    }
    let summary = TrainingSummary {
        router_accuracy: trained.held_out_accuracy,
        router_epoch_losses: trained.epoch_losses,
        adapter_epoch_losses,
    };
    Ok((
        System {
            vocab,
            backbone,
            router,
            registry,
            splits,
        },
        summary,
    ))
}

/// Router over the prompts of `train`, one class per task in order.
pub fn fit_router(train: &[TaskCorpus], vectorizer: &HashVectorizer, cfg: &RouterTrainConfig) -> Result<(Router, TrainedMlp)> {
    let trained = train_router(&router_examples(train), train.len(), vectorizer, cfg)?;
    let labels: Vec<String> = train.iter().map(|t| t.task_label.clone()).collect();
    let router = Router::new(*vectorizer, trained.mlp.clone(), labels)?;
    Ok((router, trained))
}

/// One adapter per task, trained on the frozen `backbone`. Task `i` seeds
/// its initialization with `cfg.seed + i`.
pub fn fit_adapters(
    backbone: &Backbone,
    vocab: &Vocab,
    train: &[TaskCorpus],
    cfg: &LoraTrainConfig,
) -> Result<(Vec<LoraAdapter>, EpochLosses)> {
    let mut adapters = Vec::with_capacity(train.len());
    let mut losses = BTreeMap::new();
    for (i, task) in train.iter().enumerate() {
        let lcfg = LoraTrainConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..*cfg
        };
        let label = &task.task_label;
        let seqs = task.training_sequences(vocab);
        let (adapter, report) = train_adapter(backbone, &seqs, &adapter_id(label), label, &lcfg)?;
        losses.insert(label.clone(), report.epoch_losses);
        adapters.push(adapter);
    }
    Ok((adapters, losses))
}

/// How adapters are chosen during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Frozen backbone without adapters.
    Base,
    /// Each example decoded with its own task's adapter.
    Oracle,
    /// Router-selected, fused adapters in one continuing session.
    Dlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub task_label: String,
    pub prompt: String,
    pub target: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeResult {
    pub mode: EvalMode,
    /// Exact-match accuracy over the whole stream.
    pub accuracy: f64,
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
    pub router_invocations: usize,
}

/// Decodes the held-out examples of every task, interleaved into one
/// stream, and scores them.
pub fn evaluate_composite(system: &System, mode: EvalMode, engine: &EngineConfig, seed: u64) -> Result<CompositeResult> {
    let tests: Vec<TaskCorpus> = system.splits.iter().map(|s| s.test.clone()).collect();
    evaluate_stream(system, &tests, mode, engine, seed)
}

/// [`evaluate_composite`] over arbitrary corpora, one per registered task.
pub fn evaluate_stream(
    system: &System,
    tests: &[TaskCorpus],
    mode: EvalMode,
    engine: &EngineConfig,
    seed: u64,
) -> Result<CompositeResult> {
    let stream = composite_stream(tests, seed);
    let n_layers = system.backbone.config().n_layers;
    let oracle: Vec<FusedAdaptation> = if mode == EvalMode::Oracle {
        tests
            .iter()
            .map(|t| {
                let slot = system
                    .registry
                    .slot_for_label(&t.task_label)
                    .ok_or_else(|| Error::Routing { label: t.task_label.clone() })?;
                FusedAdaptation::new(&system.registry, &FusionPlan::single(slot), n_layers)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut session = SessionState::new();
    let mut predictions = Vec::with_capacity(stream.len());
    for (task, example) in &stream {
        let routing = match mode {
            EvalMode::Base => Routing::Fixed(&NoAdaptation),
            EvalMode::Oracle => Routing::Fixed(&oracle[*task]),
            EvalMode::Dlp => Routing::Dynamic {
                router: &system.router,
                registry: &system.registry,
            },
        };
        let out = run_inference(&example.prompt, &mut session, &system.backbone, &system.vocab, &routing, engine)?;
        predictions.push(Prediction {
            task_label: tests[*task].task_label.clone(),
            prompt: example.prompt.clone(),
            target: example.target.clone(),
            output: out.text,
        });
    }
    let outputs: Vec<&str> = predictions.iter().map(|p| p.output.as_str()).collect();
    let golds: Vec<&str> = predictions.iter().map(|p| p.target.as_str()).collect();
    let accuracy = crate::metrics::accuracy(&outputs, &golds)?;
    Ok(CompositeResult {
        mode,
        accuracy,
        report: score_predictions(&predictions, tests)?,
        predictions,
        router_invocations: session.router_invocations,
    })
}

/// Per-task scores: accuracy for every task, BLEU and ROUGE for free-form
/// tasks.
pub fn score_predictions(predictions: &[Prediction], tasks: &[TaskCorpus]) -> Result<EvalReport> {
    let mut per_task = BTreeMap::new();
    for t in tasks {
        let (outs, golds): (Vec<&str>, Vec<&str>) = predictions
            .iter()
            .filter(|p| p.task_label == t.task_label)
            .map(|p| (p.output.as_str(), p.target.as_str()))
            .unzip();
        if golds.is_empty() {
            continue;
        }
        per_task.insert(t.task_label.clone(), TaskScores::score(&outs, &golds, t.kind == TaskKind::Qa)?);
    }
    Ok(EvalReport::new(per_task))
}
