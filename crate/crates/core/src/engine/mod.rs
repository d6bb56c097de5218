//! Inference sessions: sentence-boundary detection, routing at the first
//! token of each sentence, and fused decoding under the active plan.

mod trace;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, vocab::DEFAULT_DELIMITERS, Adaptation, Backbone, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::fusion::{plan_for_sentence, FusedAdaptation, FusionPlan, LoraRegistry};
use crate::router::{Router, RouterConfig};

pub use trace::{RoutingEvent, RoutingTrace, TRACE_FORMAT_VERSION};

/// When the router runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Once per sentence, at its first token.
    #[default]
    Sentence,
    /// At every generated token; the per-token gating baseline.
    Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub router: RouterConfig,
    pub max_new_tokens: usize,
    pub granularity: Granularity,
    /// Tokens that end a sentence.
    pub delimiters: Vec<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            router: RouterConfig::default(),
            max_new_tokens: 16,
            granularity: Granularity::Sentence,
            delimiters: DEFAULT_DELIMITERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// State carried across the prompts of one conversation.
#[derive(Debug, Clone, Default)]
pub struct SessionState {
    /// Every prompt and generated token so far; routing context only.
    pub history_tokens: Vec<TokenId>,
    /// Sentences started so far.
    pub sentence_index: usize,
    pub active_plan: Option<FusionPlan>,
    pub router_invocations: usize,
    pub trace: RoutingTrace,
    /// Plan id used by each decode step, in order; `0` for unrouted steps.
    pub step_plans: Vec<u64>,
}

impl SessionState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// True when the token after `prev` opens a sentence: at stream start or
/// right after a delimiter.
pub fn detect_sentence_start(prev: Option<TokenId>, delimiters: &[TokenId]) -> bool {
    prev.is_none_or(|p| delimiters.contains(&p))
}

/// What decides the adaptation at each step.
pub enum Routing<'a> {
    /// Router plus registry; plans rebuilt at each trigger.
    Dynamic {
        router: &'a Router,
        registry: &'a LoraRegistry,
    },
    /// One adaptation for the whole run; no routing.
    Fixed(&'a dyn Adaptation),
}

/// Where emitted tokens come from.
#[derive(Debug, Clone, Copy)]
pub enum Emission<'a> {
    /// Greedy argmax, stopping at end-of-sequence or `max_new` tokens.
    Greedy { max_new: usize },
    /// A fixed continuation fed back instead of the argmax. Every step still
    /// computes logits and their argmax, so the work matches greedy decoding
    /// while sentence lengths stay under the caller's control.
    Scripted(&'a [TokenId]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub tokens: Vec<TokenId>,
    pub text: String,
    /// Index of this run's first event in the session trace.
    pub first_event: usize,
}

/// Where routing fires: the sentence being classified and whether it is a
/// new one or a re-route of the current sentence.
struct Trigger<'s> {
    sentence_start: usize,
    sentence: &'s [TokenId],
    new_sentence: bool,
}

struct Driver<'a> {
    backbone: &'a Backbone,
    vocab: &'a Vocab,
    cfg: &'a EngineConfig,
    delimiters: Vec<TokenId>,
}

impl Driver<'_> {
    /// Classifies `sentence` against the trailing history and installs the
    /// resulting plan.
    fn route(
        &self,
        session: &mut SessionState,
        router: &Router,
        registry: &LoraRegistry,
        stream: &[TokenId],
        trigger: Trigger<'_>,
    ) -> Result<FusedAdaptation> {
        let cfg = &self.cfg.router;
        let Trigger {
            sentence_start,
            sentence,
            new_sentence,
        } = trigger;
        let full_hist: Vec<TokenId> = session.history_tokens.iter().chain(&stream[..sentence_start]).copied().collect();
        let hist_from = full_hist.len().saturating_sub(cfg.history_window);
        let history = self.vocab.decode(&full_hist[hist_from..]);
        let prefix = self.vocab.decode(sentence);

        let t0 = Instant::now();
        let cls = router.classify_detailed(&prefix, &history, cfg)?;
        let classify_ms = t0.elapsed().as_secs_f64() * 1e3;
        if new_sentence {
            session.sentence_index += 1;
        }
        let sentence_index = session.sentence_index - 1;
        let plan = plan_for_sentence(&cls, router.task_labels(), registry, cfg, sentence_index)?;
        let fused = FusedAdaptation::new(registry, &plan, self.backbone.config().n_layers)?;
        session.router_invocations += 1;
        session.trace.entries.push(RoutingEvent {
            format_version: TRACE_FORMAT_VERSION,
            sentence_index,
            position: session.history_tokens.len() + stream.len(),
            sentence_prefix: prefix,
            probs: cls.probs,
            selected_labels: plan.selected_slots.iter().map(|&s| registry.labels()[s].clone()).collect(),
            weights: plan.weights.clone(),
            plan_id: plan.plan_id,
            classify_ms,
        });
        session.active_plan = Some(plan);
        Ok(fused)
    }

    /// End of the sentence that starts at `start` within `prompt`: one past
    /// its delimiter, or the prompt end.
    fn sentence_end(&self, prompt: &[TokenId], start: usize) -> usize {
        prompt[start..]
            .iter()
            .position(|t| self.delimiters.contains(t))
            .map_or(prompt.len(), |i| start + i + 1)
    }

    fn run(&self, session: &mut SessionState, prompt: &[TokenId], routing: &Routing<'_>, emission: Emission<'_>) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(Error::Input("prompt has no tokens".into()));
        }
        let mut state = self.backbone.start_decode();
        let mut stream: Vec<TokenId> = Vec::with_capacity(prompt.len() + 64);
        let mut current: Option<FusedAdaptation> = None;
        let mut sentence_start = 0usize;
        let mut logits = Vec::new();

        // prompt: each prompt sentence is classified from its full text
        let mut i = 0;
        while i < prompt.len() {
            let end = self.sentence_end(prompt, i);
            if let Routing::Dynamic { router, registry } = routing {
                let trigger = Trigger {
                    sentence_start: i,
                    sentence: &prompt[i..end],
                    new_sentence: true,
                };
                current = Some(self.route(session, router, registry, &stream, trigger)?);
            } else {
                session.sentence_index += 1;
            }
            sentence_start = i;
            for &t in &prompt[i..end] {
                logits = self.step(session, &mut state, t, routing, current.as_ref())?;
                stream.push(t);
            }
            i = end;
        }

        let mut generated = Vec::new();
        let limit = match emission {
            Emission::Greedy { max_new } => max_new,
            Emission::Scripted(s) => s.len(),
        };
        while generated.len() < limit {
            let greedy = argmax(&logits) as TokenId;
            let next = match emission {
                Emission::Greedy { .. } => greedy,
                Emission::Scripted(s) => s[generated.len()],
            };
            generated.push(next);
            let is_eos = matches!(emission, Emission::Greedy { .. }) && next == self.vocab.eos_id();
            if !is_eos {
                let starts = detect_sentence_start(stream.last().copied(), &self.delimiters);
                if starts {
                    sentence_start = stream.len();
                }
                match routing {
                    Routing::Dynamic { router, registry } if starts || self.cfg.granularity == Granularity::Token => {
                        let mut sentence = stream[sentence_start..].to_vec();
                        sentence.push(next);
                        let trigger = Trigger {
                            sentence_start,
                            sentence: &sentence,
                            new_sentence: starts,
                        };
                        current = Some(self.route(session, router, registry, &stream, trigger)?);
                    }
                    Routing::Fixed(_) if starts => session.sentence_index += 1,
                    _ => {}
                }
            }
            if is_eos || generated.len() == limit || state.len() >= self.backbone.config().max_seq_len {
                stream.push(next);
                break;
            }
            logits = self.step(session, &mut state, next, routing, current.as_ref())?;
            stream.push(next);
        }
        session.history_tokens.extend_from_slice(&stream);
        Ok(generated)
    }

    fn step(
        &self,
        session: &mut SessionState,
        state: &mut crate::backbone::DecodeState,
        token: TokenId,
        routing: &Routing<'_>,
        fused: Option<&FusedAdaptation>,
    ) -> Result<Vec<f32>> {
        match (routing, fused) {
            (Routing::Fixed(a), _) => {
                session.step_plans.push(0);
                self.backbone.step(state, token, *a)
            }
            (Routing::Dynamic { .. }, Some(f)) => {
                session.step_plans.push(f.plan_id());
                self.backbone.step(state, token, f)
            }
            (Routing::Dynamic { .. }, None) => Err(Error::Plan("no active plan".into())),
        }
    }
}

/// Runs one prompt through the session with greedy decoding.
///
/// The prompt's first token opens sentence 0 (or the next sentence of an
/// ongoing session). Each prompt sentence is classified from its full text;
/// each generated sentence from its first token. The backbone context is the
/// prompt alone; earlier turns reach the router only through the history
/// window.
pub fn run_inference(
    prompt: &str,
    session: &mut SessionState,
    backbone: &Backbone,
    vocab: &Vocab,
    routing: &Routing<'_>,
    cfg: &EngineConfig,
) -> Result<InferenceOutput> {
    let tokens = vocab.encode(prompt);
    run_tokens(&tokens, session, backbone, vocab, routing, cfg, Emission::Greedy { max_new: cfg.max_new_tokens })
}

/// [`run_inference`] over pre-tokenized input with a chosen [`Emission`].
pub fn run_tokens(
    prompt: &[TokenId],
    session: &mut SessionState,
    backbone: &Backbone,
    vocab: &Vocab,
    routing: &Routing<'_>,
    cfg: &EngineConfig,
    emission: Emission<'_>,
) -> Result<InferenceOutput> {
    cfg.router.validate()?;
    if let Routing::Dynamic { router, registry } = routing {
        if let Some(missing) = router.task_labels().iter().find(|l| registry.slot_for_label(l).is_none()) {
            return Err(Error::Routing { label: missing.clone() });
        }
    }
    let driver = Driver {
        backbone,
        vocab,
        cfg,
        delimiters: cfg.delimiters.iter().filter_map(|d| vocab.get(d)).collect(),
    };
    let first_event = session.trace.len();
    let tokens = driver.run(session, prompt, routing, emission)?;
    let visible: Vec<TokenId> = tokens.iter().copied().filter(|&t| t != vocab.eos_id()).collect();
    Ok(InferenceOutput {
        text: vocab.decode(&visible),
        tokens,
        first_event,
    })
}

#[cfg(test)]
mod tests;
