use super::*;
use crate::backbone::{BackboneConfig, InjectionTargets, NoAdaptation};
use crate::lora::LoraAdapter;
use crate::numerics::{seeded_random_matrix, Distribution};
use crate::router::{HashVectorizer, MiniMlp};

struct Fixture {
    backbone: Backbone,
    vocab: Vocab,
    router: Router,
    registry: LoraRegistry,
    adapters: Vec<LoraAdapter>,
}

fn fixture(n_tasks: usize) -> Fixture {
    let vocab = Vocab::from_words(["a", "b", "c", "d", "orbit", "flour", "x"]);
    let cfg = BackboneConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        ffn_dim: 16,
        max_seq_len: 96,
        seed: 5,
    };
    let backbone = Backbone::new(cfg).unwrap();
    let labels: Vec<String> = (0..n_tasks).map(|t| format!("t{t}")).collect();
    let router = Router::new(
        HashVectorizer::new(64, 1, 3, 0).unwrap(),
        MiniMlp::new(&[64, 8, 8, 8, n_tasks], 2).unwrap(),
        labels.clone(),
    )
    .unwrap();
    let mut registry = LoraRegistry::new();
    let mut adapters = Vec::new();
    for (t, label) in labels.iter().enumerate() {
        let mut a = LoraAdapter::init_for(&cfg, format!("id-{label}"), label.clone(), 2, InjectionTargets::Attention, 0.5, t as u64)
            .unwrap();
        for pair in a.layers_mut().values_mut() {
            pair.b = seeded_random_matrix(2, pair.b.cols(), 100 + t as u64, Distribution::Gaussian { std: 0.5 });
        }
        registry.register(&a).unwrap();
        adapters.push(a);
    }
    Fixture {
        backbone,
        vocab,
        router,
        registry,
        adapters,
    }
}

impl Fixture {
    fn routing(&self) -> Routing<'_> {
        Routing::Dynamic {
            router: &self.router,
            registry: &self.registry,
        }
    }

    fn scripted(&self, session: &mut SessionState, prompt: &str, script: &str, cfg: &EngineConfig) -> InferenceOutput {
        let p = self.vocab.encode(prompt);
        let s = self.vocab.encode(script);
        run_tokens(&p, session, &self.backbone, &self.vocab, &self.routing(), cfg, Emission::Scripted(&s)).unwrap()
    }
}

#[test]
fn sentence_start_rule() {
    let v = Vocab::from_words(["the", "cat"]);
    let delims = v.delimiter_ids();
    assert!(detect_sentence_start(None, &delims));
    assert!(detect_sentence_start(Some(v.id(".")), &delims));
    assert!(detect_sentence_start(Some(v.id("\n")), &delims));
    assert!(!detect_sentence_start(Some(v.id("the")), &delims));
}

#[test]
fn one_sentence_without_delimiters_routes_once() {
    let f = fixture(2);
    let mut s = SessionState::new();
    f.scripted(&mut s, "a b c", "d d a b c", &EngineConfig::default());
    assert_eq!(s.router_invocations, 1);
    assert_eq!(s.trace.entries[0].sentence_prefix, "a b c");
}

#[test]
fn two_generated_delimiters_give_three_sentences() {
    let f = fixture(2);
    let mut s = SessionState::new();
    f.scripted(&mut s, "a b", "c . d ! orbit flour", &EngineConfig::default());
    assert_eq!(s.router_invocations, 3);
    assert_eq!(s.sentence_index, 3);
    let prefixes: Vec<&str> = s.trace.entries.iter().map(|e| e.sentence_prefix.as_str()).collect();
    assert_eq!(prefixes, ["a b", "d", "orbit"]);
    assert!(s.trace.is_well_ordered());
}

#[test]
fn multi_sentence_prompt_routes_each_sentence() {
    let f = fixture(2);
    let mut s = SessionState::new();
    f.scripted(&mut s, "a b . orbit flour ? c", "d", &EngineConfig::default());
    let prefixes: Vec<&str> = s.trace.entries.iter().map(|e| e.sentence_prefix.as_str()).collect();
    assert_eq!(prefixes, ["a b .", "orbit flour ?", "c"]);
}

#[test]
fn plan_is_stable_between_triggers() {
    let f = fixture(3);
    let mut s = SessionState::new();
    f.scripted(&mut s, "a b c", "d . orbit flour a b . x c", &EngineConfig::default());
    assert_eq!(s.trace.len(), 3);
    // every step uses the plan of the latest routing event at or before it
    let mut expected = Vec::new();
    let mut ev = 0;
    for pos in 0..s.step_plans.len() {
        while ev + 1 < s.trace.len() && s.trace.entries[ev + 1].position <= pos {
            ev += 1;
        }
        expected.push(s.trace.entries[ev].plan_id);
    }
    assert_eq!(s.step_plans, expected);
    let distinct: std::collections::BTreeSet<u64> = s.step_plans.iter().copied().collect();
    assert_eq!(distinct.len(), 3);
}

#[test]
fn token_granularity_routes_every_generated_token() {
    let f = fixture(2);
    let cfg = EngineConfig {
        granularity: Granularity::Token,
        ..Default::default()
    };
    let mut s = SessionState::new();
    f.scripted(&mut s, "a b", "c d . a b", &cfg);
    // one for the prompt, then one per generated token
    assert_eq!(s.router_invocations, 1 + 5);
    assert_eq!(s.sentence_index, 2);
    assert!(s.trace.is_well_ordered());
}

#[test]
fn reset_clears_everything() {
    let f = fixture(2);
    let mut s = SessionState::new();
    let first = f.scripted(&mut s, "a b", "c . d", &EngineConfig::default());
    let first_trace = s.trace.clone();
    s.reset();
    assert_eq!(s.router_invocations, 0);
    assert!(s.trace.is_empty() && s.history_tokens.is_empty() && s.active_plan.is_none());
    let again = f.scripted(&mut s, "a b", "c . d", &EngineConfig::default());
    assert_eq!(again.tokens, first.tokens);
    let probs = |t: &RoutingTrace| t.entries.iter().map(|e| e.probs.clone()).collect::<Vec<_>>();
    assert_eq!(probs(&s.trace), probs(&first_trace));
}

#[test]
fn history_carries_across_prompts() {
    let f = fixture(2);
    let mut s = SessionState::new();
    f.scripted(&mut s, "a b", "c", &EngineConfig::default());
    assert_eq!(s.history_tokens.len(), 3);
    f.scripted(&mut s, "orbit", "flour", &EngineConfig::default());
    assert_eq!(s.trace.entries[1].sentence_index, 1);
    assert_eq!(s.trace.entries[1].position, 3);
}

#[test]
fn single_adapter_matches_merged_generation() {
    let f = fixture(1);
    let cfg = EngineConfig {
        max_new_tokens: 12,
        ..Default::default()
    };
    let mut s = SessionState::new();
    let out = run_inference("a b orbit", &mut s, &f.backbone, &f.vocab, &f.routing(), &cfg).unwrap();
    let merged = f.adapters[0].merged_into(&f.backbone).unwrap();
    let prompt = f.vocab.encode("a b orbit");
    let reference = merged.generate(&prompt, 12, Some(f.vocab.eos_id()), &NoAdaptation, |_, _| {}).unwrap();
    assert_eq!(out.tokens, reference[prompt.len()..].to_vec());
    let adapted = f.backbone.generate(&prompt, 12, Some(f.vocab.eos_id()), &NoAdaptation, |_, _| {}).unwrap();
    assert_ne!(adapted, reference, "adapter should change the base generation");
}

#[test]
fn missing_adapter_is_a_routing_error() {
    let mut f = fixture(2);
    f.registry.remove("id-t1").unwrap();
    let mut s = SessionState::new();
    let err = run_inference("a b", &mut s, &f.backbone, &f.vocab, &f.routing(), &EngineConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Routing { label } if label == "t1"));
}

#[test]
fn trace_jsonl_roundtrip_and_columns() {
    let f = fixture(2);
    let mut s = SessionState::new();
    f.scripted(&mut s, "a b", "c . orbit flour", &EngineConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    s.trace.save_jsonl(&path).unwrap();
    assert_eq!(RoutingTrace::load_jsonl(&path).unwrap(), s.trace);
    let cols = s.trace.to_columns();
    assert_eq!(cols.lines().count(), 2);
    assert!(cols.lines().all(|l| l.contains(" | t")));
}
