//! Latency harness: base decoding, a merged single adapter, sentence-level
//! routed fusion and per-token re-routing, all through the same engine loop.
//!
//! Every method replays the same scripted continuation, so each run performs
//! the same number of decode steps over the same tokens and the timing
//! differences isolate routing and fusion.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, InjectionTargets, NoAdaptation, TokenId, Vocab};
use crate::engine::{run_tokens, Emission, EngineConfig, Granularity, Routing, SessionState};
use crate::error::{Error, Result};
use crate::fusion::LoraRegistry;
use crate::lora::LoraAdapter;
use crate::numerics::{seeded_random_matrix, seeded_rng, Distribution};
use crate::router::{HashVectorizer, MiniMlp, Router, RouterConfig, DESK_WIDTHS};

pub const CSV_HEADER: &str = "method,n_adapters,median_ms,mean_ms,stddev_ms,ratio_vs_base,ratio_vs_single_lora";

/// Medians shorter than this many timer ticks are rejected as unmeasurable.
const MIN_TICKS: f64 = 1000.0;

/// Logit given to each chosen slot; large enough that the chosen slots
/// hold all but a negligible share of the mass for any adapter count used.
const ROUTER_BIAS: f32 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    /// Backbone alone.
    Base,
    /// One adapter folded into the weights; same cost per step as base.
    SingleLoraMerged,
    /// Router at each sentence start, fused side path in between.
    DlpSentence,
    /// Router and plan construction at every generated token.
    TokenReroutingBaseline,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 4] = [
        BenchMethod::Base,
        BenchMethod::SingleLoraMerged,
        BenchMethod::DlpSentence,
        BenchMethod::TokenReroutingBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::Base => "base",
            BenchMethod::SingleLoraMerged => "single_lora_merged",
            BenchMethod::DlpSentence => "dlp_sentence",
            BenchMethod::TokenReroutingBaseline => "token_rerouting_baseline",
        }
    }
}

impl std::str::FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown bench method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub backbone: BackboneConfig,
    pub n_adapters: usize,
    pub rank: usize,
    pub targets: InjectionTargets,
    pub tokens_to_generate: usize,
    /// Sentence length of the prompt and of the scripted continuation,
    /// delimiter included.
    pub tokens_per_sentence: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub methods: Vec<BenchMethod>,
    pub p_threshold: f32,
    /// Adapters the bench router selects at every trigger. The router still
    /// runs its full forward pass; only its output bias is fixed so that
    /// this many slots clear the threshold.
    pub fused_adapters: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    /// The reference desk configuration: default backbone (context widened
    /// to fit the longest prompt plus 256 generated tokens), 256 tokens at
    /// 8 tokens per sentence.
    fn default() -> Self {
        Self {
            backbone: BackboneConfig {
                max_seq_len: 320,
                ..BackboneConfig::default()
            },
            n_adapters: 8,
            rank: 8,
            targets: InjectionTargets::Attention,
            tokens_to_generate: 256,
            tokens_per_sentence: 8,
            repetitions: 5,
            warmup: 1,
            methods: BenchMethod::ALL.to_vec(),
            p_threshold: RouterConfig::default().p_threshold,
            fused_adapters: 2,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.repetitions < 3 {
            return Err(Error::Config(format!("repetitions must be >= 3, got {}", self.repetitions)));
        }
        if self.warmup < 1 {
            return Err(Error::Config("warmup must be >= 1".into()));
        }
        if self.n_adapters == 0 || self.tokens_to_generate == 0 || self.tokens_per_sentence == 0 {
            return Err(Error::Config(
                "n_adapters, tokens_to_generate and tokens_per_sentence must be positive".into(),
            ));
        }
        if self.fused_adapters == 0 || self.fused_adapters > self.n_adapters {
            return Err(Error::Config(format!(
                "fused_adapters must be in 1..={}, got {}",
                self.n_adapters, self.fused_adapters
            )));
        }
        if self.fused_adapters as f32 * self.p_threshold > 1.0 {
            return Err(Error::Config(format!(
                "{} adapters cannot all reach p_threshold {}",
                self.fused_adapters, self.p_threshold
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no bench methods selected".into()));
        }
        let needed = self.tokens_per_sentence + self.tokens_to_generate;
        if needed > self.backbone.max_seq_len {
            return Err(Error::Config(format!(
                "prompt plus generation needs {needed} positions, backbone max_seq_len is {}",
                self.backbone.max_seq_len
            )));
        }
        RouterConfig {
            p_threshold: self.p_threshold,
            ..RouterConfig::default()
        }
        .validate()
    }
}

/// Where the numbers were measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub available_threads: usize,
    pub parallel_feature: bool,
    pub debug_assertions: bool,
    pub timer_resolution_ns: f64,
}

impl Environment {
    pub fn capture() -> Self {
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            available_threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            parallel_feature: cfg!(feature = "parallel"),
            debug_assertions: cfg!(debug_assertions),
            timer_resolution_ns: timer_resolution().as_secs_f64() * 1e9,
        }
    }
}

/// Smallest observable nonzero step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: BenchMethod,
    pub n_adapters: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub ratio_vs_base: Option<f64>,
    pub ratio_vs_single_lora: Option<f64>,
    /// Router calls per run.
    pub router_invocations: usize,
    /// Mean number of adapters in each plan, 0 for unrouted methods.
    pub mean_selected: f64,
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub environment: Environment,
    pub methods: Vec<MethodStats>,
}

impl BenchReport {
    pub fn stats(&self, method: BenchMethod) -> Option<&MethodStats> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn median_ms(&self, method: BenchMethod) -> Option<f64> {
        self.stats(method).map(|m| m.median_ms)
    }

    pub fn to_csv(&self) -> String {
        csv_rows(&self.methods)
    }
}

/// CSV with [`CSV_HEADER`]; missing ratios are empty cells.
pub fn csv_rows(rows: &[MethodStats]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|r| format!("{r:.4}")).unwrap_or_default();
    for m in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{},{}",
            m.method.as_str(),
            m.n_adapters,
            m.median_ms,
            m.mean_ms,
            m.stddev_ms,
            opt(m.ratio_vs_base),
            opt(m.ratio_vs_single_lora)
        );
    }
    out
}

/// Models, router and token streams shared by every timed method.
pub struct BenchFixture {
    pub backbone: Backbone,
    /// `backbone` with the first adapter folded in.
    pub merged: Backbone,
    pub vocab: Vocab,
    pub router: Router,
    pub registry: LoraRegistry,
    pub prompt: Vec<TokenId>,
    pub script: Vec<TokenId>,
}

/// Random adapter with both factors populated, so the side path does real
/// work rather than multiplying zeros.
fn random_adapter(cfg: &BenchConfig, index: usize) -> Result<LoraAdapter> {
    let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64 + 1);
    let mut adapter = LoraAdapter::init_for(
        &cfg.backbone,
        format!("bench-{index:04}"),
        format!("task{index:04}"),
        cfg.rank,
        cfg.targets,
        0.02,
        seed,
    )?;
    for (j, pair) in adapter.layers_mut().values_mut().enumerate() {
        let (r, d) = pair.b.shape();
        pair.b = seeded_random_matrix(r, d, seed ^ (j as u64 + 17) << 20, Distribution::Gaussian { std: 0.02 });
    }
    Ok(adapter)
}

pub fn build_fixture(cfg: &BenchConfig) -> Result<BenchFixture> {
    cfg.validate()?;
    let backbone = Backbone::new(cfg.backbone)?;
    let n_words = (cfg.backbone.vocab_size - 16).min(200);
    let words: Vec<String> = (0..n_words).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::from_words(words.iter().map(String::as_str).chain(["."]));
    let dot = vocab.id(".");

    let mut registry = LoraRegistry::new();
    let mut first = None;
    for i in 0..cfg.n_adapters {
        let adapter = random_adapter(cfg, i)?;
        registry.register(&adapter)?;
        first.get_or_insert(adapter);
    }
    let merged = first.expect("n_adapters > 0").merged_into(&backbone)?;

    let vectorizer = HashVectorizer::default();
    let dims = MiniMlp::dims([vectorizer.dim, DESK_WIDTHS[1], DESK_WIDTHS[2], DESK_WIDTHS[3]], cfg.n_adapters);
    let mut mlp = MiniMlp::new(&dims, cfg.seed)?;
    // The output weights start at zero, so the logits equal this bias.
    let mut rng = seeded_rng(cfg.seed ^ 0x5C81);
    let chosen = rand::seq::index::sample(&mut rng, cfg.n_adapters, cfg.fused_adapters);
    let bias = mlp.output_bias_mut();
    for slot in chosen {
        bias[slot] = ROUTER_BIAS;
    }
    let router = Router::new(vectorizer, mlp, registry.labels().to_vec())?;

    let k = cfg.tokens_per_sentence;
    let mut sentence_token = |pos: usize| -> TokenId {
        if (pos + 1).is_multiple_of(k) {
            dot
        } else {
            vocab.id(&words[rng.random_range(0..words.len())])
        }
    };
    let prompt: Vec<TokenId> = (0..k).map(&mut sentence_token).collect();
    let script: Vec<TokenId> = (0..cfg.tokens_to_generate).map(&mut sentence_token).collect();
    Ok(BenchFixture {
        backbone,
        merged,
        vocab,
        router,
        registry,
        prompt,
        script,
    })
}

struct Sample {
    elapsed: Duration,
    invocations: usize,
    mean_selected: f64,
}

fn run_once(fx: &BenchFixture, method: BenchMethod, engine: &EngineConfig) -> Result<Sample> {
    let (backbone, routing, granularity) = match method {
        BenchMethod::Base => (&fx.backbone, Routing::Fixed(&NoAdaptation), Granularity::Sentence),
        BenchMethod::SingleLoraMerged => (&fx.merged, Routing::Fixed(&NoAdaptation), Granularity::Sentence),
        BenchMethod::DlpSentence | BenchMethod::TokenReroutingBaseline => (
            &fx.backbone,
            Routing::Dynamic {
                router: &fx.router,
                registry: &fx.registry,
            },
            if method == BenchMethod::DlpSentence {
                Granularity::Sentence
            } else {
                Granularity::Token
            },
        ),
    };
    let cfg = EngineConfig {
        granularity,
        ..engine.clone()
    };
    let mut session = SessionState::new();
    let t0 = Instant::now();
    let out = run_tokens(&fx.prompt, &mut session, backbone, &fx.vocab, &routing, &cfg, Emission::Scripted(&fx.script))?;
    let elapsed = t0.elapsed();
    if out.tokens != fx.script {
        return Err(Error::Measurement(format!("{} did not replay the scripted stream", method.as_str())));
    }
    let entries = &session.trace.entries;
    let mean_selected = if entries.is_empty() {
        0.0
    } else {
        entries.iter().map(|e| e.selected_labels.len()).sum::<usize>() as f64 / entries.len() as f64
    };
    Ok(Sample {
        elapsed,
        invocations: session.router_invocations,
        mean_selected,
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median over repetitions of `num[i] / den[i]`. Runs of one repetition
/// execute back to back, so pairing them cancels machine-level drift that a
/// ratio of two independent medians would pick up.
pub fn paired_median_ratio(num: &[f64], den: &[f64]) -> f64 {
    let mut r: Vec<f64> = num.iter().zip(den).map(|(a, b)| a / b).collect();
    r.sort_by(f64::total_cmp);
    median(&r)
}

fn summarize(method: BenchMethod, n_adapters: usize, samples: &[Sample]) -> MethodStats {
    let ms: Vec<f64> = samples.iter().map(|s| s.elapsed.as_secs_f64() * 1e3).collect();
    let mut sorted = ms.clone();
    sorted.sort_by(f64::total_cmp);
    let n = ms.len() as f64;
    let mean = ms.iter().sum::<f64>() / n;
    let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    MethodStats {
        method,
        n_adapters,
        median_ms: median(&sorted),
        mean_ms: mean,
        stddev_ms: var.sqrt(),
        ratio_vs_base: None,
        ratio_vs_single_lora: None,
        router_invocations: samples[0].invocations,
        mean_selected: samples[0].mean_selected,
        samples_ms: ms,
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let fx = build_fixture(cfg)?;
    run_bench_on(&fx, cfg)
}

/// Times every configured method on a prepared fixture. Repetitions are
/// interleaved across methods with a rotating order so slow drift in the
/// machine spreads evenly over them.
pub fn run_bench_on(fx: &BenchFixture, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let environment = Environment::capture();
    let engine = EngineConfig {
        router: RouterConfig {
            p_threshold: cfg.p_threshold,
            ..RouterConfig::default()
        },
        max_new_tokens: cfg.tokens_to_generate,
        ..EngineConfig::default()
    };
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    let mut samples: Vec<Vec<Sample>> = methods.iter().map(|_| Vec::new()).collect();
    for rep in 0..cfg.warmup + cfg.repetitions {
        for k in 0..methods.len() {
            let i = (k + rep) % methods.len();
            let s = run_once(fx, methods[i], &engine)?;
            if rep >= cfg.warmup {
                samples[i].push(s);
            }
        }
    }

    let mut stats: Vec<MethodStats> = methods
        .iter()
        .zip(&samples)
        .map(|(&m, s)| summarize(m, cfg.n_adapters, s))
        .collect();
    check_measurable(&stats, environment.timer_resolution_ns)?;
    let samples_of = |m: BenchMethod| stats.iter().find(|s| s.method == m).map(|s| s.samples_ms.clone());
    let (base, single) = (samples_of(BenchMethod::Base), samples_of(BenchMethod::SingleLoraMerged));
    for s in &mut stats {
        s.ratio_vs_base = base.as_deref().map(|b| paired_median_ratio(&s.samples_ms, b));
        s.ratio_vs_single_lora = single.as_deref().map(|b| paired_median_ratio(&s.samples_ms, b));
    }
    Ok(BenchReport {
        config: cfg.clone(),
        environment,
        methods: stats,
    })
}

/// Rejects medians too close to the clock's resolution to be trusted.
pub fn check_measurable(stats: &[MethodStats], timer_resolution_ns: f64) -> Result<()> {
    let floor_ms = timer_resolution_ns * MIN_TICKS / 1e6;
    match stats.iter().find(|m| !m.median_ms.is_finite() || m.median_ms < floor_ms) {
        Some(m) => Err(Error::Measurement(format!(
            "{} median {:.6} ms is within {MIN_TICKS} timer ticks; increase tokens_to_generate",
            m.method.as_str(),
            m.median_ms
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n_adapters: usize,
    pub ratio_vs_base: f64,
    pub ratio_vs_single_lora: f64,
    pub param_fraction: f64,
}

/// One [`run_bench`] per adapter count, reporting the routed method against
/// base and merged single-adapter decoding.
pub fn scaling_ablation(n_list: &[usize], cfg: &BenchConfig) -> Result<Vec<ScalingRow>> {
    let base_cfg = BenchConfig {
        methods: vec![BenchMethod::Base, BenchMethod::SingleLoraMerged, BenchMethod::DlpSentence],
        ..cfg.clone()
    };
    n_list
        .iter()
        .map(|&n| {
            let c = BenchConfig {
                n_adapters: n,
                ..base_cfg.clone()
            };
            let fx = build_fixture(&c)?;
            let report = run_bench_on(&fx, &c)?;
            let dlp = report.stats(BenchMethod::DlpSentence).expect("method requested");
            Ok(ScalingRow {
                n_adapters: n,
                ratio_vs_base: dlp.ratio_vs_base.expect("base requested"),
                ratio_vs_single_lora: dlp.ratio_vs_single_lora.expect("single requested"),
                param_fraction: adapter_param_fraction(&fx.registry, &fx.backbone),
            })
        })
        .collect()
}

/// Total adapter parameters over backbone parameters.
pub fn adapter_param_fraction(registry: &LoraRegistry, backbone: &Backbone) -> f64 {
    registry.parameter_count() as f64 / backbone.parameter_count() as f64
}

#[cfg(test)]
mod tests;
