//! `dlp`: data generation, router and adapter training, routed inference,
//! evaluation and latency benchmarks.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlp_core::backbone::InjectionTargets;
use dlp_core::bench::BenchMethod;
use dlp_core::engine::Granularity;
use dlp_core::evaluation::EvalMode;

use settings::{Format, Settings, Split};

#[derive(Parser, Debug)]
#[command(name = "dlp", version, about = "Sentence-level dynamic LoRA routing and fusion")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON settings file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic task corpora: one JSONL per task plus a manifest.
    GenData {
        #[arg(long, value_parser = |s: &str| parse_at_least(s, 1))]
        tasks: Option<usize>,
        #[arg(long, value_parser = |s: &str| parse_at_least(s, 20))]
        per_task: Option<usize>,
    },
    /// Create a randomly initialized backbone with the corpus vocabulary.
    InitBackbone {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        ffn: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        max_seq_len: Option<usize>,
    },
    /// Train the sentence router on the training split.
    TrainRouter {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Hidden widths, e.g. `256,128,64`.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        /// Selection threshold stored for routed inference.
        #[arg(long, value_parser = parse_p)]
        p: Option<f32>,
    },
    /// Train one adapter per task on the frozen backbone.
    TrainAdapters {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long, value_enum)]
        targets: Option<TargetsArg>,
    },
    /// Routed generation for one prompt.
    Run {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long, conflicts_with = "prompt_file")]
        prompt: Option<String>,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        #[command(flatten)]
        routing: RoutingArgs,
        /// Print the per-sentence routing decisions.
        #[arg(long)]
        trace: bool,
    },
    /// Score a data split, either by decoding or from a predictions file.
    Eval {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<Split>,
        /// JSONL of {task_label, prompt, target, output} to score directly.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[command(flatten)]
        routing: RoutingArgs,
    },
    /// Latency of base, merged single adapter, sentence routing and per-token
    /// routing.
    Bench {
        #[arg(long, value_delimiter = ',')]
        n_adapters: Option<Vec<usize>>,
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        tokens_per_sentence: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Option<Vec<BenchMethod>>,
        #[arg(long)]
        rank: Option<usize>,
        /// Adapters fused at each trigger.
        #[arg(long)]
        fused: Option<usize>,
        #[arg(long, value_parser = parse_p)]
        p: Option<f32>,
    },
}

#[derive(Args, Debug)]
struct ArtifactArgs {
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    router: Option<PathBuf>,
    /// Adapter registry directory.
    #[arg(long)]
    adapters: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RoutingArgs {
    /// Routing settings file written by `train-router`.
    #[arg(long)]
    routing: Option<PathBuf>,
    #[arg(long, value_parser = parse_p)]
    p: Option<f32>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long, value_enum)]
    granularity: Option<GranularityArg>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum TargetsArg {
    Attention,
    AttentionAndFfn,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum ModeArg {
    Base,
    Oracle,
    Dlp,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum GranularityArg {
    Sentence,
    Token,
}

fn parse_p(s: &str) -> Result<f32, String> {
    let p: f32 = s.parse().map_err(|e| format!("{e}"))?;
    if p > 0.0 && p <= 1.0 {
        Ok(p)
    } else {
        Err(format!("p must be in (0, 1], got {p}"))
    }
}

fn parse_at_least(s: &str, min: usize) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|e| format!("{e}"))?;
    if n >= min {
        Ok(n)
    } else {
        Err(format!("must be at least {min}"))
    }
}

fn parse_method(s: &str) -> Result<BenchMethod, String> {
    s.parse().map_err(|e: dlp_core::Error| e.to_string())
}

/// Failure of one invocation, reported as `error[CODE]: message`.
pub enum CliError {
    Usage(String),
    Core(dlp_core::Error),
}

impl From<dlp_core::Error> for CliError {
    fn from(e: dlp_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "E_USAGE",
            CliError::Core(e) => e.code(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn resolve<S: Settings>(global: &Global) -> CliResult<S> {
    let mut s: S = settings::load(global.config.as_deref())?;
    let c = s.common_mut();
    if let Some(seed) = global.seed {
        c.seed = seed;
    }
    if let Some(out) = &global.out {
        c.out = out.clone();
    }
    if let Some(f) = global.format {
        c.format = f;
    }
    Ok(s)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_some<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn apply_artifacts(a: &mut settings::Artifacts, args: ArtifactArgs) {
    set_some(&mut a.backbone, args.backbone);
    set_some(&mut a.router, args.router);
    set_some(&mut a.adapters, args.adapters);
}

fn apply_routing(engine: &mut dlp_core::engine::EngineConfig, args: RoutingArgs) -> CliResult<()> {
    if let Some(path) = &args.routing {
        engine.router = dlp_core::io::read_json(path)?;
    }
    set(&mut engine.router.p_threshold, args.p);
    set(&mut engine.max_new_tokens, args.max_new);
    if let Some(g) = args.granularity {
        engine.granularity = match g {
            GranularityArg::Sentence => Granularity::Sentence,
            GranularityArg::Token => Granularity::Token,
        };
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenData { tasks, per_task } => {
            let mut s: settings::GenData = resolve(g)?;
            set(&mut s.tasks, tasks);
            set(&mut s.per_task, per_task);
            commands::gen_data(&s)
        }
        Command::InitBackbone {
            data,
            d_model,
            heads,
            layers,
            ffn,
            vocab_size,
            max_seq_len,
        } => {
            let mut s: settings::InitBackbone = resolve(g)?;
            set_some(&mut s.data, data);
            let b = &mut s.backbone;
            set(&mut b.d_model, d_model);
            set(&mut b.n_heads, heads);
            set(&mut b.n_layers, layers);
            set(&mut b.ffn_dim, ffn);
            set(&mut b.vocab_size, vocab_size);
            set(&mut b.max_seq_len, max_seq_len);
            b.seed = s.common.seed;
            commands::init_backbone(&s)
        }
        Command::TrainRouter { data, dims, epochs, lr, p } => {
            let mut s: settings::TrainRouter = resolve(g)?;
            set_some(&mut s.data, data);
            if let Some(d) = dims {
                s.train.hidden = [d[0], d[1], d[2]];
            }
            set(&mut s.train.epochs, epochs);
            set(&mut s.train.learning_rate, lr);
            set(&mut s.routing.p_threshold, p);
            s.train.seed = s.common.seed;
            commands::train_router(&s)
        }
        Command::TrainAdapters {
            data,
            backbone,
            rank,
            epochs,
            lr,
            targets,
        } => {
            let mut s: settings::TrainAdapters = resolve(g)?;
            set_some(&mut s.data, data);
            set_some(&mut s.backbone, backbone);
            set(&mut s.lora.rank, rank);
            set(&mut s.lora.epochs, epochs);
            set(&mut s.lora.learning_rate, lr);
            if let Some(t) = targets {
                s.lora.targets = match t {
                    TargetsArg::Attention => InjectionTargets::Attention,
                    TargetsArg::AttentionAndFfn => InjectionTargets::AttentionAndFfn,
                };
            }
            s.lora.seed = s.common.seed;
            commands::train_adapters(&s)
        }
        Command::Run {
            artifacts,
            prompt,
            prompt_file,
            routing,
            trace,
        } => {
            let mut s: settings::Run = resolve(g)?;
            apply_artifacts(&mut s.artifacts, artifacts);
            if prompt.is_some() || prompt_file.is_some() {
                s.prompt = prompt;
                s.prompt_file = prompt_file;
            }
            s.trace |= trace;
            apply_routing(&mut s.engine, routing)?;
            commands::run(&s)
        }
        Command::Eval {
            artifacts,
            data,
            split,
            predictions,
            mode,
            routing,
        } => {
            let mut s: settings::Eval = resolve(g)?;
            apply_artifacts(&mut s.artifacts, artifacts);
            set_some(&mut s.data, data);
            set(&mut s.split, split);
            set_some(&mut s.predictions, predictions);
            if let Some(m) = mode {
                s.mode = match m {
                    ModeArg::Base => EvalMode::Base,
                    ModeArg::Oracle => EvalMode::Oracle,
                    ModeArg::Dlp => EvalMode::Dlp,
                };
            }
            apply_routing(&mut s.engine, routing)?;
            commands::eval(&s)
        }
        Command::Bench {
            n_adapters,
            tokens,
            tokens_per_sentence,
            repetitions,
            warmup,
            methods,
            rank,
            fused,
            p,
        } => {
            let mut s: settings::Bench = resolve(g)?;
            set(&mut s.n_adapters, n_adapters);
            let b = &mut s.bench;
            set(&mut b.tokens_to_generate, tokens);
            set(&mut b.tokens_per_sentence, tokens_per_sentence);
            set(&mut b.repetitions, repetitions);
            set(&mut b.warmup, warmup);
            set(&mut b.methods, methods);
            set(&mut b.rank, rank);
            set(&mut b.fused_adapters, fused);
            set(&mut b.p_threshold, p);
            b.seed = s.common.seed;
            commands::bench(&s)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.message().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.code());
            ExitCode::from(e.exit_code())
        }
    }
}
