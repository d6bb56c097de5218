use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dlp_core::backbone::{Backbone, Vocab};
use dlp_core::bench::{adapter_param_fraction, build_fixture, csv_rows, run_bench_on, BenchConfig, BenchReport};
use dlp_core::corpus::{build_vocab, generate_tasks, load_task_dir, save_task_dir, split_9_1, TaskCorpus};
use dlp_core::engine::{run_inference, Routing, SessionState};
use dlp_core::evaluation::{adapter_id, evaluate_stream, fit_adapters, fit_router, score_predictions, Prediction, System};
use dlp_core::fusion::{LoraRegistry, MANIFEST_FILE};
use dlp_core::metrics::EvalReport;
use dlp_core::router::Router;
use dlp_core::Error;
use serde::Serialize;

use crate::settings::{self, Format, Settings, Split};
use crate::{CliError, CliResult};

pub const BACKBONE_FILE: &str = "backbone.json";
pub const ROUTER_FILE: &str = "router.json";
pub const ROUTING_FILE: &str = "routing.json";
pub const ADAPTER_DIR: &str = "adapters";

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn unsupported(format: Format, command: &str) -> CliError {
    CliError::Usage(format!("{format:?} output is not available for {command}").to_lowercase())
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
    Ok(())
}

/// Echoes the settings and reports where they went on stderr, keeping
/// stdout for the command's result.
fn start<S: Settings>(s: &S) -> CliResult<()> {
    let path = settings::echo(s)?;
    eprintln!("config: {}", path.display());
    Ok(())
}

/// Train or test half of every task, split with the seed recorded in the
/// data manifest so all commands agree on it.
fn load_split(data: &Path, split: Split) -> CliResult<Vec<TaskCorpus>> {
    let (manifest, tasks) = load_task_dir(data)?;
    let mut out = Vec::with_capacity(tasks.len());
    for t in &tasks {
        let s = split_9_1(t, manifest.seed)?;
        out.push(match split {
            Split::Train => s.train,
            Split::Test => s.test,
        });
    }
    Ok(out)
}

fn load_backbone(path: &Path) -> CliResult<(Backbone, Vocab)> {
    let (backbone, vocab) = Backbone::load(path)?;
    let vocab = vocab.ok_or_else(|| Error::Data(format!("{} carries no vocabulary", path.display())))?;
    Ok((backbone, vocab))
}

pub fn gen_data(s: &settings::GenData) -> CliResult<()> {
    if s.tasks == 0 || s.per_task < 20 {
        return Err(CliError::Usage("tasks must be >= 1 and per_task >= 20".into()));
    }
    start(s)?;
    let seed = s.common.seed;
    let tasks = generate_tasks(s.tasks, s.per_task, seed)?;
    let manifest = save_task_dir(&tasks, &s.common.out, seed)?;
    match s.common.format {
        Format::Json => print_json(&manifest)?,
        Format::Text => {
            for e in &manifest.tasks {
                println!("{:<12} {:<4} {:>5} examples  {}", e.task_label, format!("{:?}", e.kind).to_lowercase(), e.examples, e.file);
            }
            println!("wrote {} tasks to {}", manifest.tasks.len(), s.common.out.display());
        }
        Format::Csv => {
            println!("task_label,kind,file,examples");
            for e in &manifest.tasks {
                println!("{},{},{},{}", e.task_label, format!("{:?}", e.kind).to_lowercase(), e.file, e.examples);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BackboneSummary<'a> {
    path: &'a Path,
    parameters: usize,
    vocab_words: usize,
}

pub fn init_backbone(s: &settings::InitBackbone) -> CliResult<()> {
    let data = required(&s.data, "data")?;
    let (_, tasks) = load_task_dir(data)?;
    let vocab = build_vocab(&tasks);
    if vocab.len() > s.backbone.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary of {} exceeds vocab_size {}",
            vocab.len(),
            s.backbone.vocab_size
        ))
        .into());
    }
    let backbone = Backbone::new(s.backbone)?;
    start(s)?;
    let path = s.common.out.join(BACKBONE_FILE);
    backbone.save(&path, Some(&vocab))?;
    let summary = BackboneSummary {
        path: &path,
        parameters: backbone.parameter_count(),
        vocab_words: vocab.len(),
    };
    match s.common.format {
        Format::Json => print_json(&summary),
        Format::Text => {
            println!(
                "backbone with {} parameters and {} vocabulary entries: {}",
                summary.parameters,
                summary.vocab_words,
                path.display()
            );
            Ok(())
        }
        Format::Csv => Err(unsupported(Format::Csv, "init-backbone")),
    }
}

#[derive(Serialize)]
struct RouterSummary {
    held_out_accuracy: f64,
    n_train: usize,
    n_test: usize,
    seconds: f64,
    epoch_losses: Vec<f32>,
}

pub fn train_router(s: &settings::TrainRouter) -> CliResult<()> {
    let data = required(&s.data, "data")?;
    s.routing.validate()?;
    let train = load_split(data, Split::Train)?;
    start(s)?;
    let t0 = Instant::now();
    let (router, trained) = fit_router(&train, &s.vectorizer, &s.train)?;
    let seconds = t0.elapsed().as_secs_f64();
    router.save(&s.common.out.join(ROUTER_FILE))?;
    dlp_core::io::write_json_pretty(&s.common.out.join(ROUTING_FILE), &s.routing)?;
    let summary = RouterSummary {
        held_out_accuracy: trained.held_out_accuracy,
        n_train: trained.n_train,
        n_test: trained.n_test,
        seconds,
        epoch_losses: trained.epoch_losses,
    };
    match s.common.format {
        Format::Json => print_json(&summary)?,
        Format::Text => {
            for (e, l) in summary.epoch_losses.iter().enumerate() {
                println!("epoch {:>3}  loss {l:.5}", e + 1);
            }
            println!(
                "held-out accuracy {:.4} ({} train / {} held out, {:.1}s)",
                summary.held_out_accuracy, summary.n_train, summary.n_test, summary.seconds
            );
        }
        Format::Csv => {
            println!("held_out_accuracy,n_train,n_test,seconds");
            println!("{},{},{},{:.3}", summary.held_out_accuracy, summary.n_train, summary.n_test, summary.seconds);
        }
    }
    Ok(())
}

pub fn train_adapters(s: &settings::TrainAdapters) -> CliResult<()> {
    let data = required(&s.data, "data")?;
    let (backbone, vocab) = load_backbone(required(&s.backbone, "backbone")?)?;
    s.lora.validate()?;
    let train = load_split(data, Split::Train)?;
    let dir = s.common.out.join(ADAPTER_DIR);

    // Adapters for these tasks are replaced; any others must share the rank.
    let mut registry = if dir.join(MANIFEST_FILE).exists() {
        LoraRegistry::load_snapshot(&dir)?
    } else {
        LoraRegistry::new()
    };
    for t in &train {
        if registry.slot_of(&adapter_id(&t.task_label)).is_some() {
            registry.remove(&adapter_id(&t.task_label))?;
        }
    }
    if let Some(r) = registry.uniform_rank().filter(|&r| r != s.lora.rank) {
        return Err(Error::Rank {
            expected: r,
            found: s.lora.rank,
        }
        .into());
    }
    start(s)?;
    let (adapters, losses) = fit_adapters(&backbone, &vocab, &train, &s.lora)?;
    for a in &adapters {
        registry.register(a)?;
    }
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    registry.save_snapshot(&dir)?;
    match s.common.format {
        Format::Json => print_json(&losses)?,
        Format::Text => {
            for (label, l) in &losses {
                for (e, v) in l.iter().enumerate() {
                    println!("{label:<12} epoch {:>3}  loss {v:.5}", e + 1);
                }
            }
            println!("{} adapters in {}", registry.len(), dir.display());
        }
        Format::Csv => {
            println!("task_label,epoch,loss");
            for (label, l) in &losses {
                for (e, v) in l.iter().enumerate() {
                    println!("{label},{},{v}", e + 1);
                }
            }
        }
    }
    Ok(())
}

struct Loaded {
    backbone: Backbone,
    vocab: Vocab,
    router: Router,
    registry: LoraRegistry,
}

fn load_artifacts(a: &settings::Artifacts) -> CliResult<Loaded> {
    let (backbone, vocab) = load_backbone(required(&a.backbone, "backbone")?)?;
    let router = Router::load(required(&a.router, "router")?)?;
    let registry = LoraRegistry::load_snapshot(required(&a.adapters, "adapters")?)?;
    Ok(Loaded {
        backbone,
        vocab,
        router,
        registry,
    })
}

#[derive(Serialize)]
struct RunOutput<'a> {
    prompt: &'a str,
    output: &'a str,
    trace: &'a [dlp_core::engine::RoutingEvent],
}

pub fn run(s: &settings::Run) -> CliResult<()> {
    if s.common.format == Format::Csv {
        return Err(unsupported(Format::Csv, "run"));
    }
    s.engine.router.validate()?;
    let prompt = match (&s.prompt, &s.prompt_file) {
        (Some(p), _) => p.clone(),
        (None, Some(f)) => std::fs::read_to_string(f).map_err(|e| Error::Io {
            path: f.clone(),
            source: e,
        })?,
        (None, None) => return Err(CliError::Usage("--prompt or --prompt-file is required".into())),
    };
    let prompt = prompt.trim_end();
    let m = load_artifacts(&s.artifacts)?;
    start(s)?;
    let mut session = SessionState::new();
    let routing = Routing::Dynamic {
        router: &m.router,
        registry: &m.registry,
    };
    let out = run_inference(prompt, &mut session, &m.backbone, &m.vocab, &routing, &s.engine)?;
    session.trace.save_jsonl(&s.common.out.join("trace.jsonl"))?;
    match s.common.format {
        Format::Json => print_json(&RunOutput {
            prompt,
            output: &out.text,
            trace: &session.trace.entries,
        })?,
        _ => {
            println!("{}", out.text);
            if s.trace {
                println!();
                print!("{}", session.trace.to_columns());
            }
        }
    }
    Ok(())
}

fn load_predictions(path: &Path) -> CliResult<Vec<Prediction>> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn save_predictions(path: &Path, preds: &[Prediction]) -> CliResult<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for p in preds {
        serde_json::to_writer(&mut w, p).map_err(Error::from)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    accuracy: f64,
    predictions: usize,
    report: &'a EvalReport,
}

fn report_csv(report: &EvalReport) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("task,accuracy,bleu,rouge1,rougeL\n");
    let mean = "mean".to_string();
    let rows = report.per_task.iter().chain(std::iter::once((&mean, &report.aggregate)));
    for (task, sc) in rows {
        let _ = writeln!(out, "{task},{},{},{},{}", cell(sc.accuracy), cell(sc.bleu), cell(sc.rouge1), cell(sc.rouge_l));
    }
    out
}

pub fn eval(s: &settings::Eval) -> CliResult<()> {
    let data = required(&s.data, "data")?;
    let tasks = load_split(data, s.split)?;
    let (accuracy, report, preds) = match &s.predictions {
        Some(path) => {
            let preds = load_predictions(path)?;
            let outs: Vec<&str> = preds.iter().map(|p| p.output.as_str()).collect();
            let golds: Vec<&str> = preds.iter().map(|p| p.target.as_str()).collect();
            let acc = dlp_core::metrics::accuracy(&outs, &golds)?;
            (acc, score_predictions(&preds, &tasks)?, None)
        }
        None => {
            s.engine.router.validate()?;
            let m = load_artifacts(&s.artifacts)?;
            let system = System {
                vocab: m.vocab,
                backbone: m.backbone,
                router: m.router,
                registry: m.registry,
                splits: Vec::new(),
            };
            let r = evaluate_stream(&system, &tasks, s.mode, &s.engine, s.common.seed)?;
            (r.accuracy, r.report, Some(r.predictions))
        }
    };
    start(s)?;
    if let Some(p) = &preds {
        save_predictions(&s.common.out.join("predictions.jsonl"), p)?;
    }
    dlp_core::io::write_json_pretty(&s.common.out.join("eval.json"), &report)?;
    let n = preds.as_ref().map_or(0, Vec::len);
    match s.common.format {
        Format::Json => print_json(&EvalOutput {
            accuracy,
            predictions: n,
            report: &report,
        })?,
        Format::Text => {
            print!("{}", report.to_table());
            println!("overall accuracy {accuracy:.4}");
        }
        Format::Csv => print!("{}", report_csv(&report)),
    }
    Ok(())
}

/// Bar chart of ratios against base, one line per (adapter count, method).
fn text_chart(reports: &[BenchReport]) -> String {
    let mut out = String::new();
    for r in reports {
        for m in &r.methods {
            let ratio = m.ratio_vs_base.unwrap_or(f64::NAN);
            let bar = if ratio.is_finite() { "#".repeat((ratio * 20.0).round() as usize) } else { String::new() };
            let _ = writeln!(out, "n={:<4} {:<25} {bar} {ratio:.2}x", m.n_adapters, m.method.as_str());
        }
    }
    out
}

/// Whitespace-separated data for gnuplot: one block per method.
fn gnuplot_data(reports: &[BenchReport]) -> String {
    let mut out = String::from("# n_adapters median_ms ratio_vs_base ratio_vs_single_lora\n");
    let methods: Vec<_> = reports.first().map(|r| r.methods.iter().map(|m| m.method).collect()).unwrap_or_default();
    for method in methods {
        let _ = writeln!(out, "\n# {}", method.as_str());
        for r in reports {
            if let Some(m) = r.stats(method) {
                let f = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
                let _ = writeln!(out, "{} {:.6} {} {}", m.n_adapters, m.median_ms, f(m.ratio_vs_base), f(m.ratio_vs_single_lora));
            }
        }
    }
    out
}

#[derive(Serialize)]
struct BenchRun {
    report: BenchReport,
    adapter_param_fraction: f64,
}

pub fn bench(s: &settings::Bench) -> CliResult<()> {
    if s.n_adapters.is_empty() {
        return Err(CliError::Usage("at least one --n-adapters value is required".into()));
    }
    for &n in &s.n_adapters {
        BenchConfig {
            n_adapters: n,
            ..s.bench.clone()
        }
        .validate()?;
    }
    start(s)?;
    let mut runs = Vec::with_capacity(s.n_adapters.len());
    for &n in &s.n_adapters {
        let cfg = BenchConfig {
            n_adapters: n,
            ..s.bench.clone()
        };
        let fx = build_fixture(&cfg)?;
        let report = run_bench_on(&fx, &cfg)?;
        runs.push(BenchRun {
            adapter_param_fraction: adapter_param_fraction(&fx.registry, &fx.backbone),
            report,
        });
    }
    let reports: Vec<BenchReport> = runs.iter().map(|r| r.report.clone()).collect();
    let rows: Vec<_> = reports.iter().flat_map(|r| r.methods.clone()).collect();
    let csv = csv_rows(&rows);
    let out = &s.common.out;
    dlp_core::io::write_json_pretty(&out.join("bench.json"), &runs)?;
    let write = |name: &str, text: &str| {
        std::fs::write(out.join(name), text).map_err(|e| Error::Io {
            path: out.join(name),
            source: e,
        })
    };
    write("bench.csv", &csv)?;
    write("bench.dat", &gnuplot_data(&reports))?;
    match s.common.format {
        Format::Json => print_json(&runs)?,
        Format::Csv => print!("{csv}"),
        Format::Text => {
            println!("{:<26} {:>5} {:>10} {:>9} {:>9} {:>9}", "method", "n", "median_ms", "stddev", "vs_base", "vs_single");
            for m in &rows {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
                println!(
                    "{:<26} {:>5} {:>10.3} {:>9.3} {:>9} {:>9}",
                    m.method.as_str(),
                    m.n_adapters,
                    m.median_ms,
                    m.stddev_ms,
                    f(m.ratio_vs_base),
                    f(m.ratio_vs_single_lora)
                );
            }
            println!();
            print!("{}", text_chart(&reports));
            for r in &runs {
                println!(
                    "n={}: adapter parameters are {:.4}% of the backbone",
                    r.report.config.n_adapters,
                    100.0 * r.adapter_param_fraction
                );
            }
        }
    }
    Ok(())
}
