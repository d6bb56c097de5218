use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn dlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", stderr(o));
}

/// Failures end with exactly one `error[CODE]: ...` line on stderr.
fn assert_error(o: &Output, code: &str, exit: i32) {
    assert_eq!(o.status.code(), Some(exit), "stderr: {}", stderr(o));
    let err = stderr(o);
    let errors: Vec<&str> = err.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(errors.len(), 1, "{err}");
    assert_eq!(err.lines().last(), Some(errors[0]), "{err}");
    assert!(errors[0].starts_with(&format!("error[{code}]: ")), "{err}");
}

struct Trained {
    _root: tempfile::TempDir,
    data: PathBuf,
    art: PathBuf,
}

/// Three small tasks, a tiny backbone, a router and adapters, trained once
/// for all tests in this file.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        let art = root.path().join("art");
        assert_ok(&dlp(&["gen-data", "--tasks", "3", "--per-task", "60", "--seed", "4", "--out", p(&data)]));
        assert_ok(&dlp(&[
            "init-backbone", "--data", p(&data), "--d-model", "32", "--heads", "2", "--layers", "2",
            "--ffn", "64", "--vocab-size", "128", "--max-seq-len", "64", "--out", p(&art),
        ]));
        assert_ok(&dlp(&["train-router", "--data", p(&data), "--epochs", "15", "--out", p(&art)]));
        let backbone = art.join("backbone.json");
        assert_ok(&dlp(&[
            "train-adapters", "--data", p(&data), "--backbone", p(&backbone), "--rank", "2", "--epochs", "2",
            "--out", p(&art),
        ]));
        Trained {
            _root: root,
            data,
            art,
        }
    })
}

fn artifact_args(t: &Trained) -> Vec<String> {
    vec![
        "--backbone".into(),
        p(&t.art.join("backbone.json")).into(),
        "--router".into(),
        p(&t.art.join("router.json")).into(),
        "--adapters".into(),
        p(&t.art.join("adapters")).into(),
    ]
}

fn first_prompt(data: &Path, task: &str) -> String {
    let text = std::fs::read_to_string(data.join(format!("{task}.jsonl"))).unwrap();
    let v: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    v["prompt"].as_str().unwrap().to_string()
}

#[test]
fn gen_data_writes_one_file_per_task_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_ok(&dlp(&["gen-data", "--tasks", "8", "--per-task", "20", "--seed", "7", "--out", p(out)]));
    }
    let jsonl: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".jsonl"))
        .collect();
    assert_eq!(jsonl.len(), 8);
    for name in jsonl.iter().map(String::as_str).chain(["manifest.json"]) {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert_ok(&dlp(&["gen-data", "--tasks", "2", "--per-task", "25", "--seed", "3", "--out", p(&a)]));
    let echoed = a.join("gen-data.config.json");
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(&echoed).unwrap()).unwrap();
    assert_eq!(cfg["tasks"], 2);
    assert_eq!(cfg["per_task"], 25);
    assert_eq!(cfg["seed"], 3);

    let b = dir.path().join("b");
    assert_ok(&dlp(&["gen-data", "--config", p(&echoed), "--out", p(&b)]));
    for name in ["astronomy.jsonl", "cooking.jsonl", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn zero_tasks_is_a_usage_error() {
    assert_error(&dlp(&["gen-data", "--tasks", "0"]), "E_USAGE", 2);
}

#[test]
fn missing_data_dir_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    let out = dir.path().join("out");
    assert_error(&dlp(&["train-router", "--data", p(&missing), "--out", p(&out)]), "E_IO", 1);
}

#[test]
fn single_task_router_is_certain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_ok(&dlp(&["gen-data", "--tasks", "1", "--per-task", "20", "--out", p(&data)]));
    let o = dlp(&["train-router", "--data", p(&data), "--epochs", "2", "--format", "json", "--out", p(&dir.path().join("r"))]);
    assert_ok(&o);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["held_out_accuracy"], 1.0);
}

#[test]
fn eight_task_router_reaches_high_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_ok(&dlp(&["gen-data", "--tasks", "8", "--per-task", "200", "--out", p(&data)]));
    let o = dlp(&["train-router", "--data", p(&data), "--format", "json", "--out", p(&dir.path().join("r"))]);
    assert_ok(&o);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let acc = v["held_out_accuracy"].as_f64().unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn adapters_are_written_per_task_and_rank_mismatch_is_rejected() {
    let t = trained();
    let dir = t.art.join("adapters");
    for task in ["astronomy", "cooking", "music"] {
        assert!(dir.join(format!("lora-{task}.json")).exists(), "{task}");
    }
    assert!(dir.join("manifest.json").exists());

    // retraining only one task at another rank would mix ranks in one registry
    let scratch = tempfile::tempdir().unwrap();
    let one = scratch.path().join("one");
    std::fs::create_dir_all(&one).unwrap();
    std::fs::copy(t.data.join("astronomy.jsonl"), one.join("astronomy.jsonl")).unwrap();
    let mut manifest: Value = serde_json::from_str(&std::fs::read_to_string(t.data.join("manifest.json")).unwrap()).unwrap();
    let first = manifest["tasks"][0].clone();
    manifest["tasks"] = Value::Array(vec![first]);
    std::fs::write(one.join("manifest.json"), manifest.to_string()).unwrap();
    let out = scratch.path().join("art");
    copy_dir(&t.art.join("adapters"), &out.join("adapters"));
    let o = dlp(&[
        "train-adapters", "--data", p(&one), "--backbone", p(&t.art.join("backbone.json")), "--rank", "3",
        "--epochs", "1", "--out", p(&out),
    ]);
    assert_error(&o, "E_RANK", 1);
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

#[test]
fn adapter_training_logs_every_epoch() {
    let t = trained();
    let echoed: Value =
        serde_json::from_str(&std::fs::read_to_string(t.art.join("train-adapters.config.json")).unwrap()).unwrap();
    assert_eq!(echoed["lora"]["rank"], 2);
    let scratch = tempfile::tempdir().unwrap();
    let o = dlp(&[
        "train-adapters", "--data", p(&t.data), "--backbone", p(&t.art.join("backbone.json")), "--rank", "2",
        "--epochs", "2", "--format", "csv", "--out", p(scratch.path()),
    ]);
    assert_ok(&o);
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "task_label,epoch,loss");
    assert_eq!(rows.len(), 1 + 3 * 2);
}

#[test]
fn single_theme_prompt_routes_to_its_adapter() {
    let t = trained();
    let prompt = first_prompt(&t.data, "music");
    let out = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = vec!["run".into(), "--prompt".into(), prompt, "--format".into(), "json".into()];
    args.extend(artifact_args(t));
    args.extend(["--out".into(), p(out.path()).into()]);
    let o = dlp(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_ok(&o);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let trace = v["trace"].as_array().unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace[0]["selected_labels"][0], "music");
    assert!(trace[0]["weights"][0].as_f64().unwrap() > 0.5);
    assert!(out.path().join("trace.jsonl").exists());
}

#[test]
fn three_sentence_prompt_gives_three_trace_entries() {
    let t = trained();
    let prompt = ["astronomy", "cooking", "music"]
        .iter()
        .map(|task| format!("{} .", first_prompt(&t.data, task)))
        .collect::<Vec<_>>()
        .join(" ");
    let out = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = vec!["run".into(), "--prompt".into(), prompt, "--trace".into(), "--max-new".into(), "0".into()];
    args.extend(artifact_args(t));
    args.extend(["--out".into(), p(out.path()).into()]);
    let o = dlp(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_ok(&o);
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with('[')).collect();
    assert_eq!(rows.len(), 3, "{text}");
    for (row, task) in rows.iter().zip(["astronomy", "cooking", "music"]) {
        assert!(row.contains(&format!("| {task}")), "{row}");
    }
}

#[test]
fn threshold_outside_unit_interval_is_a_usage_error() {
    let t = trained();
    let mut args: Vec<String> = vec!["run".into(), "--prompt".into(), "x".into(), "--p".into(), "1.5".into()];
    args.extend(artifact_args(t));
    assert_error(&dlp(&args.iter().map(String::as_str).collect::<Vec<_>>()), "E_USAGE", 2);
}

#[test]
fn missing_adapter_for_router_label_surfaces_the_label() {
    let t = trained();
    let scratch = tempfile::tempdir().unwrap();
    let partial = scratch.path().join("adapters");
    copy_dir(&t.art.join("adapters"), &partial);
    std::fs::remove_file(partial.join("lora-cooking.json")).unwrap();
    let mut m: Value = serde_json::from_str(&std::fs::read_to_string(partial.join("manifest.json")).unwrap()).unwrap();
    let order: Vec<Value> = m["order"].as_array().unwrap().iter().filter(|v| *v != "lora-cooking").cloned().collect();
    m["order"] = Value::Array(order);
    std::fs::write(partial.join("manifest.json"), m.to_string()).unwrap();
    let o = dlp(&[
        "run", "--prompt", "a b", "--backbone", p(&t.art.join("backbone.json")), "--router", p(&t.art.join("router.json")),
        "--adapters", p(&partial), "--out", p(scratch.path()),
    ]);
    assert_error(&o, "E_ROUTING", 1);
    assert!(stderr(&o).contains("cooking"));
}

#[test]
fn eval_of_identical_predictions_is_perfect() {
    let t = trained();
    let scratch = tempfile::tempdir().unwrap();
    let preds = scratch.path().join("preds.jsonl");
    let mut lines = String::new();
    for task in ["astronomy", "cooking", "music"] {
        for line in std::fs::read_to_string(t.data.join(format!("{task}.jsonl"))).unwrap().lines() {
            let r: Value = serde_json::from_str(line).unwrap();
            let pred = serde_json::json!({
                "task_label": r["task_label"], "prompt": r["prompt"], "target": r["target"], "output": r["target"],
            });
            lines.push_str(&pred.to_string());
            lines.push('\n');
        }
    }
    std::fs::write(&preds, lines).unwrap();
    let o = dlp(&[
        "eval", "--data", p(&t.data), "--predictions", p(&preds), "--format", "json", "--out", p(scratch.path()),
    ]);
    assert_ok(&o);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["accuracy"], 1.0);
    assert_eq!(v["report"]["aggregate"]["accuracy"], 1.0);
}

#[test]
fn eval_decodes_the_test_split() {
    let t = trained();
    let scratch = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = vec!["eval".into(), "--data".into(), p(&t.data).into(), "--mode".into(), "oracle".into()];
    args.extend(artifact_args(t));
    args.extend(["--format".into(), "csv".into(), "--out".into(), p(scratch.path()).into()]);
    let o = dlp(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_ok(&o);
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("task,accuracy,bleu,rouge1,rougeL"));
    assert_eq!(text.lines().count(), 1 + 3 + 1);
    // 60 examples per task: 6 held out each
    let preds = std::fs::read_to_string(scratch.path().join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 18);
}

#[test]
fn bench_self_ratio_and_csv_schema() {
    let scratch = tempfile::tempdir().unwrap();
    let o = dlp(&[
        "bench", "--n-adapters", "2", "--tokens", "32", "--repetitions", "3", "--methods", "base,single_lora_merged",
        "--format", "csv", "--out", p(scratch.path()),
    ]);
    assert_ok(&o);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("method,n_adapters,median_ms,mean_ms,stddev_ms,ratio_vs_base,ratio_vs_single_lora")
    );
    let base: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(base[0], "base");
    assert_eq!(base[5], "1.0000");
    let single: Vec<&str> = lines.next().unwrap().split(',').collect();
    let r: f64 = single[5].parse().unwrap();
    assert!((0.5..2.0).contains(&r), "merged vs base {r}");
    for f in ["bench.json", "bench.csv", "bench.dat", "bench.config.json"] {
        assert!(scratch.path().join(f).exists(), "{f}");
    }
}

#[test]
fn bench_rejects_too_few_repetitions() {
    let scratch = tempfile::tempdir().unwrap();
    let o = dlp(&["bench", "--repetitions", "2", "--out", p(scratch.path())]);
    assert_error(&o, "E_CONFIG", 1);
}
