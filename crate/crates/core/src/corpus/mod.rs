//! Synthetic multi-task corpora: generation, 9:1 splitting and JSONL files.

mod themes;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::backbone::{TrainingSequence, Vocab};
use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

/// Words shared by every task's prompt and answer templates.
pub const TEMPLATE_WORDS: [&str; 6] = ["choose", "or", ":", "explain", "it", "is"];
const WORDS_PER_PROMPT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Answer is one of the options listed in the prompt; scored by accuracy.
    Mcq,
    /// Free-form answer; scored by BLEU and ROUGE.
    Qa,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCorpus {
    pub task_label: String,
    pub kind: TaskKind,
    pub examples: Vec<Example>,
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub task_label: String,
    pub prompt: String,
    pub target: String,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCorpus {
    pub train: TaskCorpus,
    pub test: TaskCorpus,
    pub seed: u64,
}

/// Generates `n_tasks` corpora of `per_task` examples each.
///
/// Every task draws prompt words from its own pool (no content word is
/// shared between tasks). The pool is split in two halves; all words of a
/// prompt come from one half, and the answer names that half. Even-numbered
/// tasks are multiple choice (`… choose X or Y :` → `X`), odd-numbered ones
/// free-form (`… explain :` → `it is X`).
pub fn generate_tasks(n_tasks: usize, per_task: usize, seed: u64) -> Result<Vec<TaskCorpus>> {
    if n_tasks == 0 {
        return Err(Error::Contract("at least one task is required".into()));
    }
    if per_task < 20 {
        return Err(Error::Contract(format!("per_task must be at least 20, got {per_task}")));
    }
    Ok((0..n_tasks).map(|t| generate_task(t, per_task, seed)).collect())
}

fn generate_task(task: usize, per_task: usize, seed: u64) -> TaskCorpus {
    let (label, answers, words) = match themes::THEMES.get(task) {
        Some(t) => (
            t.label.to_string(),
            t.answers.map(str::to_string),
            t.words.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
        ),
        None => themes::synthetic_theme(task),
    };
    let kind = if task.is_multiple_of(2) { TaskKind::Mcq } else { TaskKind::Qa };
    let mut rng = seeded_rng(seed.wrapping_mul(0x9e37_79b9).wrapping_add(task as u64));
    let examples = (0..per_task)
        .map(|_| {
            let half = rng.random_range(0..2usize);
            let pool = &words[half * 12..(half + 1) * 12];
            let picked: Vec<&str> = pool
                .sample(&mut rng, WORDS_PER_PROMPT)
                .map(String::as_str)
                .collect();
            let answer = &answers[half];
            match kind {
                TaskKind::Mcq => {
                    let (first, second) = if rng.random_bool(0.5) {
                        (&answers[0], &answers[1])
                    } else {
                        (&answers[1], &answers[0])
                    };
                    Example {
                        prompt: format!("{} choose {first} or {second} :", picked.join(" ")),
                        target: answer.clone(),
                    }
                }
                TaskKind::Qa => Example {
                    prompt: format!("{} explain :", picked.join(" ")),
                    target: format!("it is {answer}"),
                },
            }
        })
        .collect();
    TaskCorpus {
        task_label: label,
        kind,
        examples,
    }
}

impl TaskCorpus {
    /// Content words of the prompts, excluding the shared template words.
    pub fn content_words(&self) -> std::collections::BTreeSet<&str> {
        self.examples
            .iter()
            .flat_map(|e| e.prompt.split_whitespace().chain(e.target.split_whitespace()))
            .filter(|w| !TEMPLATE_WORDS.contains(w))
            .collect()
    }

    /// Prompt followed by target and end-of-sequence; only the answer part
    /// is supervised.
    pub fn training_sequences(&self, vocab: &Vocab) -> Vec<TrainingSequence> {
        self.examples
            .iter()
            .map(|e| {
                let mut tokens = vocab.encode(&e.prompt);
                let prompt_len = tokens.len();
                tokens.extend(vocab.encode(&e.target));
                tokens.push(vocab.eos_id());
                TrainingSequence::new(tokens, prompt_len)
            })
            .collect()
    }

    fn records(&self) -> impl Iterator<Item = Record> + '_ {
        self.examples.iter().map(|e| Record {
            task_label: self.task_label.clone(),
            prompt: e.prompt.clone(),
            target: e.target.clone(),
            kind: self.kind,
        })
    }
}

/// Deterministic shuffled 9:1 split; the test side gets `round(n/10)`
/// examples.
pub fn split_9_1(corpus: &TaskCorpus, seed: u64) -> Result<SplitCorpus> {
    let n = corpus.examples.len();
    if n < 10 {
        return Err(Error::Data(format!(
            "task `{}` has {n} examples; a 9:1 split needs at least 10",
            corpus.task_label
        )));
    }
    let n_test = ((n as f64) / 10.0).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    let part = |idx: &[usize]| TaskCorpus {
        task_label: corpus.task_label.clone(),
        kind: corpus.kind,
        examples: idx.iter().map(|&i| corpus.examples[i].clone()).collect(),
    };
    Ok(SplitCorpus {
        test: part(&order[..n_test]),
        train: part(&order[n_test..]),
        seed,
    })
}

/// Vocabulary over every prompt and target, plus the template words.
pub fn build_vocab(corpora: &[TaskCorpus]) -> Vocab {
    let texts = corpora
        .iter()
        .flat_map(|c| c.examples.iter())
        .flat_map(|e| [e.prompt.as_str(), e.target.as_str()]);
    let mut words: Vec<String> = texts
        .flat_map(|t| crate::backbone::split_tokens(t).into_iter().map(str::to_string).collect::<Vec<_>>())
        .collect();
    words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
    Vocab::from_words(words)
}

/// `(prompt, task_index)` pairs for router training.
pub fn router_examples(corpora: &[TaskCorpus]) -> Vec<(String, usize)> {
    corpora
        .iter()
        .enumerate()
        .flat_map(|(t, c)| c.examples.iter().map(move |e| (e.prompt.clone(), t)))
        .collect()
}

/// Interleaves the corpora into one stream: round `k` holds the `k`-th
/// example of every task that still has one, in a seeded random order.
pub fn composite_stream(corpora: &[TaskCorpus], seed: u64) -> Vec<(usize, Example)> {
    let mut rng = seeded_rng(seed);
    let longest = corpora.iter().map(|c| c.examples.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for k in 0..longest {
        let mut round: Vec<usize> = (0..corpora.len()).filter(|&t| k < corpora[t].examples.len()).collect();
        round.shuffle(&mut rng);
        out.extend(round.into_iter().map(|t| (t, corpora[t].examples[k].clone())));
    }
    out
}

pub fn save_jsonl(corpora: &[TaskCorpus], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in corpora {
        for r in c.records() {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads records and groups them by task label in order of first
/// appearance. Blank lines are skipped; a malformed line is reported with
/// its 1-based number.
pub fn load_jsonl(path: &Path) -> Result<Vec<TaskCorpus>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<TaskCorpus> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if r.prompt.trim().is_empty() {
            return Err(parse_err("empty prompt".into()));
        }
        let example = Example {
            prompt: r.prompt,
            target: r.target,
        };
        match out.iter_mut().find(|c| c.task_label == r.task_label) {
            Some(c) if c.kind != r.kind => {
                return Err(parse_err(format!("task `{}` mixes record kinds", r.task_label)));
            }
            Some(c) => c.examples.push(example),
            None => out.push(TaskCorpus {
                task_label: r.task_label,
                kind: r.kind,
                examples: vec![example],
            }),
        }
    }
    Ok(out)
}

pub const DATA_MANIFEST: &str = "manifest.json";
pub const DATA_FORMAT_VERSION: u32 = 1;

/// Index of a task directory: one JSONL file per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataManifest {
    pub format_version: u32,
    pub seed: u64,
    pub tasks: Vec<DataManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataManifestEntry {
    pub task_label: String,
    pub kind: TaskKind,
    pub file: String,
    pub examples: usize,
}

fn task_file_name(label: &str) -> Result<String> {
    let ok = !label.is_empty() && label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if !ok {
        return Err(Error::Data(format!("task label `{label}` cannot be used as a file name")));
    }
    Ok(format!("{label}.jsonl"))
}

/// Writes `{label}.jsonl` for every task plus [`DATA_MANIFEST`].
pub fn save_task_dir(tasks: &[TaskCorpus], dir: &Path, seed: u64) -> Result<DataManifest> {
    let mut entries = Vec::with_capacity(tasks.len());
    for t in tasks {
        let file = task_file_name(&t.task_label)?;
        save_jsonl(std::slice::from_ref(t), &dir.join(&file))?;
        entries.push(DataManifestEntry {
            task_label: t.task_label.clone(),
            kind: t.kind,
            file,
            examples: t.examples.len(),
        });
    }
    let manifest = DataManifest {
        format_version: DATA_FORMAT_VERSION,
        seed,
        tasks: entries,
    };
    crate::io::write_json_pretty(&dir.join(DATA_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads every task listed in the directory's manifest, in manifest order.
pub fn load_task_dir(dir: &Path) -> Result<(DataManifest, Vec<TaskCorpus>)> {
    let manifest: DataManifest = crate::io::read_json(&dir.join(DATA_MANIFEST))?;
    if manifest.format_version != DATA_FORMAT_VERSION {
        return Err(Error::Version {
            expected: DATA_FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let path = dir.join(&entry.file);
        let mut loaded = load_jsonl(&path)?;
        if loaded.len() != 1 || loaded[0].task_label != entry.task_label || loaded[0].kind != entry.kind {
            return Err(Error::Data(format!(
                "{} does not hold exactly the task `{}`",
                path.display(),
                entry.task_label
            )));
        }
        tasks.push(loaded.remove(0));
    }
    if tasks.is_empty() {
        return Err(Error::Data(format!("{} lists no tasks", dir.display())));
    }
    Ok((manifest, tasks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::HashVectorizer;

    #[test]
    fn generation_examples() {
        let one = generate_tasks(1, 20, 3).unwrap();
        assert_eq!(one.len(), 1);
        let pool: std::collections::BTreeSet<&str> = themes::THEMES[0].words.iter().copied().collect();
        for e in &one[0].examples {
            let content: Vec<&str> = e.prompt.split_whitespace().take(WORDS_PER_PROMPT).collect();
            assert!(content.iter().all(|w| pool.contains(w)), "{}", e.prompt);
        }
        assert_eq!(generate_tasks(3, 30, 9).unwrap(), generate_tasks(3, 30, 9).unwrap());
        assert_ne!(generate_tasks(3, 30, 9).unwrap(), generate_tasks(3, 30, 10).unwrap());
        assert!(generate_tasks(0, 30, 0).is_err());
        assert!(generate_tasks(2, 19, 0).is_err());
    }

    #[test]
    fn content_words_are_disjoint_across_tasks() {
        for n in [8, 12] {
            let tasks = generate_tasks(n, 200, 1).unwrap();
            let sets: Vec<_> = tasks.iter().map(TaskCorpus::content_words).collect();
            for i in 0..n {
                for j in i + 1..n {
                    assert_eq!(sets[i].intersection(&sets[j]).count(), 0, "{i} vs {j}");
                }
            }
        }
    }

    #[test]
    fn mcq_targets_are_listed_options() {
        for c in generate_tasks(4, 50, 2).unwrap() {
            for e in &c.examples {
                match c.kind {
                    TaskKind::Mcq => {
                        let opts: Vec<&str> = e.prompt.split(" choose ").nth(1).unwrap().split_whitespace().collect();
                        assert!(opts[0] == e.target || opts[2] == e.target, "{e:?}");
                    }
                    TaskKind::Qa => assert!(e.target.starts_with("it is ")),
                }
            }
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let big = generate_tasks(1, 1000, 0).unwrap().remove(0);
        let s = split_9_1(&big, 5).unwrap();
        assert_eq!((s.train.examples.len(), s.test.examples.len()), (900, 100));
        let mut small = big.clone();
        small.examples.truncate(10);
        let s10 = split_9_1(&small, 5).unwrap();
        assert_eq!((s10.train.examples.len(), s10.test.examples.len()), (9, 1));
        let mut union: Vec<_> = s10.train.examples.iter().chain(&s10.test.examples).cloned().collect();
        let mut orig = small.examples.clone();
        union.sort_by(|a, b| a.prompt.cmp(&b.prompt).then(a.target.cmp(&b.target)));
        orig.sort_by(|a, b| a.prompt.cmp(&b.prompt).then(a.target.cmp(&b.target)));
        assert_eq!(union, orig);
        small.examples.truncate(9);
        assert!(matches!(split_9_1(&small, 0), Err(Error::Data(_))));
        assert_eq!(split_9_1(&big, 5).unwrap(), s);
    }

    #[test]
    fn jsonl_roundtrip_empty_file_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let tasks = generate_tasks(3, 20, 4).unwrap();
        let path = dir.path().join("all.jsonl");
        save_jsonl(&tasks, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), tasks);

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_jsonl(&empty).unwrap().is_empty());

        let bad = dir.path().join("bad.jsonl");
        let good = r#"{"task_label":"a","prompt":"x y","target":"z","kind":"qa"}"#;
        std::fs::write(&bad, format!("{good}\n{good}\n{{not json\n")).unwrap();
        match load_jsonl(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn task_dir_roundtrip_and_byte_stable_rewrite() {
        let dir = tempfile::tempdir().unwrap();
        let tasks = generate_tasks(3, 20, 9).unwrap();
        let manifest = save_task_dir(&tasks, dir.path(), 9).unwrap();
        assert_eq!(manifest.tasks.len(), 3);
        let (m2, back) = load_task_dir(dir.path()).unwrap();
        assert_eq!((m2, back), (manifest, tasks.clone()));

        let first = std::fs::read(dir.path().join(DATA_MANIFEST)).unwrap();
        save_task_dir(&generate_tasks(3, 20, 9).unwrap(), dir.path(), 9).unwrap();
        assert_eq!(std::fs::read(dir.path().join(DATA_MANIFEST)).unwrap(), first);

        let mut odd = tasks[0].clone();
        odd.task_label = "../x".into();
        assert!(matches!(save_task_dir(&[odd], dir.path(), 0), Err(Error::Data(_))));
        let missing = dir.path().join("nope");
        assert!(matches!(load_task_dir(&missing), Err(Error::Io { .. })));
    }

    #[test]
    fn training_sequences_supervise_answer_only() {
        let tasks = generate_tasks(2, 20, 0).unwrap();
        let vocab = build_vocab(&tasks);
        let seqs = tasks[1].training_sequences(&vocab);
        let e = &tasks[1].examples[0];
        let n_prompt = vocab.encode(&e.prompt).len();
        assert_eq!(seqs[0].supervise_from, n_prompt);
        assert_eq!(*seqs[0].tokens.last().unwrap(), vocab.eos_id());
        assert_eq!(vocab.decode(&seqs[0].tokens[n_prompt..seqs[0].tokens.len() - 1]), e.target);
        assert!(seqs[0].tokens.iter().all(|&t| t != vocab.unk_id()));
    }

    #[test]
    fn composite_stream_interleaves_every_task() {
        let tasks = generate_tasks(8, 20, 0).unwrap();
        let stream = composite_stream(&tasks, 1);
        assert_eq!(stream.len(), 160);
        for round in stream.chunks(8) {
            let mut ids: Vec<usize> = round.iter().map(|(t, _)| *t).collect();
            ids.sort_unstable();
            assert_eq!(ids, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn nearest_centroid_separates_themes() {
        let tasks = generate_tasks(8, 200, 7).unwrap();
        let v = HashVectorizer::default();
        let splits: Vec<SplitCorpus> = tasks.iter().map(|c| split_9_1(c, 1).unwrap()).collect();
        let centroids: Vec<Vec<f32>> = splits
            .iter()
            .map(|s| {
                let mut c = vec![0.0; v.dim];
                for e in &s.train.examples {
                    for (a, b) in c.iter_mut().zip(v.vectorize(&e.prompt)) {
                        *a += b;
                    }
                }
                c
            })
            .collect();
        let (mut correct, mut total) = (0, 0);
        for (t, s) in splits.iter().enumerate() {
            for e in &s.test.examples {
                let x = v.vectorize(&e.prompt);
                let score = |c: &Vec<f32>| {
                    let norm = c.iter().map(|a| a * a).sum::<f32>().sqrt();
                    c.iter().zip(&x).map(|(a, b)| a * b).sum::<f32>() / norm
                };
                let best = (0..8).max_by(|&i, &j| score(&centroids[i]).total_cmp(&score(&centroids[j]))).unwrap();
                correct += usize::from(best == t);
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 >= 0.9, "{correct}/{total}");
    }
}
