//! Exact-match accuracy, sentence BLEU, ROUGE-1 and ROUGE-L over whitespace
//! tokens.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, cand_len: usize, ref_len: usize) -> Self {
        let precision = if cand_len == 0 { 0.0 } else { overlap as f64 / cand_len as f64 };
        let recall = overlap as f64 / ref_len as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn reference_tokens(reference: &str) -> Result<Vec<&str>> {
    let r = tokens(reference);
    if r.is_empty() {
        return Err(Error::Contract("reference text is empty".into()));
    }
    Ok(r)
}

/// Fraction of predictions equal to their gold answer after collapsing
/// whitespace.
pub fn accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], golds: &[T]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold answers",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Contract("accuracy over zero examples".into()));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| tokens(p.as_ref()) == tokens(g.as_ref()))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

fn ngram_counts<'t, 'a>(toks: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    for g in toks.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU with uniform weights over n-gram orders up to 4 and the
/// brevity penalty `exp(1 - r/c)` when `c < r`.
///
/// Orders longer than the candidate have no n-grams to score and are left
/// out of the geometric mean, so "the cat sat" against "the cat sat down"
/// scores `exp(1 - 4/3)`. Without smoothing any order with zero matches
/// gives 0.
pub fn bleu(candidate: &str, reference: &str) -> Result<f64> {
    bleu_with(candidate, reference, false)
}

/// [`bleu`] with optional add-one smoothing of the orders above 1.
pub fn bleu_with(candidate: &str, reference: &str, smoothing: bool) -> Result<f64> {
    let r = reference_tokens(reference)?;
    let c = tokens(candidate);
    if c.is_empty() {
        return Ok(0.0);
    }
    let max_n = c.len().min(4);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(&c, n);
        let refs = ngram_counts(&r, n);
        let total: usize = cand.values().sum();
        let clipped: usize = cand.iter().map(|(g, &k)| k.min(refs.get(g).copied().unwrap_or(0))).sum();
        let (num, den) = if smoothing && n > 1 {
            (clipped as f64 + 1.0, total as f64 + 1.0)
        } else {
            (clipped as f64, total as f64)
        };
        if num == 0.0 {
            return Ok(0.0);
        }
        log_sum += (num / den).ln();
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Clipped unigram overlap.
pub fn rouge1(candidate: &str, reference: &str) -> Result<Prf> {
    let r = reference_tokens(reference)?;
    let c = tokens(candidate);
    let refs = ngram_counts(&r, 1);
    let overlap = ngram_counts(&c, 1)
        .iter()
        .map(|(g, &k)| k.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    Ok(Prf::from_counts(overlap, c.len(), r.len()))
}

/// Longest-common-subsequence overlap.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<Prf> {
    let r = reference_tokens(reference)?;
    let c = tokens(candidate);
    Ok(Prf::from_counts(lcs_len(&c, &r), c.len(), r.len()))
}

/// LCS length by dynamic programming over two rolling rows.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Metric values for one task; absent metrics do not apply to its kind.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskScores {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rouge1: Option<f64>,
    #[serde(rename = "rougeL", skip_serializing_if = "Option::is_none", default)]
    pub rouge_l: Option<f64>,
}

impl TaskScores {
    /// Accuracy always; BLEU and ROUGE F1 averages when `free_form`.
    pub fn score<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], golds: &[T], free_form: bool) -> Result<Self> {
        let mut s = TaskScores {
            accuracy: Some(accuracy(predictions, golds)?),
            ..Default::default()
        };
        if free_form {
            let n = golds.len() as f64;
            let (mut b, mut r1, mut rl) = (0.0, 0.0, 0.0);
            for (p, g) in predictions.iter().zip(golds) {
                b += bleu(p.as_ref(), g.as_ref())?;
                r1 += rouge1(p.as_ref(), g.as_ref())?.f1;
                rl += rouge_l(p.as_ref(), g.as_ref())?.f1;
            }
            s.bleu = Some(b / n);
            s.rouge1 = Some(r1 / n);
            s.rouge_l = Some(rl / n);
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, TaskScores>,
    /// Unweighted mean over the tasks reporting each metric.
    pub aggregate: TaskScores,
}

impl EvalReport {
    pub fn new(per_task: BTreeMap<String, TaskScores>) -> Self {
        let mean = |get: fn(&TaskScores) -> Option<f64>| {
            let vals: Vec<f64> = per_task.values().filter_map(get).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let aggregate = TaskScores {
            accuracy: mean(|s| s.accuracy),
            bleu: mean(|s| s.bleu),
            rouge1: mean(|s| s.rouge1),
            rouge_l: mean(|s| s.rouge_l),
        };
        Self { per_task, aggregate }
    }

    /// Aligned plain-text table, values as percentages.
    pub fn to_table(&self) -> String {
        let width = self.per_task.keys().map(String::len).max().unwrap_or(4).max("mean".len());
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
            "task", "acc", "bleu", "rouge1", "rougeL"
        );
        let rows = self.per_task.iter().map(|(k, v)| (k.as_str(), v)).chain([("mean", &self.aggregate)]);
        for (name, s) in rows {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
                cell(s.accuracy),
                cell(s.bleu),
                cell(s.rouge1),
                cell(s.rouge_l)
            );
        }
        out
    }
}
