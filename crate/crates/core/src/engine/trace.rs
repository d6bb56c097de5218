use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_FORMAT_VERSION: u32 = 1;

/// One classification and the plan built from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingEvent {
    pub format_version: u32,
    pub sentence_index: usize,
    /// Stream position of the token that triggered routing.
    pub position: usize,
    /// Text the classifier saw for the current sentence.
    pub sentence_prefix: String,
    pub probs: Vec<f32>,
    pub selected_labels: Vec<String>,
    pub weights: Vec<f32>,
    pub plan_id: u64,
    /// Wall-clock time of vectorizing and classifying, in milliseconds.
    pub classify_ms: f64,
}

/// Routing events of a session in the order they happened.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub entries: Vec<RoutingEvent>,
}

impl RoutingTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sentence indices are non-decreasing and never skip a sentence.
    pub fn is_well_ordered(&self) -> bool {
        self.entries.first().is_none_or(|e| e.sentence_index == 0)
            && self
                .entries
                .windows(2)
                .all(|w| w[1].sentence_index == w[0].sentence_index || w[1].sentence_index == w[0].sentence_index + 1)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: RoutingEvent = serde_json::from_str(&line).map_err(|err| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: err.to_string(),
            })?;
            if e.format_version != TRACE_FORMAT_VERSION {
                return Err(Error::Version {
                    expected: TRACE_FORMAT_VERSION,
                    found: e.format_version,
                });
            }
            entries.push(e);
        }
        Ok(Self { entries })
    }

    /// Two-column text: the sentence as the classifier saw it on the left,
    /// selected adapters with their weights on the right.
    pub fn to_columns(&self) -> String {
        let left: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("[{}] {}", e.sentence_index, e.sentence_prefix.replace('\n', " ")))
            .collect();
        let width = left.iter().map(|s| s.chars().count()).max().unwrap_or(0).min(60);
        let mut out = String::new();
        for (l, e) in left.iter().zip(&self.entries) {
            let shown: String = if l.chars().count() > width {
                l.chars().take(width - 1).chain(['…']).collect()
            } else {
                l.clone()
            };
            let picks: Vec<String> = e
                .selected_labels
                .iter()
                .zip(&e.weights)
                .map(|(label, w)| format!("{label} {:.1}%", 100.0 * w))
                .collect();
            let pad = width - shown.chars().count();
            let _ = writeln!(out, "{shown}{}  | {}", " ".repeat(pad), picks.join(", "));
        }
        out
    }
}
