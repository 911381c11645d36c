//! Analyst verification of report findings.
//!
//! Decisions are appended to a JSONL file, one record per line, flushed to
//! disk before the next prompt. Re-running resumes at the first finding
//! without a record.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{BehaviorId, Taxonomy};
use crate::pipeline::AnalysisReport;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("{path}:{line}: corrupt verdict record: {reason}")]
    CorruptVerdictFile { path: String, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accepted,
    Rejected,
    Unsure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub class_name: String,
    pub behavior_id: BehaviorId,
    /// Method key; absent for the class-level decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
    pub decision: Decision,
    #[serde(default)]
    pub note: String,
    pub timestamp: String,
}

impl VerdictRecord {
    pub fn key(&self) -> (String, BehaviorId, Option<String>) {
        (self.class_name.clone(), self.behavior_id, self.signature.clone())
    }

    pub fn describe(&self) -> String {
        match &self.signature {
            Some(s) => format!("{} b{} {}", self.class_name, self.behavior_id, s),
            None => format!("{} b{}", self.class_name, self.behavior_id),
        }
    }
}

/// Parses a verdict file. A final line without a newline that fails to parse
/// is a write torn by a crash and is dropped.
pub fn parse_verdicts(text: &str, path: &str) -> Result<Vec<VerdictRecord>, ReviewError> {
    let mut out = Vec::new();
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, raw) in lines.iter().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str::<VerdictRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !raw.ends_with('\n') => {}
            Err(e) => {
                return Err(ReviewError::CorruptVerdictFile {
                    path: path.to_string(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

pub fn load_verdicts(path: &Path) -> Result<Vec<VerdictRecord>, ReviewError> {
    match std::fs::read_to_string(path) {
        Ok(text) => parse_verdicts(&text, &path.display().to_string()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(source) => Err(ReviewError::Io {
            path: path.display().to_string(),
            source,
        }),
    }
}

/// Append-only verdict file with last-write-wins lookup.
pub struct VerdictStore {
    path: PathBuf,
    file: File,
    latest: BTreeMap<(String, BehaviorId, Option<String>), VerdictRecord>,
}

impl VerdictStore {
    pub fn open(path: &Path) -> Result<Self, ReviewError> {
        let io = |source| ReviewError::Io {
            path: path.display().to_string(),
            source,
        };
        let existing = load_verdicts(path)?;
        let mut file = OpenOptions::new().create(true).append(true).read(true).open(path).map_err(io)?;
        // Drop a torn tail so the next record starts on its own line.
        let len = file.metadata().map_err(io)?.len();
        if len > 0 {
            let text = std::fs::read_to_string(path).map_err(io)?;
            if !text.ends_with('\n') {
                let keep = text.rfind('\n').map(|i| i + 1).unwrap_or(0);
                file.set_len(keep as u64).map_err(io)?;
            }
        }
        file.flush().map_err(io)?;
        let latest = existing.into_iter().map(|r| (r.key(), r)).collect();
        Ok(Self {
            path: path.to_path_buf(),
            file,
            latest,
        })
    }

    pub fn get(&self, key: &(String, BehaviorId, Option<String>)) -> Option<&VerdictRecord> {
        self.latest.get(key)
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &VerdictRecord> {
        self.latest.values()
    }

    /// Writes one line and syncs it before returning.
    pub fn append(&mut self, record: VerdictRecord) -> Result<(), ReviewError> {
        let mut line = serde_json::to_string(&record).expect("verdict serializes");
        line.push('\n');
        let io = |source| ReviewError::Io {
            path: self.path.display().to_string(),
            source,
        };
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(io)?;
        self.latest.insert(record.key(), record);
        Ok(())
    }
}

/// One thing for the analyst to judge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewItem {
    pub class_name: String,
    pub behavior_id: BehaviorId,
    pub signature: Option<String>,
    pub text: String,
}

impl ReviewItem {
    pub fn key(&self) -> (String, BehaviorId, Option<String>) {
        (self.class_name.clone(), self.behavior_id, self.signature.clone())
    }
}

/// Class-level item for each finding followed by one item per method.
pub fn review_items(report: &AnalysisReport, taxonomy: &Taxonomy) -> Vec<ReviewItem> {
    let mut items = Vec::new();
    for f in &report.findings {
        let behavior = taxonomy
            .get(f.behavior_id)
            .map(|b| b.name.as_str())
            .unwrap_or("?");
        items.push(ReviewItem {
            class_name: f.class_name.clone(),
            behavior_id: f.behavior_id,
            signature: None,
            text: format!(
                "Class: {}\nBehavior: {} ({})\nConfidence: {}\nExplanation: {}\n",
                f.class_name, behavior, f.behavior_id, f.class_confidence, f.explanation
            ),
        });
        for m in &f.methods {
            let status = if m.resolved_method.is_some() { "" } else { " [not found in class]" };
            items.push(ReviewItem {
                class_name: f.class_name.clone(),
                behavior_id: f.behavior_id,
                signature: Some(m.key().to_string()),
                text: format!(
                    "  Class: {} / {}\n  Method: {}{status}\n  Role: {}\n",
                    f.class_name, behavior, m.key(), m.role
                ),
            });
        }
    }
    items
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReviewSummary {
    pub total: usize,
    pub already_done: usize,
    pub decided: usize,
    pub skipped: usize,
    pub quit: bool,
}

const HELP: &str = "[a]ccept [r]eject [u]nsure [s]kip [q]uit (optional note after the letter)";

enum Command {
    Decide(Decision, String),
    Skip,
    Quit,
}

fn parse_command(line: &str) -> Option<Command> {
    let line = line.trim();
    let (word, note) = match line.split_once(char::is_whitespace) {
        Some((w, n)) => (w, n.trim().to_string()),
        None => (line, String::new()),
    };
    Some(match word.to_ascii_lowercase().as_str() {
        "a" | "accept" => Command::Decide(Decision::Accepted, note),
        "r" | "reject" => Command::Decide(Decision::Rejected, note),
        "u" | "unsure" => Command::Decide(Decision::Unsure, note),
        "s" | "skip" => Command::Skip,
        "q" | "quit" => Command::Quit,
        _ => return None,
    })
}

/// Prompts for each unreviewed item on `output` and reads commands from
/// `input`. End of input counts as quit.
pub fn run_review<R: BufRead, W: Write>(
    items: &[ReviewItem],
    store: &mut VerdictStore,
    mut input: R,
    mut output: W,
    now: impl Fn() -> String,
) -> Result<ReviewSummary, ReviewError> {
    let io = |source| ReviewError::Io {
        path: "<terminal>".into(),
        source,
    };
    let mut summary = ReviewSummary {
        total: items.len(),
        ..ReviewSummary::default()
    };
    let pending: Vec<&ReviewItem> = items
        .iter()
        .filter(|i| store.get(&i.key()).is_none())
        .collect();
    summary.already_done = items.len() - pending.len();
    if summary.already_done > 0 {
        writeln!(output, "Resuming: {} of {} already reviewed.", summary.already_done, items.len()).map_err(io)?;
    }
    'items: for (n, item) in pending.iter().enumerate() {
        write!(output, "\n[{}/{}]\n{}", summary.already_done + n + 1, items.len(), item.text).map_err(io)?;
        loop {
            write!(output, "{HELP}\n> ").map_err(io)?;
            output.flush().map_err(io)?;
            let mut line = String::new();
            if input.read_line(&mut line).map_err(io)? == 0 {
                summary.quit = true;
                break 'items;
            }
            match parse_command(&line) {
                Some(Command::Decide(decision, note)) => {
                    store.append(VerdictRecord {
                        class_name: item.class_name.clone(),
                        behavior_id: item.behavior_id,
                        signature: item.signature.clone(),
                        decision,
                        note,
                        timestamp: now(),
                    })?;
                    summary.decided += 1;
                    continue 'items;
                }
                Some(Command::Skip) => {
                    summary.skipped += 1;
                    continue 'items;
                }
                Some(Command::Quit) => {
                    summary.quit = true;
                    break 'items;
                }
                None => writeln!(output, "unrecognized command").map_err(io)?,
            }
        }
    }
    Ok(summary)
}

/// RFC 3339 UTC timestamp for new records.
pub fn timestamp_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
