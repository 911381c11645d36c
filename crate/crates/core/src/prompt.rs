//! Prompt rendering for the baseline, class-screening (phase 1) and
//! method-localization (phase 2) templates.
//!
//! Templates use `{name}` placeholders. Substitution is a single left-to-right
//! pass, so braces inside substituted values (Smali register lists such as
//! `{v0, v1}`) are never reinterpreted.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{Behavior, BehaviorId};
use crate::smali::SmaliClass;

pub const CLASS_CONTENT: &str = "class_content";
pub const BEHAVIOR_DESCRIPTION: &str = "behavior_description";
pub const FIRST_PHASE_EXPLANATION: &str = "first_phase_explanation";

pub const DEFAULT_TOKEN_BUDGET: usize = 100_000;

const BUILTIN_BASELINE: &str = include_str!("../data/templates/baseline.txt");
const BUILTIN_PHASE1: &str = include_str!("../data/templates/phase1.txt");
const BUILTIN_PHASE2: &str = include_str!("../data/templates/phase2.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{kind} template is missing the {{{placeholder}}} placeholder")]
    MissingPlaceholder {
        kind: PromptKind,
        placeholder: &'static str,
    },
    #[error("{kind} template uses unsupported placeholder {{{placeholder}}}")]
    UnknownPlaceholder { kind: PromptKind, placeholder: String },
    #[error("phase-1 explanation is empty")]
    EmptyExplanation,
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Baseline,
    Phase1,
    Phase2,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Baseline => "baseline",
            PromptKind::Phase1 => "phase1",
            PromptKind::Phase2 => "phase2",
        }
    }

    fn placeholders(self) -> &'static [&'static str] {
        match self {
            PromptKind::Baseline => &[CLASS_CONTENT],
            PromptKind::Phase1 => &[CLASS_CONTENT, BEHAVIOR_DESCRIPTION],
            PromptKind::Phase2 => &[CLASS_CONTENT, FIRST_PHASE_EXPLANATION],
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: PromptKind,
    text: String,
}

/// Byte ranges of `{identifier}` tokens in `text`, with the identifier.
fn placeholder_spans(text: &str) -> Vec<(Range<usize>, &str)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > start && j < bytes.len() && bytes[j] == b'}' {
                spans.push((i..j + 1, &text[start..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    spans
}

impl PromptTemplate {
    pub fn new(kind: PromptKind, text: impl Into<String>) -> Result<Self, PromptError> {
        let text = text.into();
        let allowed = kind.placeholders();
        let spans = placeholder_spans(&text);
        if let Some((_, name)) = spans.iter().find(|(_, n)| !allowed.contains(n)) {
            return Err(PromptError::UnknownPlaceholder {
                kind,
                placeholder: name.to_string(),
            });
        }
        for required in allowed {
            if !spans.iter().any(|(_, n)| n == required) {
                return Err(PromptError::MissingPlaceholder {
                    kind,
                    placeholder: required,
                });
            }
        }
        Ok(Self { kind, text })
    }

    pub fn builtin(kind: PromptKind) -> Self {
        let text = match kind {
            PromptKind::Baseline => BUILTIN_BASELINE,
            PromptKind::Phase1 => BUILTIN_PHASE1,
            PromptKind::Phase2 => BUILTIN_PHASE2,
        };
        Self::new(kind, text).expect("builtin templates are valid")
    }

    pub fn load(kind: PromptKind, path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::new(kind, text)
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Single-pass substitution. Every placeholder in the template has a
    /// value by construction.
    fn fill(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(
            self.text.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>(),
        );
        let mut last = 0;
        for (range, name) in placeholder_spans(&self.text) {
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .expect("template validated against its kind");
            out.push_str(&self.text[last..range.start]);
            out.push_str(value);
            last = range.end;
        }
        out.push_str(&self.text[last..]);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub text: String,
    pub class_name: String,
    pub behavior_id: Option<BehaviorId>,
    /// 1-based.
    pub chunk_index: usize,
    pub chunk_count: usize,
    pub token_estimate: usize,
    pub oversized: bool,
}

impl RenderedPrompt {
    /// File name used when prompts are dumped for audit.
    pub fn file_name(&self) -> String {
        let class: String = self
            .class_name
            .trim_start_matches('L')
            .trim_end_matches(';')
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '$' { c } else { '.' })
            .collect();
        let behavior = self
            .behavior_id
            .map(|b| format!("__b{b:02}"))
            .unwrap_or_default();
        format!(
            "{class}{behavior}__{}__{}of{}.txt",
            self.kind, self.chunk_index, self.chunk_count
        )
    }
}

/// Heuristic token count: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// A piece of class content small enough for one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassChunk {
    /// Class header followed by the method segments in `methods`.
    pub text: String,
    /// Indices into `SmaliClass::methods`.
    pub methods: Range<usize>,
    /// A single method that does not fit the budget even on its own.
    pub oversized: bool,
}

/// Byte range of each method's segment: from its `.method` line to the next
/// method's `.method` line (or end of file). Header plus all segments is the
/// whole file.
fn method_segments(class: &SmaliClass) -> Vec<Range<usize>> {
    let mut line_starts = vec![0];
    let mut offset = 0;
    for line in class.raw_text.split_inclusive('\n') {
        offset += line.len();
        line_starts.push(offset);
    }
    let starts: Vec<usize> = class
        .methods
        .iter()
        .map(|m| line_starts[m.line_span.0 - 1])
        .collect();
    starts
        .iter()
        .enumerate()
        .map(|(i, &s)| s..starts.get(i + 1).copied().unwrap_or(class.raw_text.len()))
        .collect()
}

/// Splits a class on method boundaries so that each chunk's estimate stays
/// within `token_budget`. Every chunk repeats the class header.
pub fn chunk_class(class: &SmaliClass, token_budget: usize) -> Vec<ClassChunk> {
    let token_budget = token_budget.max(1);
    if estimate_tokens(&class.raw_text) <= token_budget || class.methods.is_empty() {
        return vec![ClassChunk {
            text: class.raw_text.clone(),
            methods: 0..class.methods.len(),
            oversized: estimate_tokens(&class.raw_text) > token_budget,
        }];
    }

    let header = class.header();
    let segments = method_segments(class);
    let mut chunks = Vec::new();
    let mut current = String::from(header);
    let mut first = 0;

    for (i, seg) in segments.iter().enumerate() {
        let body = &class.raw_text[seg.clone()];
        if i > first && estimate_tokens_joined(&current, body) > token_budget {
            chunks.push(ClassChunk {
                text: std::mem::replace(&mut current, String::from(header)),
                methods: first..i,
                oversized: false,
            });
            first = i;
        }
        current.push_str(body);
        if i == first && estimate_tokens(&current) > token_budget {
            chunks.push(ClassChunk {
                text: std::mem::replace(&mut current, String::from(header)),
                methods: i..i + 1,
                oversized: true,
            });
            first = i + 1;
        }
    }
    if first < segments.len() {
        chunks.push(ClassChunk {
            text: current,
            methods: first..segments.len(),
            oversized: false,
        });
    }
    chunks
}

fn estimate_tokens_joined(a: &str, b: &str) -> usize {
    (a.len() + b.len()).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub baseline: PromptTemplate,
    pub phase1: PromptTemplate,
    pub phase2: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            baseline: PromptTemplate::builtin(PromptKind::Baseline),
            phase1: PromptTemplate::builtin(PromptKind::Phase1),
            phase2: PromptTemplate::builtin(PromptKind::Phase2),
        }
    }
}

struct Slot<'a> {
    class: &'a SmaliClass,
    content: &'a str,
    index: usize,
    count: usize,
    oversized: bool,
}

impl TemplateSet {
    fn finish(
        &self,
        kind: PromptKind,
        text: String,
        slot: &Slot<'_>,
        behavior_id: Option<BehaviorId>,
    ) -> RenderedPrompt {
        RenderedPrompt {
            kind,
            token_estimate: estimate_tokens(&text),
            text,
            class_name: slot.class.class_name.clone(),
            behavior_id,
            chunk_index: slot.index,
            chunk_count: slot.count,
            oversized: slot.oversized,
        }
    }

    fn whole(class: &SmaliClass) -> Slot<'_> {
        Slot {
            class,
            content: &class.raw_text,
            index: 1,
            count: 1,
            oversized: false,
        }
    }

    fn slots<'a>(class: &'a SmaliClass, chunks: &'a [ClassChunk]) -> impl Iterator<Item = Slot<'a>> {
        chunks.iter().enumerate().map(move |(i, c)| Slot {
            class,
            content: &c.text,
            index: i + 1,
            count: chunks.len(),
            oversized: c.oversized,
        })
    }

    fn baseline_for(&self, slot: &Slot<'_>) -> RenderedPrompt {
        let text = self.baseline.fill(&[(CLASS_CONTENT, slot.content)]);
        self.finish(PromptKind::Baseline, text, slot, None)
    }

    fn phase1_for(&self, slot: &Slot<'_>, behavior: &Behavior) -> RenderedPrompt {
        let description = behavior.prompt_text();
        let text = self.phase1.fill(&[
            (CLASS_CONTENT, slot.content),
            (BEHAVIOR_DESCRIPTION, &description),
        ]);
        self.finish(PromptKind::Phase1, text, slot, Some(behavior.id))
    }

    fn phase2_for(
        &self,
        slot: &Slot<'_>,
        explanation: &str,
        behavior_id: Option<BehaviorId>,
    ) -> Result<RenderedPrompt, PromptError> {
        if explanation.trim().is_empty() {
            return Err(PromptError::EmptyExplanation);
        }
        let text = self.phase2.fill(&[
            (CLASS_CONTENT, slot.content),
            (FIRST_PHASE_EXPLANATION, explanation),
        ]);
        Ok(self.finish(PromptKind::Phase2, text, slot, behavior_id))
    }

    pub fn render_baseline(&self, class: &SmaliClass) -> RenderedPrompt {
        self.baseline_for(&Self::whole(class))
    }

    pub fn render_phase1(&self, class: &SmaliClass, behavior: &Behavior) -> RenderedPrompt {
        self.phase1_for(&Self::whole(class), behavior)
    }

    pub fn render_phase2(
        &self,
        class: &SmaliClass,
        phase1_explanation: &str,
    ) -> Result<RenderedPrompt, PromptError> {
        self.phase2_for(&Self::whole(class), phase1_explanation, None)
    }

    pub fn render_baseline_chunks(&self, class: &SmaliClass, chunks: &[ClassChunk]) -> Vec<RenderedPrompt> {
        Self::slots(class, chunks).map(|s| self.baseline_for(&s)).collect()
    }

    pub fn render_phase1_chunks(
        &self,
        class: &SmaliClass,
        chunks: &[ClassChunk],
        behavior: &Behavior,
    ) -> Vec<RenderedPrompt> {
        Self::slots(class, chunks)
            .map(|s| self.phase1_for(&s, behavior))
            .collect()
    }

    pub fn render_phase2_chunks(
        &self,
        class: &SmaliClass,
        chunks: &[ClassChunk],
        phase1_explanation: &str,
        behavior_id: BehaviorId,
    ) -> Result<Vec<RenderedPrompt>, PromptError> {
        Self::slots(class, chunks)
            .map(|s| self.phase2_for(&s, phase1_explanation, Some(behavior_id)))
            .collect()
    }
}
