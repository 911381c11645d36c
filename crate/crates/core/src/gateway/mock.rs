//! Scripted backend for offline runs and tests.
//!
//! A script is a TOML file of `[[rule]]` tables tried in order; the first rule
//! whose constraints all hold supplies the response. `[fallback]` answers
//! anything left over, per prompt kind.

use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use super::{BackendKind, ChatBackend, Completion, GatewayError, LlmRequest};
use crate::prompt::PromptKind;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default)]
    pub kind: Option<PromptKind>,
    /// Exact class descriptor, e.g. `Lcom/demo/Util;`.
    #[serde(default)]
    pub class: Option<String>,
    /// Substrings that must all occur in the prompt.
    #[serde(default)]
    pub contains: Vec<String>,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockFallback {
    pub baseline: Option<String>,
    pub phase1: Option<String>,
    pub phase2: Option<String>,
}

/// Substrings used to tell the prompt kinds apart. A prompt that carries
/// neither marker is a phase-1 prompt.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindMarkers {
    pub phase2: String,
    pub baseline: String,
}

impl Default for KindMarkers {
    fn default() -> Self {
        Self {
            phase2: "First Phase Explanation".into(),
            baseline: "Possible Malicious Behaviors".into(),
        }
    }
}

impl KindMarkers {
    pub fn classify(&self, prompt: &str) -> PromptKind {
        if prompt.contains(&self.phase2) {
            PromptKind::Phase2
        } else if prompt.contains(&self.baseline) {
            PromptKind::Baseline
        } else {
            PromptKind::Phase1
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default, rename = "rule")]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fallback: MockFallback,
    #[serde(default)]
    pub markers: KindMarkers,
    /// Artificial latency per exchange.
    #[serde(default)]
    pub delay_ms: u64,
}

/// Class descriptor from the first `.class` directive in the prompt.
fn prompt_class(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .map(str::trim_start)
        .find(|l| l.starts_with(".class ") || l.starts_with(".class\t"))
        .and_then(|l| l.split_whitespace().last())
}

impl MockScript {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn respond(&self, prompt: &str) -> Result<&str, GatewayError> {
        let kind = self.markers.classify(prompt);
        let class = prompt_class(prompt);
        let hit = self.rules.iter().find(|r| {
            r.kind.is_none_or(|k| k == kind)
                && r.class.as_deref().is_none_or(|c| Some(c) == class)
                && r.contains.iter().all(|s| prompt.contains(s.as_str()))
        });
        if let Some(rule) = hit {
            return Ok(&rule.response);
        }
        let fallback = match kind {
            PromptKind::Baseline => &self.fallback.baseline,
            PromptKind::Phase1 => &self.fallback.phase1,
            PromptKind::Phase2 => &self.fallback.phase2,
        };
        fallback.as_deref().ok_or_else(|| {
            GatewayError::MockUnscripted(format!("{kind} prompt for {}", class.unwrap_or("<no class>")))
        })
    }
}

pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

impl ChatBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn send(&self, request: &LlmRequest) -> Result<Completion, GatewayError> {
        if self.script.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.script.delay_ms));
        }
        self.script.respond(&request.prompt).map(Completion::text)
    }
}
