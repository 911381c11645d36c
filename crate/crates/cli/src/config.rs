//! TOML run configuration. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use payloc::gateway::RetryPolicy;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub knowledge: KnowledgeSection,
    #[serde(default)]
    pub templates: TemplatesSection,
    #[serde(default)]
    pub corpus: CorpusSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    /// `http`, `replay` or `mock`.
    pub backend: Option<String>,
    pub mock_script: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub max_in_flight: Option<usize>,
    pub requests_per_minute: Option<u32>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
    pub cache_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub retry: Option<RetryPolicy>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub gate_threshold: Option<u8>,
    pub token_budget: Option<usize>,
    /// Exit with status 4 when more items than this fail to parse.
    pub max_parse_failures: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeSection {
    pub taxonomy: Option<PathBuf>,
    pub families: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatesSection {
    pub baseline: Option<PathBuf>,
    pub phase1: Option<PathBuf>,
    pub phase2: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub apk_id: Option<String>,
    pub family: Option<String>,
    /// Developer package prefixes, e.g. `Lcom/example/`.
    pub filter: Option<Vec<String>>,
    /// Decompiler invocation with `{apk}` and `{out}` placeholders.
    pub decompile_command: Option<String>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn must_exist(what: &str, p: &Option<PathBuf>) -> Result<()> {
    if let Some(path) = p {
        if !path.exists() {
            bail!("{what}: {} does not exist", path.display());
        }
    }
    Ok(())
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: Config =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config
            .validate()
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let g = &mut self.gateway;
        for p in [&mut g.mock_script, &mut g.cache_dir, &mut g.log_path] {
            resolve(base, p);
        }
        let k = &mut self.knowledge;
        for p in [&mut k.taxonomy, &mut k.families] {
            resolve(base, p);
        }
        let t = &mut self.templates;
        for p in [&mut t.baseline, &mut t.phase1, &mut t.phase2] {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.gateway;
        if let Some(b) = &g.backend {
            if !matches!(b.as_str(), "http" | "replay" | "mock") {
                bail!("gateway.backend must be http, replay or mock, not {b:?}");
            }
        }
        if let Some(t) = g.temperature {
            if !(0.0..=2.0).contains(&t) {
                bail!("gateway.temperature must be within 0-2, got {t}");
            }
        }
        if let Some(n) = g.max_in_flight {
            if !(1..=256).contains(&n) {
                bail!("gateway.max_in_flight must be within 1-256, got {n}");
            }
        }
        if let Some(r) = &g.retry {
            if r.max_attempts == 0 {
                bail!("gateway.retry.max_attempts must be at least 1");
            }
        }
        if let Some(n) = self.pipeline.gate_threshold {
            if n > 100 {
                bail!("pipeline.gate_threshold must be within 0-100, got {n}");
            }
        }
        if self.pipeline.token_budget == Some(0) {
            bail!("pipeline.token_budget must be positive");
        }
        must_exist("gateway.mock_script", &g.mock_script)?;
        must_exist("knowledge.taxonomy", &self.knowledge.taxonomy)?;
        must_exist("knowledge.families", &self.knowledge.families)?;
        must_exist("templates.baseline", &self.templates.baseline)?;
        must_exist("templates.phase1", &self.templates.phase1)?;
        must_exist("templates.phase2", &self.templates.phase2)?;
        Ok(())
    }
}
