//! Baseline and two-phase analysis over a corpus.
//!
//! Work fans out over (class, behavior) pairs on a pool sized by the
//! gateway's in-flight limit. Results are folded in sorted key order, so the
//! report does not depend on completion order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{Behavior, BehaviorId, Taxonomy};
use crate::eval::workload_reduction;
use crate::gateway::{Gateway, GatewayError, LlmRequest};
use crate::prompt::{chunk_class, estimate_tokens, RenderedPrompt, TemplateSet, DEFAULT_TOKEN_BUDGET};
use crate::response::{
    dedup_findings, parse_baseline, parse_phase1, parse_phase2, BaselineVerdict, MethodFinding,
    ParseError, Phase1Verdict, ReportedMethod,
};
use crate::smali::{Corpus, SmaliClass};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("no behaviors to probe")]
    EmptyBehaviorSet,
    #[error("no LLM backend configured")]
    GatewayUnconfigured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    TwoPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    Phase1,
    Phase2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Gateway,
    Parse,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Failure {
    pub class_name: String,
    pub behavior_id: Option<BehaviorId>,
    pub stage: Stage,
    pub kind: FailureKind,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub class_name: String,
    pub behavior_id: BehaviorId,
    pub class_confidence: u8,
    pub explanation: String,
    pub methods: Vec<MethodFinding>,
    pub phase1_chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnrecognizedLabel {
    pub class_name: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub apk_id: String,
    pub mode: Mode,
    pub model: String,
    pub behaviors_probed: Vec<BehaviorId>,
    pub findings: Vec<Finding>,
    pub flagged_class_count: usize,
    pub flagged_method_count: usize,
    pub total_class_count: usize,
    pub total_method_count: usize,
    pub workload_reduction: f64,
    pub failures: Vec<Failure>,
    #[serde(default)]
    pub unrecognized_labels: Vec<UnrecognizedLabel>,
}

impl AnalysisReport {
    fn assemble(
        corpus: &Corpus,
        mode: Mode,
        model: &str,
        behaviors_probed: Vec<BehaviorId>,
        mut findings: Vec<Finding>,
        mut failures: Vec<Failure>,
        mut unrecognized_labels: Vec<UnrecognizedLabel>,
    ) -> Self {
        findings.sort_by(|a, b| (&a.class_name, a.behavior_id).cmp(&(&b.class_name, b.behavior_id)));
        failures.sort();
        unrecognized_labels.sort();
        unrecognized_labels.dedup();
        let flagged_class_count = findings
            .iter()
            .map(|f| f.class_name.as_str())
            .collect::<BTreeSet<_>>()
            .len();
        let flagged_method_count = flagged_methods(&findings).len();
        let total_method_count = corpus.developer_classes().map(|c| c.methods.len()).sum();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            apk_id: corpus.apk_id.clone(),
            mode,
            model: model.to_string(),
            behaviors_probed,
            flagged_class_count,
            flagged_method_count,
            total_class_count: corpus.developer_classes().count(),
            total_method_count,
            workload_reduction: workload_reduction(flagged_method_count, total_method_count),
            findings,
            failures,
            unrecognized_labels,
        }
    }

    /// Pretty JSON with a trailing newline; field order is the struct order.
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let report: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(format!(
                "unsupported report schema version {} (expected {REPORT_SCHEMA_VERSION})",
                report.schema_version
            ));
        }
        Ok(report)
    }

    pub fn parse_failures(&self) -> usize {
        self.failures.iter().filter(|f| f.kind == FailureKind::Parse).count()
    }

    /// Analyst-facing text: per finding, the class, behavior and each
    /// localized method with its role.
    pub fn render_digest(&self, taxonomy: &Taxonomy) -> String {
        let mut out = String::new();
        for f in &self.findings {
            let behavior = taxonomy
                .get(f.behavior_id)
                .map(|b| b.name.clone())
                .unwrap_or_else(|| format!("#{}", f.behavior_id));
            let _ = writeln!(out, "Class: {}", f.class_name);
            let _ = writeln!(out, "Behavior: {behavior}");
            let _ = writeln!(out, "Confidence: {}", f.class_confidence);
            let _ = writeln!(out, "Explanation: {}", f.explanation);
            for m in &f.methods {
                let _ = writeln!(out);
                let _ = writeln!(out, "Method: {}", m.key());
                if m.resolved_method.is_none() {
                    let _ = writeln!(out, "  (not found in class)");
                }
                let _ = writeln!(out, "Role Explanation: {}", m.role);
                if !m.confidence_missing {
                    let _ = writeln!(out, "Confidence: {}", m.confidence);
                }
            }
            let _ = writeln!(out, "\n----\n");
        }
        let _ = writeln!(
            out,
            "Flagged {} classes and {} of {} methods; workload reduction {}.",
            self.flagged_class_count,
            self.flagged_method_count,
            self.total_method_count,
            crate::eval::format_percent(self.workload_reduction)
        );
        if !self.failures.is_empty() {
            let _ = writeln!(out, "{} item(s) failed; see the report's failures list.", self.failures.len());
        }
        out
    }
}

/// Distinct (class, resolved signature) pairs over all findings.
pub fn flagged_methods(findings: &[Finding]) -> BTreeSet<(&str, &str)> {
    findings
        .iter()
        .flat_map(|f| {
            f.methods
                .iter()
                .filter_map(move |m| m.resolved_method.as_deref().map(|s| (f.class_name.as_str(), s)))
        })
        .collect()
}

pub type ProgressFn = Arc<dyn Fn(&str) + Send + Sync>;

#[derive(Clone)]
pub struct PipelineConfig {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Minimum phase-1 confidence for a "yes" to proceed to phase 2.
    pub gate_threshold: u8,
    pub token_budget: usize,
    pub templates: TemplateSet,
    pub progress: Option<ProgressFn>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4.1".into(),
            temperature: 0.0,
            max_output_tokens: 4096,
            gate_threshold: 0,
            token_budget: DEFAULT_TOKEN_BUDGET,
            templates: TemplateSet::default(),
            progress: None,
        }
    }
}

impl PipelineConfig {
    fn request(&self, prompt: &RenderedPrompt, variant: u32) -> LlmRequest {
        let mut req = LlmRequest::new(prompt.text.clone(), self.model.clone(), self.temperature);
        req.max_output_tokens = self.max_output_tokens;
        req.variant = variant;
        req
    }

    /// Budget left for class content once the fixed prompt text is counted.
    fn content_budget(&self, fixed: &[&str]) -> usize {
        let overhead: usize = fixed.iter().map(|t| estimate_tokens(t)).sum();
        self.token_budget.saturating_sub(overhead).max(1)
    }

    fn report(&self, line: impl FnOnce() -> String) {
        if let Some(p) = &self.progress {
            p(&line());
        }
    }
}

enum AskError {
    Gateway(GatewayError),
    Parse(ParseError),
}

impl AskError {
    fn into_failure(self, class_name: &str, behavior_id: Option<BehaviorId>, stage: Stage) -> Failure {
        let (kind, error) = match self {
            AskError::Gateway(e) => (FailureKind::Gateway, e.to_string()),
            AskError::Parse(e) => (FailureKind::Parse, e.to_string()),
        };
        Failure {
            class_name: class_name.to_string(),
            behavior_id,
            stage,
            kind,
            error,
        }
    }
}

/// Sends a prompt and parses the answer. An unparseable answer is re-asked
/// once under a distinct cache key before giving up.
fn ask<T>(
    gateway: &Gateway,
    cfg: &PipelineConfig,
    prompt: &RenderedPrompt,
    parse: impl Fn(&str) -> Result<T, ParseError>,
) -> Result<T, AskError> {
    let first = gateway
        .complete(&cfg.request(prompt, 0))
        .map_err(AskError::Gateway)?;
    match parse(&first.text) {
        Ok(v) => Ok(v),
        Err(_) => {
            let second = gateway
                .complete(&cfg.request(prompt, 1))
                .map_err(AskError::Gateway)?;
            parse(&second.text).map_err(AskError::Parse)
        }
    }
}

/// Combines per-chunk phase-1 verdicts for one (class, behavior) pair.
pub fn merge_chunk_verdicts(verdicts: &[Phase1Verdict]) -> Phase1Verdict {
    assert!(!verdicts.is_empty(), "merge_chunk_verdicts needs at least one verdict");
    if verdicts.len() == 1 {
        return verdicts[0].clone();
    }
    let is_malicious = verdicts.iter().any(|v| v.is_malicious);
    let pool: Vec<(usize, &Phase1Verdict)> = verdicts
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_malicious == is_malicious)
        .collect();
    let confidence = pool.iter().map(|(_, v)| v.confidence).max().unwrap_or(0);
    let n = verdicts.len();
    let explanation = pool
        .iter()
        .map(|(i, v)| format!("[chunk {}/{n}] {}", i + 1, v.explanation.trim()))
        .collect::<Vec<_>>()
        .join("\n");
    Phase1Verdict {
        is_malicious,
        confidence,
        explanation,
    }
}

/// Runs `work` over `count` items on up to `workers` threads and returns the
/// results in item order.
fn fan_out<T: Send>(count: usize, workers: usize, work: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, count.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    break;
                }
                let out = work(i);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|o| o.expect("every item ran"))
        .collect()
}

#[derive(Default)]
struct PairOutcome {
    finding: Option<Finding>,
    failures: Vec<Failure>,
    unrecognized: Vec<UnrecognizedLabel>,
}

/// Phase-1 prompts for one pair, one per chunk.
pub fn phase1_prompts(class: &SmaliClass, behavior: &Behavior, cfg: &PipelineConfig) -> Vec<RenderedPrompt> {
    let budget = cfg.content_budget(&[cfg.templates.phase1.text(), &behavior.prompt_text()]);
    let chunks = chunk_class(class, budget);
    cfg.templates.render_phase1_chunks(class, &chunks, behavior)
}

/// Baseline prompts for one class, one per chunk.
pub fn baseline_prompts(class: &SmaliClass, cfg: &PipelineConfig) -> Vec<RenderedPrompt> {
    let budget = cfg.content_budget(&[cfg.templates.baseline.text()]);
    let chunks = chunk_class(class, budget);
    cfg.templates.render_baseline_chunks(class, &chunks)
}

fn resolve_all(reported: &[ReportedMethod], class: &SmaliClass) -> Vec<MethodFinding> {
    dedup_findings(reported.iter().map(|r| MethodFinding::resolve(r, class)).collect())
}

fn two_phase_pair(
    class: &SmaliClass,
    behavior: &Behavior,
    gateway: &Gateway,
    cfg: &PipelineConfig,
) -> PairOutcome {
    let mut out = PairOutcome::default();
    let fail = |e: AskError, stage| e.into_failure(&class.class_name, Some(behavior.id), stage);

    let prompts = phase1_prompts(class, behavior, cfg);
    let mut verdicts = Vec::with_capacity(prompts.len());
    for p in &prompts {
        match ask(gateway, cfg, p, parse_phase1) {
            Ok(v) => verdicts.push(v),
            Err(e) => {
                out.failures.push(fail(e, Stage::Phase1));
                return out;
            }
        }
    }
    let verdict = merge_chunk_verdicts(&verdicts);
    let passes = verdict.is_malicious && verdict.confidence >= cfg.gate_threshold;
    cfg.report(|| {
        format!(
            "{} b{:02} phase1: {} ({}){}",
            class.class_name,
            behavior.id,
            if verdict.is_malicious { "yes" } else { "no" },
            verdict.confidence,
            if passes { "" } else { " -> stop" }
        )
    });
    if !passes {
        return out;
    }

    let mut finding = Finding {
        class_name: class.class_name.clone(),
        behavior_id: behavior.id,
        class_confidence: verdict.confidence,
        explanation: verdict.explanation.clone(),
        methods: Vec::new(),
        phase1_chunks: prompts.len(),
    };

    let explanation = if verdict.explanation.trim().is_empty() {
        // Phase 2 still needs some context; the verdict itself is all we have.
        format!("The class was judged to exhibit {}.", behavior.name)
    } else {
        verdict.explanation.clone()
    };
    let budget = cfg.content_budget(&[cfg.templates.phase2.text(), &explanation]);
    let chunks = chunk_class(class, budget);
    match cfg
        .templates
        .render_phase2_chunks(class, &chunks, &explanation, behavior.id)
    {
        Ok(prompts) => {
            let mut reported = Vec::new();
            for p in &prompts {
                match ask(gateway, cfg, p, parse_phase2) {
                    Ok(ms) => reported.extend(ms),
                    Err(e) => {
                        out.failures.push(fail(e, Stage::Phase2));
                        reported.clear();
                        break;
                    }
                }
            }
            finding.methods = resolve_all(&reported, class);
            cfg.report(|| {
                format!(
                    "{} b{:02} phase2: {} method(s)",
                    class.class_name,
                    behavior.id,
                    finding.methods.len()
                )
            });
        }
        Err(e) => out.failures.push(Failure {
            class_name: class.class_name.clone(),
            behavior_id: Some(behavior.id),
            stage: Stage::Phase2,
            kind: FailureKind::Prompt,
            error: e.to_string(),
        }),
    }
    out.finding = Some(finding);
    out
}

/// Class-level screening per (class, behavior) pair, then method-level
/// localization for every pair that passes the gate.
pub fn run_two_phase(
    corpus: &Corpus,
    behaviors: &[&Behavior],
    gateway: &Gateway,
    cfg: &PipelineConfig,
) -> Result<AnalysisReport, PipelineError> {
    if behaviors.is_empty() {
        return Err(PipelineError::EmptyBehaviorSet);
    }
    let mut behaviors: Vec<&Behavior> = behaviors.to_vec();
    behaviors.sort_by_key(|b| b.id);
    behaviors.dedup_by_key(|b| b.id);

    let classes: Vec<&SmaliClass> = corpus.developer_classes().collect();
    let pairs: Vec<(&SmaliClass, &Behavior)> = classes
        .iter()
        .flat_map(|c| behaviors.iter().map(move |b| (*c, *b)))
        .collect();
    let outcomes = fan_out(pairs.len(), gateway.max_in_flight(), |i| {
        let (class, behavior) = pairs[i];
        two_phase_pair(class, behavior, gateway, cfg)
    });
    Ok(fold(corpus, Mode::TwoPhase, cfg, behaviors.iter().map(|b| b.id).collect(), outcomes))
}

fn merge_baseline(verdicts: Vec<BaselineVerdict>) -> BaselineVerdict {
    let mut iter = verdicts.into_iter();
    let mut merged = iter.next().expect("at least one chunk");
    for v in iter {
        merged.is_malicious |= v.is_malicious;
        merged.confidence = merged.confidence.max(v.confidence);
        if !v.explanation.trim().is_empty() {
            if !merged.explanation.is_empty() {
                merged.explanation.push('\n');
            }
            merged.explanation.push_str(&v.explanation);
        }
        for b in v.behaviors {
            if !merged.behaviors.contains(&b) {
                merged.behaviors.push(b);
            }
        }
        merged.methods.extend(v.methods);
    }
    merged
}

fn baseline_class(
    class: &SmaliClass,
    taxonomy: &Taxonomy,
    gateway: &Gateway,
    cfg: &PipelineConfig,
) -> Vec<PairOutcome> {
    let prompts = baseline_prompts(class, cfg);
    let mut verdicts = Vec::with_capacity(prompts.len());
    for p in &prompts {
        match ask(gateway, cfg, p, |raw| parse_baseline(raw, taxonomy)) {
            Ok(v) => verdicts.push(v),
            Err(e) => {
                return vec![PairOutcome {
                    failures: vec![e.into_failure(&class.class_name, None, Stage::Baseline)],
                    ..PairOutcome::default()
                }]
            }
        }
    }
    let verdict = merge_baseline(verdicts);
    let unrecognized: Vec<UnrecognizedLabel> = verdict
        .unrecognized()
        .map(|label| UnrecognizedLabel {
            class_name: class.class_name.clone(),
            label: label.to_string(),
        })
        .collect();
    let ids = verdict.behavior_ids();
    cfg.report(|| {
        format!(
            "{} baseline: {} ({}) behaviors {:?}",
            class.class_name,
            if verdict.is_malicious { "yes" } else { "no" },
            verdict.confidence,
            ids
        )
    });
    let mut outcomes = vec![PairOutcome {
        unrecognized,
        ..PairOutcome::default()
    }];
    if !verdict.is_malicious {
        return outcomes;
    }
    let methods = resolve_all(&verdict.methods, class);
    for id in ids {
        outcomes.push(PairOutcome {
            finding: Some(Finding {
                class_name: class.class_name.clone(),
                behavior_id: id,
                class_confidence: verdict.confidence,
                explanation: verdict.explanation.clone(),
                methods: methods.clone(),
                phase1_chunks: prompts.len(),
            }),
            ..PairOutcome::default()
        });
    }
    outcomes
}

/// One prompt per class listing every behavior; each recognized behavior in
/// the answer becomes its own finding sharing the reported methods.
pub fn run_baseline(
    corpus: &Corpus,
    taxonomy: &Taxonomy,
    gateway: &Gateway,
    cfg: &PipelineConfig,
) -> Result<AnalysisReport, PipelineError> {
    let classes: Vec<&SmaliClass> = corpus.developer_classes().collect();
    let outcomes = fan_out(classes.len(), gateway.max_in_flight(), |i| {
        baseline_class(classes[i], taxonomy, gateway, cfg)
    });
    let probed = taxonomy.behaviors().iter().map(|b| b.id).collect();
    Ok(fold(
        corpus,
        Mode::Baseline,
        cfg,
        probed,
        outcomes.into_iter().flatten().collect(),
    ))
}

fn fold(
    corpus: &Corpus,
    mode: Mode,
    cfg: &PipelineConfig,
    probed: Vec<BehaviorId>,
    outcomes: Vec<PairOutcome>,
) -> AnalysisReport {
    let mut findings = BTreeMap::new();
    let mut failures = Vec::new();
    let mut unrecognized = Vec::new();
    for o in outcomes {
        if let Some(f) = o.finding {
            findings.insert((f.class_name.clone(), f.behavior_id), f);
        }
        failures.extend(o.failures);
        unrecognized.extend(o.unrecognized);
    }
    AnalysisReport::assemble(
        corpus,
        mode,
        &cfg.model,
        probed,
        findings.into_values().collect(),
        failures,
        unrecognized,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayOptions, MockBackend, MockScript};
    use crate::response::Resolution;
    use crate::smali::parse_smali_file;

    fn v(m: bool, c: u8, e: &str) -> Phase1Verdict {
        Phase1Verdict {
            is_malicious: m,
            confidence: c,
            explanation: e.into(),
        }
    }

    #[test]
    fn merge_rules() {
        assert_eq!(merge_chunk_verdicts(&[v(false, 90, "fine")]), v(false, 90, "fine"));
        let m = merge_chunk_verdicts(&[v(false, 95, "a"), v(true, 60, "b")]);
        assert_eq!((m.is_malicious, m.confidence), (true, 60));
        assert_eq!(m.explanation, "[chunk 2/2] b");
        let m = merge_chunk_verdicts(&[v(true, 40, "x"), v(true, 80, "y")]);
        assert_eq!((m.is_malicious, m.confidence), (true, 80));
        assert!(m.explanation.contains("x") && m.explanation.contains("y"));
        let m = merge_chunk_verdicts(&[v(false, 40, "x"), v(false, 70, "y")]);
        assert_eq!((m.is_malicious, m.confidence), (false, 70));
    }

    #[test]
    fn fan_out_keeps_order() {
        let out = fan_out(50, 7, |i| i * 2);
        assert_eq!(out, (0..50).map(|i| i * 2).collect::<Vec<_>>());
        assert!(fan_out(0, 4, |i| i).is_empty());
    }

    fn class_src(name: &str, methods: &[&str]) -> String {
        let mut s = format!(".class public L{name};\n.super Ljava/lang/Object;\n");
        for m in methods {
            s.push_str(&format!("\n.method public {m}\n    .registers 1\n    return-void\n.end method\n"));
        }
        s
    }

    fn corpus() -> Corpus {
        let classes: Vec<SmaliClass> = [
            ("A", vec!["m1()V", "m2()V", "x()V"]),
            ("B", vec!["m3()V", "y()V"]),
            ("C", vec!["z()V"]),
            ("D", vec!["w()V"]),
        ]
        .iter()
        .map(|(n, ms)| parse_smali_file(&class_src(n, ms), &format!("{n}.smali")).unwrap())
        .collect();
        Corpus {
            apk_id: "t".into(),
            family: None,
            filter: None,
            class_count: classes.len(),
            method_count: 7,
            classes,
        }
    }

    const SCRIPT: &str = r#"
[[rule]]
kind = "phase1"
class = "LA;"
contains = ["Privacy Stealing"]
response = "IS_MALICIOUS: yes\nCONFIDENCE: 90\nEXPLANATION: reads contacts"
[[rule]]
kind = "phase1"
class = "LB;"
contains = ["Privacy Stealing"]
response = "IS_MALICIOUS: yes\nCONFIDENCE: 70\nEXPLANATION: uploads them"
[[rule]]
kind = "phase1"
class = "LC;"
contains = ["Privacy Stealing"]
response = "IS_MALICIOUS: yes\nCONFIDENCE: 5\nEXPLANATION: weak"
[[rule]]
kind = "phase2"
class = "LA;"
response = "METHOD: .method public m1()V\nROLE: query\nCONFIDENCE: 90\nMETHOD: m2()V\nROLE: send\nCONFIDENCE: 80\nMETHOD: .method public ghost()V\nROLE: made up\nCONFIDENCE: 10"
[[rule]]
kind = "phase2"
class = "LB;"
response = "METHOD: .method public m3()V\nROLE: upload\nCONFIDENCE: 75"
[[rule]]
kind = "phase2"
class = "LC;"
response = "METHOD: .method public z()V\nROLE: z\nCONFIDENCE: 75"
[fallback]
phase1 = "IS_MALICIOUS: no\nCONFIDENCE: 95\nEXPLANATION: benign"
baseline = "IS_MALICIOUS: no\nCONFIDENCE: 95\nEXPLANATION: benign\nBEHAVIOR: none"
"#;

    fn gateway(script: &str, workers: usize) -> Gateway {
        Gateway::new(
            Box::new(MockBackend::new(MockScript::parse(script).unwrap())),
            GatewayOptions {
                max_in_flight: workers,
                ..GatewayOptions::default()
            },
        )
    }

    #[test]
    fn two_phase_scripted_outcomes() {
        let t = Taxonomy::builtin();
        let corpus = corpus();
        let behaviors = [t.get(1).unwrap(), t.get(11).unwrap()];
        let cfg = PipelineConfig {
            gate_threshold: 10,
            ..PipelineConfig::default()
        };
        let g = gateway(SCRIPT, 4);
        let r = run_two_phase(&corpus, &behaviors, &g, &cfg).unwrap();
        // Hand enumeration: A and B pass the gate for behavior 1; C says yes
        // at 5 < 10 and stops; everything else falls back to "no".
        let keys: Vec<_> = r.findings.iter().map(|f| (f.class_name.as_str(), f.behavior_id)).collect();
        assert_eq!(keys, [("LA;", 1), ("LB;", 1)]);
        assert_eq!(r.flagged_method_count, 3);
        assert_eq!(r.flagged_class_count, 2);
        assert_eq!((r.total_class_count, r.total_method_count), (4, 7));
        assert!((r.workload_reduction - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
        let a = &r.findings[0];
        assert_eq!(a.methods.len(), 3);
        assert_eq!(a.methods[1].resolution, Resolution::Fuzzy);
        assert_eq!(a.methods[2].resolution, Resolution::Unmatched);
        assert!(r.failures.is_empty());
        // 4 classes x 2 behaviors phase-1 calls plus 2 phase-2 calls.
        assert_eq!(g.stats().mock_calls, 10);
    }

    #[test]
    fn all_benign_means_full_reduction() {
        let t = Taxonomy::builtin();
        let g = gateway("[fallback]\nphase1 = \"IS_MALICIOUS: no\\nCONFIDENCE: 90\"\n", 2);
        let all: Vec<&Behavior> = t.behaviors().iter().collect();
        let r = run_two_phase(&corpus(), &all, &g, &PipelineConfig::default()).unwrap();
        assert!(r.findings.is_empty());
        assert_eq!(r.workload_reduction, 1.0);
        assert_eq!(r.behaviors_probed, (1..=12).collect::<Vec<_>>());
        assert_eq!(run_two_phase(&corpus(), &[], &g, &PipelineConfig::default()), Err(PipelineError::EmptyBehaviorSet));
    }

    #[test]
    fn parse_failures_are_retried_once_then_recorded() {
        let t = Taxonomy::builtin();
        let g = gateway(
            "[[rule]]\nclass = \"LA;\"\nresponse = \"IS_MALICIOUS: perhaps\"\n[fallback]\nphase1 = \"IS_MALICIOUS: no\\nCONFIDENCE: 90\"\n",
            1,
        );
        let r = run_two_phase(&corpus(), &[t.get(1).unwrap()], &g, &PipelineConfig::default()).unwrap();
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].class_name, "LA;");
        assert_eq!((r.failures[0].stage, r.failures[0].kind), (Stage::Phase1, FailureKind::Parse));
        assert_eq!(r.parse_failures(), 1);
        assert_eq!(g.stats().mock_calls, 5);
    }

    #[test]
    fn gateway_failures_do_not_abort() {
        let t = Taxonomy::builtin();
        let g = gateway("[[rule]]\nclass = \"LB;\"\nresponse = \"IS_MALICIOUS: no\\nCONFIDENCE: 90\"\n", 3);
        let r = run_two_phase(&corpus(), &[t.get(2).unwrap()], &g, &PipelineConfig::default()).unwrap();
        assert_eq!(r.failures.len(), 3);
        assert!(r.failures.iter().all(|f| f.kind == FailureKind::Gateway));
    }

    #[test]
    fn baseline_expands_behaviors() {
        let t = Taxonomy::builtin();
        let script = r#"
[[rule]]
class = "LA;"
response = "IS_MALICIOUS: yes\nCONFIDENCE: 80\nEXPLANATION: steals and hides\nBEHAVIOR: Privacy Stealing, Tricky Behavior, Crypto Theft\nMETHOD: .method public m1()V\nROLE: read\nCONFIDENCE: 80"
[[rule]]
class = "LB;"
response = "garbage"
[fallback]
baseline = "IS_MALICIOUS: no\nCONFIDENCE: 95\nEXPLANATION: benign\nBEHAVIOR: none"
"#;
        let g = gateway(script, 2);
        let r = run_baseline(&corpus(), &t, &g, &PipelineConfig::default()).unwrap();
        let keys: Vec<_> = r.findings.iter().map(|f| (f.class_name.as_str(), f.behavior_id)).collect();
        assert_eq!(keys, [("LA;", 1), ("LA;", 11)]);
        assert_eq!(r.findings[0].methods, r.findings[1].methods);
        assert_eq!(r.flagged_method_count, 1);
        assert_eq!(r.failures.len(), 1);
        assert_eq!((r.failures[0].class_name.as_str(), r.failures[0].stage), ("LB;", Stage::Baseline));
        assert_eq!(r.unrecognized_labels, [UnrecognizedLabel { class_name: "LA;".into(), label: "Crypto Theft".into() }]);
        assert_eq!(r.mode, Mode::Baseline);
    }

    #[test]
    fn report_json_round_trip_and_digest() {
        let t = Taxonomy::builtin();
        let g = gateway(SCRIPT, 4);
        let r = run_two_phase(&corpus(), &[t.get(1).unwrap()], &g, &PipelineConfig::default()).unwrap();
        let json = r.to_json();
        assert!(json.ends_with("}\n"));
        assert!(json.contains("\"mode\": \"two_phase\""));
        assert_eq!(AnalysisReport::from_json(&json).unwrap(), r);
        let digest = r.render_digest(&t);
        assert!(digest.contains("Class: LA;\nBehavior: Privacy Stealing\n"));
        assert!(digest.contains("Method: .method public m1()V\nRole Explanation: query"));
        assert!(AnalysisReport::from_json(&json.replace("\"schema_version\": 1", "\"schema_version\": 9")).is_err());
    }

    #[test]
    fn schedule_independent() {
        let t = Taxonomy::builtin();
        let all: Vec<&Behavior> = t.behaviors().iter().collect();
        let reports: Vec<String> = [1, 3, 16]
            .iter()
            .map(|w| {
                run_two_phase(&corpus(), &all, &gateway(SCRIPT, *w), &PipelineConfig::default())
                    .unwrap()
                    .to_json()
            })
            .collect();
        assert_eq!(reports[0], reports[1]);
        assert_eq!(reports[0], reports[2]);
    }
}
