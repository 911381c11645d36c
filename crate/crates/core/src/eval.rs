//! Scoring reports against ground truth or analyst verdicts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{BehaviorId, Taxonomy};
use crate::pipeline::{AnalysisReport, Mode};
use crate::review::{Decision, VerdictRecord};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("report is for {report:?} but truth is for {truth:?}")]
    ApkMismatch { report: String, truth: String },
    #[error("truth references unknown behavior id {id} ({context})")]
    UnknownBehaviorId { id: BehaviorId, context: String },
    #[error("invalid ground truth: {0}")]
    BadTruth(String),
    #[error("verdict for {0} does not match any finding in the report")]
    DanglingVerdict(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

/// `1 - flagged / total`, or 0 when there is nothing to inspect.
pub fn workload_reduction(flagged_methods: usize, total_methods: usize) -> f64 {
    if total_methods == 0 {
        return 0.0;
    }
    1.0 - flagged_methods as f64 / total_methods as f64
}

/// Whole-percent rendering, e.g. `0.8667` -> `87%`.
pub fn format_percent(ratio: f64) -> String {
    format!("{:.0}%", ratio * 100.0)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision(tp: u64, fp: u64) -> f64 {
    ratio(tp, tp + fp)
}

pub fn recall(tp: u64, fn_: u64) -> f64 {
    ratio(tp, tp + fn_)
}

/// Harmonic mean of precision and recall, written as `2tp / (2tp + fp + fn)`
/// so the result is a single correctly rounded division.
pub fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    ratio(2 * tp, 2 * tp + fp + fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Class,
    Method,
}

/// What one prediction is: a (component, behavior) pair, or just the
/// component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountUnit {
    #[default]
    Pair,
    Component,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub level: Level,
    pub tp: u64,
    pub fp: u64,
    /// Absent for verdict-based (precision-only) scoring.
    #[serde(rename = "fn")]
    pub fn_: Option<u64>,
    pub precision: f64,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl MetricsRow {
    pub fn full(level: Level, tp: u64, fp: u64, fn_: u64) -> Self {
        Self {
            level,
            tp,
            fp,
            fn_: Some(fn_),
            precision: precision(tp, fp),
            recall: Some(recall(tp, fn_)),
            f1: Some(f1(tp, fp, fn_)),
        }
    }

    pub fn precision_only(level: Level, tp: u64, fp: u64) -> Self {
        Self {
            level,
            tp,
            fp,
            fn_: None,
            precision: precision(tp, fp),
            recall: None,
            f1: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub apk_id: String,
    pub mode: Mode,
    pub model: String,
    pub count_unit: Option<CountUnit>,
    pub class: MetricsRow,
    pub method: MetricsRow,
    pub workload_reduction: f64,
}

impl EvalResult {
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("metrics serialize");
        out.push('\n');
        out
    }

    /// Fixed-width table with C-/M- column prefixes. Recall and F1 print as
    /// `-` when only precision is defined.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
        let mode = match self.mode {
            Mode::Baseline => "baseline",
            Mode::TwoPhase => "two_phase",
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "Approach", "Model", "C-Prec", "C-Rec", "C-F1", "M-Prec", "M-Rec", "M-F1"
        );
        let _ = writeln!(
            out,
            "{:<12} {:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            mode,
            self.model,
            cell(Some(self.class.precision)),
            cell(self.class.recall),
            cell(self.class.f1),
            cell(Some(self.method.precision)),
            cell(self.method.recall),
            cell(self.method.f1),
        );
        for row in [&self.class, &self.method] {
            let level = match row.level {
                Level::Class => "class",
                Level::Method => "method",
            };
            let fn_ = row.fn_.map(|n| n.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{level:<6} tp={} fp={} fn={fn_}", row.tp, row.fp);
        }
        let _ = writeln!(out, "workload reduction {}", format_percent(self.workload_reduction));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthMethod {
    /// Verbatim `.method` line.
    pub signature: String,
    pub behaviors: BTreeSet<BehaviorId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthClass {
    pub class_name: String,
    pub behaviors: BTreeSet<BehaviorId>,
    #[serde(default)]
    pub methods: Vec<TruthMethod>,
}

/// Malicious classes and methods of one app with their behavior labels.
/// Anything not listed is benign.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub apk_id: String,
    pub classes: Vec<TruthClass>,
}

impl GroundTruth {
    pub fn parse(text: &str, taxonomy: &Taxonomy) -> Result<Self, EvalError> {
        let truth: Self = serde_json::from_str(text).map_err(|e| EvalError::BadTruth(e.to_string()))?;
        truth.validate(taxonomy)?;
        Ok(truth)
    }

    pub fn load(path: &Path, taxonomy: &Taxonomy) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, taxonomy)
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), EvalError> {
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if !seen.insert(c.class_name.as_str()) {
                return Err(EvalError::BadTruth(format!("class {} listed twice", c.class_name)));
            }
            if let Some(&id) = c.behaviors.iter().find(|id| !taxonomy.contains(**id)) {
                return Err(EvalError::UnknownBehaviorId {
                    id,
                    context: c.class_name.clone(),
                });
            }
            let mut sigs = BTreeSet::new();
            for m in &c.methods {
                if !sigs.insert(m.signature.trim()) {
                    return Err(EvalError::BadTruth(format!(
                        "method {} listed twice in {}",
                        m.signature, c.class_name
                    )));
                }
                if let Some(&id) = m.behaviors.iter().find(|id| !taxonomy.contains(**id)) {
                    return Err(EvalError::UnknownBehaviorId {
                        id,
                        context: format!("{} {}", c.class_name, m.signature),
                    });
                }
                if !m.behaviors.is_subset(&c.behaviors) {
                    return Err(EvalError::BadTruth(format!(
                        "method {} in {} has behaviors outside its class labels",
                        m.signature, c.class_name
                    )));
                }
            }
        }
        Ok(())
    }

    fn class_pairs(&self) -> BTreeSet<(String, BehaviorId)> {
        self.classes
            .iter()
            .flat_map(|c| c.behaviors.iter().map(move |b| (c.class_name.clone(), *b)))
            .collect()
    }

    fn method_pairs(&self) -> BTreeSet<((String, String), BehaviorId)> {
        self.classes
            .iter()
            .flat_map(|c| {
                c.methods.iter().flat_map(move |m| {
                    m.behaviors
                        .iter()
                        .map(move |b| ((c.class_name.clone(), m.signature.trim().to_string()), *b))
                })
            })
            .collect()
    }
}

/// Unmatched predictions can never be true positives; the marker keeps them
/// apart from any real signature.
const UNMATCHED_PREFIX: &str = "\u{0}unmatched:";

fn counts<K: Ord + Clone>(predicted: &BTreeSet<K>, truth: &BTreeSet<K>) -> (u64, u64, u64) {
    let tp = predicted.intersection(truth).count() as u64;
    let fp = predicted.len() as u64 - tp;
    let fn_ = truth.len() as u64 - tp;
    (tp, fp, fn_)
}

fn strip_behavior<C: Ord + Clone>(pairs: &BTreeSet<(C, BehaviorId)>) -> BTreeSet<C> {
    pairs.iter().map(|(c, _)| c.clone()).collect()
}

fn row<C: Ord + Clone>(
    level: Level,
    unit: CountUnit,
    predicted: &BTreeSet<(C, BehaviorId)>,
    truth: &BTreeSet<(C, BehaviorId)>,
) -> MetricsRow {
    let (tp, fp, fn_) = match unit {
        CountUnit::Pair => counts(predicted, truth),
        CountUnit::Component => counts(&strip_behavior(predicted), &strip_behavior(truth)),
    };
    MetricsRow::full(level, tp, fp, fn_)
}

/// Class- and method-level metrics. Every distinct predicted unit is a TP if
/// present in the truth and an FP otherwise; unmatched method lines are FPs.
pub fn score(
    report: &AnalysisReport,
    truth: &GroundTruth,
    unit: CountUnit,
) -> Result<EvalResult, EvalError> {
    if report.apk_id != truth.apk_id {
        return Err(EvalError::ApkMismatch {
            report: report.apk_id.clone(),
            truth: truth.apk_id.clone(),
        });
    }
    let predicted_classes: BTreeSet<(String, BehaviorId)> = report
        .findings
        .iter()
        .map(|f| (f.class_name.clone(), f.behavior_id))
        .collect();
    let predicted_methods: BTreeSet<((String, String), BehaviorId)> = report
        .findings
        .iter()
        .flat_map(|f| {
            f.methods.iter().map(move |m| {
                let sig = match &m.resolved_method {
                    Some(s) => s.clone(),
                    None => format!("{UNMATCHED_PREFIX}{}", m.reported_method_line),
                };
                ((f.class_name.clone(), sig), f.behavior_id)
            })
        })
        .collect();

    Ok(EvalResult {
        apk_id: report.apk_id.clone(),
        mode: report.mode,
        model: report.model.clone(),
        count_unit: Some(unit),
        class: row(Level::Class, unit, &predicted_classes, &truth.class_pairs()),
        method: row(Level::Method, unit, &predicted_methods, &truth.method_pairs()),
        workload_reduction: report.workload_reduction,
    })
}

/// Review keys present in a report: class-level keys have no signature.
pub fn finding_keys(report: &AnalysisReport) -> BTreeSet<(String, BehaviorId, Option<String>)> {
    let mut keys = BTreeSet::new();
    for f in &report.findings {
        keys.insert((f.class_name.clone(), f.behavior_id, None));
        for m in &f.methods {
            keys.insert((f.class_name.clone(), f.behavior_id, Some(m.key().to_string())));
        }
    }
    keys
}

/// Precision from analyst decisions: accepted = TP, rejected = FP, unsure
/// ignored. Later records for the same key replace earlier ones.
pub fn score_from_verdicts(
    report: &AnalysisReport,
    verdicts: &[VerdictRecord],
) -> Result<EvalResult, EvalError> {
    let keys = finding_keys(report);
    let mut latest: BTreeMap<(String, BehaviorId, Option<String>), Decision> = BTreeMap::new();
    for v in verdicts {
        let key = v.key();
        if !keys.contains(&key) {
            return Err(EvalError::DanglingVerdict(v.describe()));
        }
        latest.insert(key, v.decision);
    }
    let tally = |method_level: bool| {
        let mut tp = 0;
        let mut fp = 0;
        for ((_, _, sig), d) in &latest {
            if sig.is_some() != method_level {
                continue;
            }
            match d {
                Decision::Accepted => tp += 1,
                Decision::Rejected => fp += 1,
                Decision::Unsure => {}
            }
        }
        (tp, fp)
    };
    let (ctp, cfp) = tally(false);
    let (mtp, mfp) = tally(true);
    Ok(EvalResult {
        apk_id: report.apk_id.clone(),
        mode: report.mode,
        model: report.model.clone(),
        count_unit: None,
        class: MetricsRow::precision_only(Level::Class, ctp, cfp),
        method: MetricsRow::precision_only(Level::Method, mtp, mfp),
        workload_reduction: report.workload_reduction,
    })
}
