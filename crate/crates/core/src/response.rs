//! Parsing of model completions into typed verdicts.
//!
//! Formatting noise is tolerated: code fences, markdown emphasis around keys,
//! key case, and prose before or after the keyed lines. Semantic violations
//! (a yes/no field that is neither, a non-numeric confidence) are errors.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{BehaviorId, Taxonomy};
use crate::smali::{SmaliClass, SmaliMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Field {
    #[serde(rename = "IS_MALICIOUS")]
    IsMalicious,
    #[serde(rename = "CONFIDENCE")]
    Confidence,
    #[serde(rename = "EXPLANATION")]
    Explanation,
    #[serde(rename = "BEHAVIOR")]
    Behavior,
    #[serde(rename = "METHOD")]
    Method,
    #[serde(rename = "ROLE")]
    Role,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::IsMalicious => "IS_MALICIOUS",
            Field::Confidence => "CONFIDENCE",
            Field::Explanation => "EXPLANATION",
            Field::Behavior => "BEHAVIOR",
            Field::Method => "METHOD",
            Field::Role => "ROLE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error in {field}: {reason}")]
pub struct ParseError {
    pub field: Field,
    pub reason: String,
}

impl ParseError {
    fn new(field: Field, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase1Verdict {
    pub is_malicious: bool,
    pub confidence: u8,
    pub explanation: String,
}

impl Phase1Verdict {
    pub fn to_canonical(&self) -> String {
        format!(
            "IS_MALICIOUS: {}\nCONFIDENCE: {}\nEXPLANATION: {}\n",
            yes_no(self.is_malicious),
            self.confidence,
            self.explanation
        )
    }
}

/// One METHOD/ROLE/CONFIDENCE group as the model wrote it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportedMethod {
    pub reported_method_line: String,
    pub role: String,
    pub confidence: u8,
    /// The group had no CONFIDENCE line; `confidence` is 0.
    pub confidence_missing: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorLabel {
    pub name: String,
    /// `None` when the name matches no taxonomy entry.
    pub id: Option<BehaviorId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineVerdict {
    pub is_malicious: bool,
    pub confidence: u8,
    pub explanation: String,
    pub behaviors: Vec<BehaviorLabel>,
    pub methods: Vec<ReportedMethod>,
}

impl BaselineVerdict {
    pub fn behavior_ids(&self) -> Vec<BehaviorId> {
        let mut ids: Vec<BehaviorId> = self.behaviors.iter().filter_map(|b| b.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn unrecognized(&self) -> impl Iterator<Item = &str> {
        self.behaviors
            .iter()
            .filter(|b| b.id.is_none())
            .map(|b| b.name.as_str())
    }

    pub fn to_canonical(&self) -> String {
        let behaviors = if self.behaviors.is_empty() {
            "none".to_string()
        } else {
            self.behaviors
                .iter()
                .map(|b| b.name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut out = format!(
            "IS_MALICIOUS: {}\nCONFIDENCE: {}\nEXPLANATION: {}\nBEHAVIOR: {}\n",
            yes_no(self.is_malicious),
            self.confidence,
            self.explanation,
            behaviors
        );
        if !self.methods.is_empty() {
            out.push('\n');
            out.push_str(&canonical_methods(&self.methods));
        }
        out
    }
}

pub fn canonical_methods(methods: &[ReportedMethod]) -> String {
    let mut out = String::new();
    for m in methods {
        out.push_str(&format!("METHOD: {}\nROLE: {}\n", m.reported_method_line, m.role));
        if !m.confidence_missing {
            out.push_str(&format!("CONFIDENCE: {}\n", m.confidence));
        }
    }
    out
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

static KEY_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:[-*>#]+\s*)?(?:\*\*|__)?\s*(IS[_ ]MALICIOUS|CONFIDENCE(?:[_ ]SCORE)?|EXPLANATION|BEHAVIOU?RS?|METHOD|ROLE(?:[_ ]DESCRIPTION)?)\s*(?:\*\*|__)?\s*:\s*(?:\*\*|__)?(.*)$",
    )
    .unwrap()
});

static CONFIDENCE_VALUE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{1,3})\s*(?:%|/\s*100)?$").unwrap());

static NUMBERING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+[.)]\s*").unwrap());

#[derive(Debug)]
struct Entry {
    field: Field,
    value: String,
}

fn field_of(key: &str) -> Field {
    let key = key.to_ascii_uppercase();
    if key.starts_with("IS") {
        Field::IsMalicious
    } else if key.starts_with("CONFIDENCE") {
        Field::Confidence
    } else if key.starts_with("EXPLANATION") {
        Field::Explanation
    } else if key.starts_with("BEHAVIO") {
        Field::Behavior
    } else if key.starts_with("METHOD") {
        Field::Method
    } else {
        Field::Role
    }
}

/// Splits a completion into keyed entries. Explanation and role values may
/// continue over the following non-key lines.
fn entries(raw: &str) -> Vec<Entry> {
    let mut out: Vec<Entry> = Vec::new();
    let mut continuing = false;
    for line in raw.lines() {
        if line.trim_start().starts_with("```") {
            continue;
        }
        if let Some(caps) = KEY_LINE.captures(line) {
            let field = field_of(&caps[1]);
            let value = strip_trailing_emphasis(caps[2].trim()).to_string();
            continuing = matches!(field, Field::Explanation | Field::Role);
            out.push(Entry { field, value });
        } else if continuing {
            let last = out.last_mut().expect("continuing implies an entry");
            last.value.push('\n');
            last.value.push_str(line.trim_end());
        }
    }
    for e in &mut out {
        e.value = e.value.trim().to_string();
    }
    out
}

fn strip_trailing_emphasis(value: &str) -> &str {
    value
        .strip_suffix("**")
        .or_else(|| value.strip_suffix("__"))
        .unwrap_or(value)
        .trim()
}

fn clean_token(value: &str) -> &str {
    value
        .trim()
        .trim_matches(|c: char| matches!(c, '`' | '*' | '"' | '\'' | '_'))
        .trim_end_matches(['.', ',', ';'])
        .trim()
}

fn parse_yes_no(value: &str) -> Result<bool, ParseError> {
    match clean_token(value).to_ascii_lowercase().as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        other => Err(ParseError::new(
            Field::IsMalicious,
            format!("expected yes or no, got {other:?}"),
        )),
    }
}

fn parse_confidence(value: &str) -> Result<u8, ParseError> {
    let token = clean_token(value);
    let n = CONFIDENCE_VALUE
        .captures(token)
        .and_then(|c| c[1].parse::<u16>().ok())
        .ok_or_else(|| ParseError::new(Field::Confidence, format!("not a number: {token:?}")))?;
    if n > 100 {
        return Err(ParseError::new(Field::Confidence, format!("{n} is outside 0-100")));
    }
    Ok(n as u8)
}

fn clean_method_line(value: &str) -> String {
    value.trim().trim_matches('`').trim().to_string()
}

fn verdict_fields(head: &[Entry]) -> Result<Phase1Verdict, ParseError> {
    let first = |field: Field| head.iter().find(|e| e.field == field);
    let is_malicious = parse_yes_no(
        &first(Field::IsMalicious)
            .ok_or_else(|| ParseError::new(Field::IsMalicious, "missing"))?
            .value,
    )?;
    let confidence = parse_confidence(
        &first(Field::Confidence)
            .ok_or_else(|| ParseError::new(Field::Confidence, "missing"))?
            .value,
    )?;
    let explanation = first(Field::Explanation)
        .map(|e| e.value.clone())
        .unwrap_or_default();
    if is_malicious && explanation.is_empty() {
        return Err(ParseError::new(
            Field::Explanation,
            "required when IS_MALICIOUS is yes",
        ));
    }
    Ok(Phase1Verdict {
        is_malicious,
        confidence,
        explanation,
    })
}

fn split_at_first_method(entries: &[Entry]) -> (&[Entry], &[Entry]) {
    let idx = entries
        .iter()
        .position(|e| e.field == Field::Method)
        .unwrap_or(entries.len());
    entries.split_at(idx)
}

pub fn parse_phase1(raw: &str) -> Result<Phase1Verdict, ParseError> {
    let all = entries(raw);
    let (head, _) = split_at_first_method(&all);
    verdict_fields(head)
}

fn method_groups(entries: &[Entry]) -> Result<Vec<ReportedMethod>, ParseError> {
    let mut out: Vec<ReportedMethod> = Vec::new();
    let mut open = false;
    let mut has_role = false;
    for e in entries {
        match e.field {
            Field::Method => {
                out.push(ReportedMethod {
                    reported_method_line: clean_method_line(&e.value),
                    role: String::new(),
                    confidence: 0,
                    confidence_missing: true,
                });
                open = true;
                has_role = false;
            }
            Field::Role => {
                let current = out
                    .last_mut()
                    .filter(|_| open)
                    .ok_or_else(|| ParseError::new(Field::Role, "ROLE before any METHOD"))?;
                if has_role {
                    current.role.push('\n');
                }
                current.role.push_str(&e.value);
                has_role = true;
            }
            Field::Confidence if open => {
                let current = out.last_mut().expect("open group");
                if current.confidence_missing {
                    current.confidence = parse_confidence(&e.value)?;
                    current.confidence_missing = false;
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Parses METHOD/ROLE/CONFIDENCE groups. An empty list is a legal answer.
pub fn parse_phase2(raw: &str) -> Result<Vec<ReportedMethod>, ParseError> {
    method_groups(&entries(raw))
}

pub fn parse_baseline(raw: &str, taxonomy: &Taxonomy) -> Result<BaselineVerdict, ParseError> {
    let all = entries(raw);
    let (head, tail) = split_at_first_method(&all);
    let verdict = verdict_fields(head)?;
    let behaviors = head
        .iter()
        .find(|e| e.field == Field::Behavior)
        .map(|e| parse_behavior_list(&e.value, taxonomy))
        .unwrap_or_default();
    Ok(BaselineVerdict {
        is_malicious: verdict.is_malicious,
        confidence: verdict.confidence,
        explanation: verdict.explanation,
        behaviors,
        methods: method_groups(tail)?,
    })
}

fn parse_behavior_list(value: &str, taxonomy: &Taxonomy) -> Vec<BehaviorLabel> {
    let mut labels: Vec<BehaviorLabel> = Vec::new();
    for item in value.split([',', ';', '\n']) {
        let item = clean_token(item);
        let item = NUMBERING.replace(item, "");
        let item = clean_token(&item);
        if item.is_empty()
            || ["none", "n/a", "na", "null", "-"].contains(&item.to_ascii_lowercase().as_str())
        {
            continue;
        }
        let id = taxonomy.by_name(item).map(|b| b.id).or_else(|| {
            item.parse::<BehaviorId>()
                .ok()
                .filter(|id| taxonomy.contains(*id))
        });
        let name = match id {
            Some(id) => taxonomy.get(id).expect("id from taxonomy").name.clone(),
            None => item.to_string(),
        };
        if !labels.iter().any(|l| l.name == name) {
            labels.push(BehaviorLabel { name, id });
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Exact,
    Normalized,
    Fuzzy,
    Unmatched,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reported:?} matches {} methods", candidates.len())]
pub struct AmbiguousMatch {
    pub reported: String,
    pub candidates: Vec<String>,
}

/// Whitespace-collapsed form without a leading `.method` token.
pub fn normalize_method_line(line: &str) -> String {
    let collapsed = line.trim().trim_matches('`').split_whitespace().collect::<Vec<_>>();
    let tokens = match collapsed.first() {
        Some(&".method") => &collapsed[1..],
        _ => &collapsed[..],
    };
    tokens.join(" ")
}

fn is_ident_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'$')
}

fn contains_at_boundary(haystack: &str, needle: &str) -> bool {
    haystack.match_indices(needle).any(|(i, _)| {
        i == 0 || !is_ident_byte(haystack.as_bytes()[i - 1])
    })
}

/// Maps a model-reported method line onto a parsed method: exact, then
/// whitespace/`.method`-normalized, then a unique `name + descriptor`
/// substring match.
pub fn resolve_method<'c>(
    reported_line: &str,
    class: &'c SmaliClass,
) -> Result<(Resolution, Option<&'c SmaliMethod>), AmbiguousMatch> {
    let trimmed = reported_line.trim();
    if let Some(m) = class.methods.iter().find(|m| m.signature_line == trimmed) {
        return Ok((Resolution::Exact, Some(m)));
    }
    let normalized = normalize_method_line(trimmed);
    if !normalized.is_empty() {
        if let Some(m) = class
            .methods
            .iter()
            .find(|m| normalize_method_line(&m.signature_line) == normalized)
        {
            return Ok((Resolution::Normalized, Some(m)));
        }
    }
    let compact: String = trimmed.split_whitespace().collect::<Vec<_>>().join(" ");
    let candidates: Vec<&SmaliMethod> = class
        .methods
        .iter()
        .filter(|m| contains_at_boundary(&compact, &m.name_and_descriptor()))
        .collect();
    match candidates.as_slice() {
        [] => Ok((Resolution::Unmatched, None)),
        [one] => Ok((Resolution::Fuzzy, Some(one))),
        many => Err(AmbiguousMatch {
            reported: trimmed.to_string(),
            candidates: many.iter().map(|m| m.signature_line.clone()).collect(),
        }),
    }
}

/// A reported method after resolution against the class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodFinding {
    pub reported_method_line: String,
    pub role: String,
    pub confidence: u8,
    pub confidence_missing: bool,
    pub resolution: Resolution,
    /// `signature_line` of the resolved method.
    pub resolved_method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl MethodFinding {
    pub fn resolve(reported: &ReportedMethod, class: &SmaliClass) -> Self {
        let (resolution, resolved_method, note) =
            match resolve_method(&reported.reported_method_line, class) {
                Ok((r, m)) => (r, m.map(|m| m.signature_line.clone()), None),
                Err(amb) => (
                    Resolution::Unmatched,
                    None,
                    Some(format!("ambiguous: matches {} methods", amb.candidates.len())),
                ),
            };
        Self {
            reported_method_line: reported.reported_method_line.clone(),
            role: reported.role.clone(),
            confidence: reported.confidence,
            confidence_missing: reported.confidence_missing,
            resolution,
            resolved_method,
            note,
        }
    }

    /// The key used for deduplication and review: the resolved signature, or
    /// the reported line when unmatched.
    pub fn key(&self) -> &str {
        self.resolved_method
            .as_deref()
            .unwrap_or(&self.reported_method_line)
    }
}

/// Merges findings that point at the same method (or the same unmatched
/// line): max confidence, roles joined. First-seen order is kept.
pub fn dedup_findings(findings: Vec<MethodFinding>) -> Vec<MethodFinding> {
    let mut out: Vec<MethodFinding> = Vec::new();
    for f in findings {
        match out
            .iter_mut()
            .find(|o| o.key() == f.key() && o.resolved_method.is_some() == f.resolved_method.is_some())
        {
            Some(existing) => {
                if f.confidence > existing.confidence {
                    existing.confidence = f.confidence;
                }
                existing.confidence_missing &= f.confidence_missing;
                if !f.role.is_empty() && !existing.role.contains(&f.role) {
                    if !existing.role.is_empty() {
                        existing.role.push_str(" | ");
                    }
                    existing.role.push_str(&f.role);
                }
                existing.resolution = existing.resolution.min(f.resolution);
            }
            None => out.push(f),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smali::parse_smali_file;
    use proptest::prelude::*;

    #[test]
    fn phase1_clean() {
        let v = parse_phase1("IS_MALICIOUS: yes\nCONFIDENCE: 85\nEXPLANATION: exfiltrates contacts").unwrap();
        assert_eq!(
            v,
            Phase1Verdict {
                is_malicious: true,
                confidence: 85,
                explanation: "exfiltrates contacts".into()
            }
        );
    }

    #[test]
    fn phase1_noise_tolerated() {
        let clean = parse_phase1("IS_MALICIOUS: yes\nCONFIDENCE: 85\nEXPLANATION: exfiltrates contacts").unwrap();
        for raw in [
            "```\nIS_MALICIOUS: yes\nCONFIDENCE: 85\nEXPLANATION: exfiltrates contacts\n```",
            "```text\nis_malicious: YES\nConfidence: 85%\nexplanation: exfiltrates contacts\n```\n",
            "Sure, here is my analysis.\n\n**IS_MALICIOUS:** Yes\n**CONFIDENCE:** 85\n**EXPLANATION:** exfiltrates contacts",
            "- IS MALICIOUS: yes.\n- CONFIDENCE: 85/100\n- EXPLANATION: exfiltrates contacts",
        ] {
            assert_eq!(parse_phase1(raw).unwrap(), clean, "{raw}");
        }
    }

    #[test]
    fn phase1_errors() {
        let err = parse_phase1("IS_MALICIOUS: maybe\nCONFIDENCE: 50\nEXPLANATION: x").unwrap_err();
        assert_eq!(err.field, Field::IsMalicious);
        assert_eq!(parse_phase1("CONFIDENCE: 50").unwrap_err().field, Field::IsMalicious);
        assert_eq!(
            parse_phase1("IS_MALICIOUS: no\nCONFIDENCE: high").unwrap_err().field,
            Field::Confidence
        );
        assert_eq!(
            parse_phase1("IS_MALICIOUS: no\nCONFIDENCE: 101").unwrap_err().field,
            Field::Confidence
        );
        assert_eq!(
            parse_phase1("IS_MALICIOUS: yes\nCONFIDENCE: 70").unwrap_err().field,
            Field::Explanation
        );
        let benign = parse_phase1("IS_MALICIOUS: no\nCONFIDENCE: 70").unwrap();
        assert!(!benign.is_malicious && benign.explanation.is_empty());
    }

    #[test]
    fn multiline_explanation() {
        let v = parse_phase1("IS_MALICIOUS: yes\nCONFIDENCE: 90\nEXPLANATION: first line\nsecond line\n").unwrap();
        assert_eq!(v.explanation, "first line\nsecond line");
    }

    #[test]
    fn phase2_groups() {
        let raw = "METHOD: .method public static f(Landroid/content/Context;)Ljava/util/ArrayList;\n\
                   ROLE: enumerates contacts\nCONFIDENCE: 90\n\n\
                   METHOD: `.method public static a(Landroid/content/Context;ILjava/lang/String;)V`\n\
                   ROLE: starts exfiltration service\nCONFIDENCE: 80\n";
        let ms = parse_phase2(raw).unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(
            ms[1].reported_method_line,
            ".method public static a(Landroid/content/Context;ILjava/lang/String;)V"
        );
        assert_eq!((ms[0].confidence, ms[1].confidence), (90, 80));
        assert!(!ms[0].confidence_missing);

        assert_eq!(parse_phase2("ROLE: does X\nMETHOD: a()V").unwrap_err().field, Field::Role);

        let ms = parse_phase2("METHOD: a()V\nROLE: r").unwrap();
        assert_eq!(ms[0].confidence, 0);
        assert!(ms[0].confidence_missing);

        assert!(parse_phase2("No methods are involved.").unwrap().is_empty());
        assert_eq!(
            parse_phase2("METHOD: a()V\nROLE: r\nCONFIDENCE: lots").unwrap_err().field,
            Field::Confidence
        );
    }

    #[test]
    fn baseline_behaviors() {
        let t = Taxonomy::builtin();
        let v = parse_baseline(
            "IS_MALICIOUS: yes\nCONFIDENCE: 80\nEXPLANATION: x\nBEHAVIOR: Privacy Stealing, Tricky Behavior\n\nMETHOD: .method a()V\nROLE: r1\nMETHOD: .method b()V\nROLE: r2\n",
            &t,
        )
        .unwrap();
        assert_eq!(v.behavior_ids(), [1, 11]);
        assert_eq!(v.methods.len(), 2);
        assert!(v.methods.iter().all(|m| m.confidence == 0 && m.confidence_missing));

        let v = parse_baseline("IS_MALICIOUS: no\nCONFIDENCE: 90\nEXPLANATION: fine\nBEHAVIOR: none", &t).unwrap();
        assert!(v.behaviors.is_empty());

        let v = parse_baseline(
            "IS_MALICIOUS: yes\nCONFIDENCE: 60\nEXPLANATION: x\nBEHAVIOR: 1. privacy stealing; Crypto Theft",
            &t,
        )
        .unwrap();
        assert_eq!(v.behavior_ids(), [1]);
        assert_eq!(v.unrecognized().collect::<Vec<_>>(), ["Crypto Theft"]);
        assert_eq!(v.behaviors[0].name, "Privacy Stealing");
    }

    fn class() -> SmaliClass {
        parse_smali_file(
            ".class public final Lb;\n\
             .method public static f(Landroid/content/Context;)Ljava/util/ArrayList;\n.end method\n\
             .method public static a(Landroid/content/Context;ILjava/lang/String;)V\n.end method\n\
             .method private h()V\n.end method\n\
             .method private ha()V\n.end method\n",
            "b.smali",
        )
        .unwrap()
    }

    #[test]
    fn resolution_ladder() {
        let c = class();
        let sig = ".method public static f(Landroid/content/Context;)Ljava/util/ArrayList;";
        let (r, m) = resolve_method(sig, &c).unwrap();
        assert_eq!((r, m.unwrap().signature_line.as_str()), (Resolution::Exact, sig));

        let (r, m) = resolve_method(
            ".method  public   static f(Landroid/content/Context;)Ljava/util/ArrayList;",
            &c,
        )
        .unwrap();
        assert_eq!((r, m.unwrap().signature_line.as_str()), (Resolution::Normalized, sig));

        let (r, _) = resolve_method("public static f(Landroid/content/Context;)Ljava/util/ArrayList;", &c).unwrap();
        assert_eq!(r, Resolution::Normalized);

        let (r, m) = resolve_method("Lb;->a(Landroid/content/Context;ILjava/lang/String;)V", &c).unwrap();
        assert_eq!(r, Resolution::Fuzzy);
        assert_eq!(m.unwrap().name, "a");

        // `h()V` occurs inside `ha()V` but not at an identifier boundary.
        let (r, m) = resolve_method(".method public ha()V", &c).unwrap();
        assert_eq!((r, m.unwrap().name.as_str()), (Resolution::Fuzzy, "ha"));

        assert_eq!(resolve_method("public void g()", &c).unwrap(), (Resolution::Unmatched, None));

        let err = resolve_method("h()V and ha()V", &c).unwrap_err();
        assert_eq!(err.candidates.len(), 2);
        let f = MethodFinding::resolve(
            &ReportedMethod {
                reported_method_line: "h()V and ha()V".into(),
                role: String::new(),
                confidence: 10,
                confidence_missing: false,
            },
            &c,
        );
        assert_eq!(f.resolution, Resolution::Unmatched);
        assert!(f.note.unwrap().starts_with("ambiguous"));
    }

    #[test]
    fn dedup_merges_same_method() {
        let c = class();
        let mk = |line: &str, role: &str, conf: u8| {
            MethodFinding::resolve(
                &ReportedMethod {
                    reported_method_line: line.into(),
                    role: role.into(),
                    confidence: conf,
                    confidence_missing: false,
                },
                &c,
            )
        };
        let merged = dedup_findings(vec![
            mk(".method private h()V", "reads", 40),
            mk("public void g()", "ghost", 10),
            mk(".method  private h()V", "sends", 70),
            mk("public void g()", "ghost", 30),
        ]);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].confidence, 70);
        assert_eq!(merged[0].role, "reads | sends");
        assert_eq!(merged[0].resolution, Resolution::Exact);
        assert_eq!(merged[1].confidence, 30);
    }

    fn text_line() -> impl Strategy<Value = String> {
        "[a-zA-Z][a-zA-Z0-9 ,()/;.]{0,40}".prop_filter("not key-like", |s| KEY_LINE.captures(s).is_none())
    }

    proptest! {
        #[test]
        fn phase1_canonical_round_trip(
            is_malicious in any::<bool>(),
            confidence in 0u8..=100,
            lines in prop::collection::vec(text_line(), 1..4),
        ) {
            let v = Phase1Verdict {
                is_malicious,
                confidence,
                explanation: lines.iter().map(|l| l.trim()).collect::<Vec<_>>().join("\n").trim().to_string(),
            };
            prop_assume!(!v.explanation.is_empty());
            prop_assert_eq!(parse_phase1(&v.to_canonical()).unwrap(), v);
        }

        #[test]
        fn phase2_canonical_round_trip(
            groups in prop::collection::vec((text_line(), text_line(), prop::option::of(0u8..=100)), 0..5),
        ) {
            let methods: Vec<ReportedMethod> = groups
                .into_iter()
                .map(|(m, r, c)| ReportedMethod {
                    reported_method_line: m.trim().to_string(),
                    role: r.trim().to_string(),
                    confidence: c.unwrap_or(0),
                    confidence_missing: c.is_none(),
                })
                .collect();
            prop_assert_eq!(parse_phase2(&canonical_methods(&methods)).unwrap(), methods);
        }

        #[test]
        fn baseline_canonical_round_trip(
            is_malicious in any::<bool>(),
            confidence in 0u8..=100,
            ids in prop::collection::btree_set(1u8..=12, 0..4),
            role in text_line(),
        ) {
            let t = Taxonomy::builtin();
            let v = BaselineVerdict {
                is_malicious,
                confidence,
                explanation: "explained".into(),
                behaviors: ids.iter().map(|id| BehaviorLabel { name: t.get(*id).unwrap().name.clone(), id: Some(*id) }).collect(),
                methods: vec![ReportedMethod {
                    reported_method_line: ".method public x()V".into(),
                    role: role.trim().to_string(),
                    confidence: 0,
                    confidence_missing: true,
                }],
            };
            prop_assert_eq!(parse_baseline(&v.to_canonical(), &t).unwrap(), v);
        }

        #[test]
        fn parsers_total_on_arbitrary_text(raw in "\\PC{0,300}") {
            let t = Taxonomy::builtin();
            let _ = parse_phase1(&raw);
            let _ = parse_phase2(&raw);
            let _ = parse_baseline(&raw, &t);
        }

        #[test]
        fn exact_and_normalized_resolutions_are_sound(idx in 0usize..4, pad in "[ \t]{1,3}", drop_directive in any::<bool>()) {
            let c = class();
            let sig = &c.methods[idx].signature_line;
            let mut reported = sig.replace(' ', &pad);
            if drop_directive {
                reported = reported.trim_start_matches(".method").to_string();
            }
            let (r, m) = resolve_method(&reported, &c).unwrap();
            prop_assert!(matches!(r, Resolution::Exact | Resolution::Normalized));
            let m = m.unwrap();
            prop_assert_eq!(normalize_method_line(&m.signature_line), normalize_method_line(&reported));
        }
    }
}
