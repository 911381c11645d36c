//! Smali corpus ingestion.
//!
//! A decompiled app is a tree of `.smali` files, one class per file. Each
//! file is split into its `.method ... .end method` blocks with exact line
//! spans; everything else (fields, annotations, source directives) stays in
//! the class `raw_text` only.

mod decompile;
mod group;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

pub use decompile::{build_command_args, decompile, DecompileError};
pub use group::{anchor_candidate, group_synthetic_methods, MethodGroup};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SmaliError {
    #[error("{path}: no .class directive")]
    MissingClassDirective { path: String },
    #[error("{path}:{line}: .method without matching .end method")]
    UnterminatedMethod { path: String, line: usize },
    #[error("{path}:{line}: .method inside an open method (opened at line {open})")]
    NestedMethod {
        path: String,
        line: usize,
        open: usize,
    },
    #[error("{path}:{line}: .end method outside of a method")]
    StrayEndMethod { path: String, line: usize },
    #[error("{path}:{line}: malformed .method directive")]
    MalformedMethod { path: String, line: usize },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("no .smali files found under {0}")]
    EmptyCorpus(String),
    #[error("corpus file {path}: {reason}")]
    BadCorpusFile { path: String, reason: String },
}

/// Name patterns that mark compiler-generated methods. `*` matches any run
/// of characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticPatterns(pub Vec<String>);

impl Default for SyntheticPatterns {
    fn default() -> Self {
        Self(
            ["lambda$*", "*$lambda$*", "-$$Nest$*", "access$*"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
    }
}

impl SyntheticPatterns {
    pub fn matches(&self, name: &str) -> bool {
        self.0.iter().any(|p| wildcard_match(p, name))
    }
}

fn wildcard_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() {
        return false;
    }
    if !text[first.len()..].ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmaliMethod {
    /// The `.method` line with surrounding whitespace trimmed.
    pub signature_line: String,
    pub name: String,
    /// Parameter and return portion, e.g. `(Landroid/content/Context;)V`.
    pub descriptor: String,
    pub modifiers: BTreeSet<String>,
    /// Verbatim lines strictly between the `.method` and `.end method` lines.
    pub body_text: String,
    /// 1-based inclusive line span in the untrimmed file.
    pub line_span: (usize, usize),
    pub is_synthetic: bool,
}

impl SmaliMethod {
    /// `name + descriptor`, the part of the signature that identifies the
    /// method inside its class.
    pub fn name_and_descriptor(&self) -> String {
        format!("{}{}", self.name, self.descriptor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmaliClass {
    pub class_name: String,
    pub source_path: String,
    pub super_name: String,
    pub methods: Vec<SmaliMethod>,
    pub raw_text: String,
    pub is_developer_code: bool,
}

impl SmaliClass {
    /// Text before the first `.method` line (the whole file when there are
    /// no methods).
    pub fn header(&self) -> &str {
        match self.methods.first() {
            Some(m) => &self.raw_text[..line_offset(&self.raw_text, m.line_span.0)],
            None => &self.raw_text,
        }
    }

    /// Byte slice of the file covering `line_span` of a method, line endings
    /// included.
    pub fn method_slice(&self, method: &SmaliMethod) -> &str {
        let start = line_offset(&self.raw_text, method.line_span.0);
        let end = line_offset(&self.raw_text, method.line_span.1 + 1);
        &self.raw_text[start..end]
    }

    pub fn method_by_signature(&self, signature_line: &str) -> Option<&SmaliMethod> {
        self.methods.iter().find(|m| m.signature_line == signature_line)
    }
}

/// Byte offset of the start of 1-based `line` (or the text length past EOF).
fn line_offset(text: &str, line: usize) -> usize {
    if line <= 1 {
        return 0;
    }
    text.split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub apk_id: String,
    pub family: Option<String>,
    /// Package prefixes in internal form (`Lcom/demo/`) marking developer code.
    pub filter: Option<Vec<String>>,
    pub class_count: usize,
    pub method_count: usize,
    pub classes: Vec<SmaliClass>,
}

impl Corpus {
    pub fn developer_classes(&self) -> impl Iterator<Item = &SmaliClass> {
        self.classes.iter().filter(|c| c.is_developer_code)
    }

    pub fn class(&self, class_name: &str) -> Option<&SmaliClass> {
        self.classes.iter().find(|c| c.class_name == class_name)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("corpus serializes");
        out.push('\n');
        out
    }

    pub fn load(path: &Path) -> Result<Self, SmaliError> {
        let bad = |reason: String| SmaliError::BadCorpusFile {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let corpus: Corpus = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if corpus.class_count != corpus.classes.len() {
            return Err(bad("class_count does not match classes".into()));
        }
        Ok(corpus)
    }
}

pub fn parse_smali_file(text: &str, path: &str) -> Result<SmaliClass, SmaliError> {
    parse_smali_file_with(text, path, &SyntheticPatterns::default())
}

pub fn parse_smali_file_with(
    text: &str,
    path: &str,
    patterns: &SyntheticPatterns,
) -> Result<SmaliClass, SmaliError> {
    let mut class_name = None;
    let mut super_name = String::new();
    let mut methods = Vec::new();
    // (line number, trimmed signature, byte offset of the body start)
    let mut open: Option<(usize, String, usize)> = None;
    let mut offset = 0;

    for (idx, raw_line) in text.split_inclusive('\n').enumerate() {
        let line_no = idx + 1;
        let trimmed = raw_line.trim();
        let line_start = offset;
        offset += raw_line.len();

        if directive_is(trimmed, ".method") {
            if let Some((open_line, _, _)) = &open {
                return Err(SmaliError::NestedMethod {
                    path: path.to_string(),
                    line: line_no,
                    open: *open_line,
                });
            }
            open = Some((line_no, trimmed.to_string(), offset));
        } else if directive_is(trimmed, ".end") && trimmed.split_whitespace().nth(1) == Some("method") {
            let Some((start_line, signature_line, body_start)) = open.take() else {
                return Err(SmaliError::StrayEndMethod {
                    path: path.to_string(),
                    line: line_no,
                });
            };
            let (name, descriptor, modifiers) =
                split_signature(&signature_line).ok_or_else(|| SmaliError::MalformedMethod {
                    path: path.to_string(),
                    line: start_line,
                })?;
            let is_synthetic = modifiers.contains("synthetic") || patterns.matches(&name);
            methods.push(SmaliMethod {
                signature_line,
                name,
                descriptor,
                modifiers,
                body_text: text[body_start..line_start].to_string(),
                line_span: (start_line, line_no),
                is_synthetic,
            });
        } else if open.is_none() {
            if class_name.is_none() && directive_is(trimmed, ".class") {
                class_name = trimmed.split_whitespace().last().map(str::to_string);
            } else if directive_is(trimmed, ".super") {
                super_name = trimmed
                    .split_whitespace()
                    .nth(1)
                    .unwrap_or_default()
                    .to_string();
            }
        }
    }

    if let Some((line, _, _)) = open {
        return Err(SmaliError::UnterminatedMethod {
            path: path.to_string(),
            line,
        });
    }
    let class_name = class_name
        .filter(|n| n != ".class")
        .ok_or_else(|| SmaliError::MissingClassDirective {
            path: path.to_string(),
        })?;

    Ok(SmaliClass {
        class_name,
        source_path: path.to_string(),
        super_name,
        methods,
        raw_text: text.to_string(),
        is_developer_code: true,
    })
}

fn directive_is(trimmed: &str, directive: &str) -> bool {
    trimmed
        .strip_prefix(directive)
        .is_some_and(|rest| rest.is_empty() || rest.starts_with(char::is_whitespace))
}

/// Splits `.method public static f(I)V` into name, descriptor and modifiers.
fn split_signature(signature_line: &str) -> Option<(String, String, BTreeSet<String>)> {
    let mut tokens: Vec<&str> = signature_line.split_whitespace().collect();
    if tokens.first() != Some(&".method") || tokens.len() < 2 {
        return None;
    }
    let last = tokens.pop()?;
    let paren = last.find('(')?;
    let modifiers = tokens[1..].iter().map(|t| t.to_string()).collect();
    Some((last[..paren].to_string(), last[paren..].to_string(), modifiers))
}

/// Parses every `*.smali` file below `root` into a corpus sorted by class
/// name. Multiple dex roots (`smali`, `smali_classes2`, ...) merge into one
/// corpus.
pub fn ingest_tree(
    root: &Path,
    filter: Option<&[String]>,
    apk_id: &str,
    family: Option<&str>,
) -> Result<Corpus, SmaliError> {
    ingest_tree_with(root, filter, apk_id, family, &SyntheticPatterns::default())
}

pub fn ingest_tree_with(
    root: &Path,
    filter: Option<&[String]>,
    apk_id: &str,
    family: Option<&str>,
    patterns: &SyntheticPatterns,
) -> Result<Corpus, SmaliError> {
    if !root.is_dir() {
        return Err(SmaliError::Io {
            path: root.display().to_string(),
            reason: "not a directory".into(),
        });
    }
    let files = smali_files(root)?;
    if files.is_empty() {
        return Err(SmaliError::EmptyCorpus(root.display().to_string()));
    }

    let mut classes = files
        .par_iter()
        .map(|file| {
            let rel = relative_path(root, file);
            let text = fs::read_to_string(file).map_err(|e| SmaliError::Io {
                path: rel.clone(),
                reason: e.to_string(),
            })?;
            parse_smali_file_with(&text, &rel, patterns)
        })
        .collect::<Result<Vec<_>, _>>()?;

    for class in &mut classes {
        class.is_developer_code = match filter {
            Some(prefixes) => prefixes.iter().any(|p| class.class_name.starts_with(p.as_str())),
            None => true,
        };
    }
    classes.sort_by(|a, b| {
        a.class_name
            .cmp(&b.class_name)
            .then_with(|| a.source_path.cmp(&b.source_path))
    });

    let method_count = classes
        .iter()
        .filter(|c| c.is_developer_code)
        .map(|c| c.methods.len())
        .sum();
    Ok(Corpus {
        apk_id: apk_id.to_string(),
        family: family.map(str::to_string),
        filter: filter.map(<[String]>::to_vec),
        class_count: classes.len(),
        method_count,
        classes,
    })
}

pub(crate) fn smali_files(root: &Path) -> Result<Vec<PathBuf>, SmaliError> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| SmaliError::Io {
            path: root.display().to_string(),
            reason: e.to_string(),
        })?;
        if entry.file_type().is_file()
            && entry.path().extension().is_some_and(|ext| ext == "smali")
        {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

fn relative_path(root: &Path, file: &Path) -> String {
    let rel = file.strip_prefix(root).unwrap_or(file);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}
