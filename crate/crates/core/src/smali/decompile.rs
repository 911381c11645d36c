use std::path::{Path, PathBuf};
use std::process::Command;

use thiserror::Error;

use super::smali_files;

#[derive(Debug, Error)]
pub enum DecompileError {
    #[error("no decompiler command configured")]
    ToolNotConfigured,
    #[error("decompiler command template: {0}")]
    BadTemplate(String),
    #[error("decompiler exited with {status}: {stderr}")]
    ToolFailed { status: String, stderr: String },
    #[error("decompiler produced no .smali files in {0}")]
    NoSmaliProduced(String),
    #[error("failed to run decompiler: {0}")]
    Spawn(#[from] std::io::Error),
}

/// Splits a command template into arguments and substitutes `{apk}` and
/// `{out}` inside each argument. Quoting follows POSIX shell word rules.
pub fn build_command_args(
    template: &str,
    apk: &Path,
    out_dir: &Path,
) -> Result<Vec<String>, DecompileError> {
    if !template.contains("{apk}") || !template.contains("{out}") {
        return Err(DecompileError::BadTemplate(
            "must contain {apk} and {out} placeholders".into(),
        ));
    }
    let words = shell_words::split(template).map_err(|e| DecompileError::BadTemplate(e.to_string()))?;
    if words.is_empty() {
        return Err(DecompileError::ToolNotConfigured);
    }
    let apk = apk.display().to_string();
    let out = out_dir.display().to_string();
    Ok(words
        .into_iter()
        .map(|w| w.replace("{apk}", &apk).replace("{out}", &out))
        .collect())
}

/// Runs the configured decompiler (e.g. `apktool d -f {apk} -o {out}`) and
/// returns the directory holding the Smali roots.
pub fn decompile(
    apk: &Path,
    tool_command: Option<&str>,
    out_dir: &Path,
) -> Result<PathBuf, DecompileError> {
    let template = tool_command
        .filter(|t| !t.trim().is_empty())
        .ok_or(DecompileError::ToolNotConfigured)?;
    let args = build_command_args(template, apk, out_dir)?;
    let output = Command::new(&args[0]).args(&args[1..]).output()?;
    if !output.status.success() {
        return Err(DecompileError::ToolFailed {
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    let found = out_dir.is_dir()
        && smali_files(out_dir)
            .map(|files| !files.is_empty())
            .unwrap_or(false);
    if !found {
        return Err(DecompileError::NoSmaliProduced(out_dir.display().to_string()));
    }
    Ok(out_dir.to_path_buf())
}
