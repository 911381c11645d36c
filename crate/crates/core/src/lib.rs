//! Localizes malicious payloads in decompiled Android apps.
//!
//! Smali classes are screened per behavior by an LLM, flagged classes are
//! drilled down to the responsible methods, and the findings are scored
//! against ground truth or analyst verdicts.

pub mod behavior;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod response;
pub mod review;
pub mod smali;
