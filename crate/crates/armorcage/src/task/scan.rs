//! Recursive pattern scan with per-visit policy checks.

use regex::Regex;

use crate::engine::{AccessRequest, SubjectContext};
use crate::policy::ProfileSet;

use super::{expand_tilde, gate, RunMode, StepStop, TaskError, TaskReport};

/// Walks `root` recursively, checking read access on every directory and
/// file visited, and returns `(path, match)` pairs for lines matching
/// `regex`. Files larger than `size_cap` bytes are skipped before their
/// contents are considered. A denial on any visited path aborts the scan.
pub fn scan_pattern(
    root: &str,
    regex: &str,
    size_cap: u64,
    ctx: &SubjectContext,
    set: &ProfileSet,
) -> Result<Vec<(String, String)>, TaskError> {
    let mut report = TaskReport::default();
    scan_step(
        0,
        root,
        regex,
        size_cap,
        ctx,
        set,
        RunMode::Execute,
        &mut report,
    )
    .map_err(|stop| match stop {
        StepStop::Denied { path, missing } => TaskError::Io {
            operation: "scan",
            path,
            message: format!("denied (missing modes: {})", missing.canonical()),
        },
        StepStop::Failed(e) => e,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_step(
    index: usize,
    root: &str,
    regex: &str,
    size_cap: u64,
    ctx: &SubjectContext,
    set: &ProfileSet,
    mode: RunMode,
    report: &mut TaskReport,
) -> Result<Vec<(String, String)>, StepStop> {
    let compiled = Regex::new(regex).map_err(|e| {
        StepStop::Failed(TaskError::BadStep {
            step: index,
            message: format!("regex does not compile: {e}"),
        })
    })?;
    let root = expand_tilde(root);
    let mut matches = Vec::new();
    walk(
        index,
        &root,
        &compiled,
        size_cap,
        ctx,
        set,
        mode,
        report,
        &mut matches,
    )?;
    Ok(matches)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    index: usize,
    dir: &str,
    regex: &Regex,
    size_cap: u64,
    ctx: &SubjectContext,
    set: &ProfileSet,
    mode: RunMode,
    report: &mut TaskReport,
    matches: &mut Vec<(String, String)>,
) -> Result<(), StepStop> {
    let req = AccessRequest::list(dir)?;
    gate(index, &req, ctx, set, report)?;

    let entries = match std::fs::read_dir(&req.path) {
        Ok(entries) => entries,
        Err(e) => {
            return Err(StepStop::Failed(TaskError::Io {
                operation: "scan",
                path: req.path.clone(),
                message: e.to_string(),
            }));
        }
    };
    let mut names: Vec<(String, bool)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| {
            StepStop::Failed(TaskError::Io {
                operation: "scan",
                path: req.path.clone(),
                message: e.to_string(),
            })
        })?;
        let is_dir = entry.file_type().map(|t| t.is_dir()).unwrap_or(false);
        names.push((entry.file_name().to_string_lossy().into_owned(), is_dir));
    }
    names.sort();

    for (name, is_dir) in names {
        let child = format!("{}{name}", req.path);
        if is_dir {
            walk(
                index, &child, regex, size_cap, ctx, set, mode, report, matches,
            )?;
            continue;
        }
        let size = std::fs::metadata(&child).map(|m| m.len()).unwrap_or(0);
        if size > size_cap {
            continue;
        }
        let file_req = AccessRequest::read(&child)?;
        gate(index, &file_req, ctx, set, report)?;
        if mode == RunMode::Simulate {
            continue;
        }
        let content = match std::fs::read(&child) {
            Ok(content) => content,
            Err(e) => {
                return Err(StepStop::Failed(TaskError::Io {
                    operation: "scan",
                    path: child,
                    message: e.to_string(),
                }));
            }
        };
        let text = String::from_utf8_lossy(&content);
        for line in text.lines() {
            for found in regex.find_iter(line) {
                matches.push((child.clone(), found.as_str().to_string()));
            }
        }
    }
    Ok(())
}
