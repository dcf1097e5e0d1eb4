//! Complain-mode audit log and rule suggestion.
//!
//! Records are one line each: tab-separated fields in the order timestamp,
//! profile, hat (`-` when absent), operation, path, requested modes,
//! decision, effective decision. [`parse_log`] is the inverse of
//! [`append_record`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

use crate::engine::{check_access, AccessRequest, Operation, SubjectContext};
use crate::policy::{compile_pattern, AccessModeSet, FileRule, ProfileSet, VariableTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Allowed,
    Denied,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Allowed => "allowed",
            Verdict::Denied => "denied",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "allowed" => Some(Verdict::Allowed),
            "denied" => Some(Verdict::Denied),
            _ => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One observed policy decision. Complain-mode denials carry
/// `decision: Denied, effective: Allowed`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRecord {
    pub timestamp: DateTime<Utc>,
    pub profile: String,
    pub hat: Option<String>,
    pub operation: Operation,
    pub path: String,
    pub requested: AccessModeSet,
    pub decision: Verdict,
    pub effective: Verdict,
}

impl AuditRecord {
    fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            self.timestamp.to_rfc3339_opts(SecondsFormat::Micros, true),
            self.profile,
            self.hat.as_deref().unwrap_or("-"),
            self.operation,
            self.path,
            self.requested.canonical(),
            self.decision,
            self.effective,
        )
    }
}

/// Appends exactly one line per record.
pub fn append_record(sink: &mut dyn Write, record: &AuditRecord) -> io::Result<()> {
    sink.write_all(record.line().as_bytes())
}

/// A log sink serialized behind a mutex so concurrent jobs produce intact
/// lines. File sinks open in append mode; each record is a single write.
pub struct AuditLog {
    inner: Mutex<Box<dyn Write + Send>>,
}

impl AuditLog {
    pub fn to_file(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog {
            inner: Mutex::new(Box::new(file)),
        })
    }

    pub fn to_writer(writer: Box<dyn Write + Send>) -> Self {
        AuditLog {
            inner: Mutex::new(writer),
        }
    }

    /// A sink on file descriptor 2. Writes through a duplicated raw fd
    /// rather than [`io::stderr`]: the process-wide stderr lock can be held
    /// by another thread at fork time, and a child inheriting it would
    /// deadlock.
    pub fn stderr() -> Self {
        let fd = unsafe { libc::dup(2) };
        let writer: Box<dyn Write + Send> = if fd >= 0 {
            Box::new(unsafe { <std::fs::File as std::os::fd::FromRawFd>::from_raw_fd(fd) })
        } else {
            Box::new(io::sink())
        };
        AuditLog {
            inner: Mutex::new(writer),
        }
    }

    pub fn append(&self, record: &AuditRecord) -> io::Result<()> {
        let mut sink = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        sink.write_all(record.line().as_bytes())?;
        sink.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogDiagnostic {
    pub line: usize,
    pub message: String,
}

/// Parses a log back into records. Malformed lines are reported with their
/// line number and parsing continues.
pub fn parse_log(text: &str) -> (Vec<AuditRecord>, Vec<LogDiagnostic>) {
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(record) => records.push(record),
            Err(message) => diagnostics.push(LogDiagnostic {
                line: idx + 1,
                message,
            }),
        }
    }
    (records, diagnostics)
}

fn parse_line(line: &str) -> Result<AuditRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let [ts, profile, hat, operation, path, requested, decision, effective] = fields.as_slice()
    else {
        return Err(format!(
            "expected 8 tab-separated fields, found {}",
            fields.len()
        ));
    };
    let timestamp = DateTime::parse_from_rfc3339(ts)
        .map_err(|e| format!("bad timestamp '{ts}': {e}"))?
        .with_timezone(&Utc);
    let operation = Operation::from_name(operation)
        .ok_or_else(|| format!("unknown operation '{operation}'"))?;
    let requested = AccessModeSet::parse(requested)
        .map_err(|e| format!("bad mode string '{requested}': {e}"))?;
    let decision =
        Verdict::from_name(decision).ok_or_else(|| format!("bad decision '{decision}'"))?;
    let effective =
        Verdict::from_name(effective).ok_or_else(|| format!("bad decision '{effective}'"))?;
    Ok(AuditRecord {
        timestamp,
        profile: profile.to_string(),
        hat: (*hat != "-").then(|| hat.to_string()),
        operation,
        path: path.to_string(),
        requested,
        decision,
        effective,
    })
}

/// A rule derived from observed denials: adding it to the named profile (or
/// hat) flips all supporting records to allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleSuggestion {
    pub profile: String,
    pub hat: Option<String>,
    pub rule: FileRule,
    pub evidence: usize,
}

impl fmt::Display for RuleSuggestion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let subject = match &self.hat {
            Some(hat) => format!("{}^{hat}", self.profile),
            None => self.profile.clone(),
        };
        write!(
            f,
            "{subject}: {} {},  # evidence: {}",
            self.rule.pattern.source(),
            self.rule.modes.canonical(),
            self.evidence
        )
    }
}

/// Groups denial records by subject and path and suggests one exact-path
/// rule per group carrying the union of the requested modes. Suggestions are
/// sorted by evidence descending, then path, then profile.
pub fn suggest_rules(records: &[AuditRecord], _set: &ProfileSet) -> Vec<RuleSuggestion> {
    let mut groups: BTreeMap<(String, Option<String>, String), (AccessModeSet, usize)> =
        BTreeMap::new();
    for record in records {
        if record.decision != Verdict::Denied {
            continue;
        }
        let key = (
            record.profile.clone(),
            record.hat.clone(),
            record.path.clone(),
        );
        let entry = groups.entry(key).or_insert((AccessModeSet::EMPTY, 0));
        entry.0 = entry.0.union(record.requested);
        entry.1 += 1;
    }
    let mut suggestions: Vec<RuleSuggestion> = groups
        .into_iter()
        .filter_map(|((profile, hat, path), (modes, evidence))| {
            let pattern = compile_pattern(&path, &VariableTable::new()).ok()?;
            Some(RuleSuggestion {
                profile,
                hat,
                rule: FileRule::new(pattern, modes),
                evidence,
            })
        })
        .collect();
    suggestions.sort_by(|a, b| {
        b.evidence
            .cmp(&a.evidence)
            .then_with(|| a.rule.pattern.source().cmp(b.rule.pattern.source()))
            .then_with(|| a.profile.cmp(&b.profile))
    });
    suggestions
}

/// Returns a copy of the set with every suggestion's rule appended to its
/// profile (or hat).
pub fn apply_suggestions(set: &ProfileSet, suggestions: &[RuleSuggestion]) -> ProfileSet {
    let mut out = set.clone();
    for suggestion in suggestions {
        let Some(profile) = out.get_mut(&suggestion.profile) else {
            continue;
        };
        match &suggestion.hat {
            Some(hat) => {
                if let Some(hat_profile) = profile.hats.get_mut(hat) {
                    hat_profile.rules.push(suggestion.rule.clone());
                }
            }
            None => profile.rules.push(suggestion.rule.clone()),
        }
    }
    out
}

/// Replays records against a set and counts how many would still be denied.
pub fn replay_denials(records: &[AuditRecord], set: &ProfileSet) -> usize {
    records
        .iter()
        .filter(|record| {
            let mut ctx = SubjectContext::unconfined();
            if crate::engine::change_profile(&mut ctx, set, &record.profile).is_err() {
                return false;
            }
            if let Some(hat) = &record.hat {
                if crate::engine::change_hat(
                    &mut ctx,
                    set,
                    hat,
                    crate::engine::MagicToken::from(0u64),
                )
                .is_err()
                {
                    return false;
                }
            }
            let request = AccessRequest {
                path: record.path.clone(),
                requested: record.requested,
                operation: record.operation,
            };
            !check_access(&ctx, set, &request).allowed
        })
        .count()
}

/// Optional post-pass (`--generalize`): when three or more suggestions
/// share a parent directory within one subject, collapse them into a single
/// `dir/*` rule with the union of their modes. Off by default; exact paths
/// are the primary output.
pub fn generalize(suggestions: Vec<RuleSuggestion>) -> Vec<RuleSuggestion> {
    let mut by_dir: BTreeMap<(String, Option<String>, String), Vec<usize>> = BTreeMap::new();
    for (i, s) in suggestions.iter().enumerate() {
        let source = s.rule.pattern.source();
        if let Some(slash) = source.rfind('/') {
            if slash > 0 {
                by_dir
                    .entry((
                        s.profile.clone(),
                        s.hat.clone(),
                        source[..slash].to_string(),
                    ))
                    .or_default()
                    .push(i);
            }
        }
    }
    let mut collapsed: Vec<RuleSuggestion> = Vec::new();
    let mut consumed = vec![false; suggestions.len()];
    for ((profile, hat, dir), members) in by_dir {
        if members.len() < 3 {
            continue;
        }
        let mut modes = AccessModeSet::EMPTY;
        let mut evidence = 0;
        for &i in &members {
            modes = modes.union(suggestions[i].rule.modes);
            evidence += suggestions[i].evidence;
            consumed[i] = true;
        }
        let pattern = format!("{dir}/*");
        if let Ok(compiled) = compile_pattern(&pattern, &VariableTable::new()) {
            collapsed.push(RuleSuggestion {
                profile,
                hat,
                rule: FileRule::new(compiled, modes),
                evidence,
            });
        }
    }
    let mut out: Vec<RuleSuggestion> = suggestions
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !consumed[*i])
        .map(|(_, s)| s)
        .collect();
    out.extend(collapsed);
    out.sort_by(|a, b| {
        b.evidence
            .cmp(&a.evidence)
            .then_with(|| a.rule.pattern.source().cmp(b.rule.pattern.source()))
            .then_with(|| a.profile.cmp(&b.profile))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_profiles, IncludeResolver};

    fn record(profile: &str, path: &str, modes: &str) -> AuditRecord {
        AuditRecord {
            timestamp: Utc::now(),
            profile: profile.to_string(),
            hat: None,
            operation: Operation::Read,
            path: path.to_string(),
            requested: AccessModeSet::parse(modes).unwrap(),
            decision: Verdict::Denied,
            effective: Verdict::Allowed,
        }
    }

    #[test]
    fn one_denial_one_parseable_line() {
        let mut sink = Vec::new();
        append_record(&mut sink, &record("p", "/etc/passwd", "r")).unwrap();
        let text = String::from_utf8(sink).unwrap();
        assert_eq!(text.lines().count(), 1);
        let (records, diagnostics) = parse_log(&text);
        assert!(diagnostics.is_empty());
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].path, "/etc/passwd");
    }

    #[test]
    fn absent_hat_renders_as_dash() {
        let mut sink = Vec::new();
        append_record(&mut sink, &record("p", "/x", "r")).unwrap();
        let text = String::from_utf8(sink).unwrap();
        assert_eq!(text.split('\t').nth(2), Some("-"));
        let (records, _) = parse_log(&text);
        assert_eq!(records[0].hat, None);
    }

    #[test]
    fn round_trip_random_records() {
        let mut sink = Vec::new();
        let mut originals = Vec::new();
        for i in 0..100 {
            let mut rec = record(&format!("p{}", i % 7), &format!("/d/f{i}"), "rw");
            if i % 3 == 0 {
                rec.hat = Some(format!("h{}", i % 2));
            }
            rec.operation = match i % 5 {
                0 => Operation::Read,
                1 => Operation::Write,
                2 => Operation::Mmap,
                3 => Operation::Exec,
                _ => Operation::List,
            };
            append_record(&mut sink, &rec).unwrap();
            originals.push(rec);
        }
        let (parsed, diagnostics) = parse_log(&String::from_utf8(sink).unwrap());
        assert!(diagnostics.is_empty());
        assert_eq!(parsed.len(), originals.len());
        for (a, b) in originals.iter().zip(&parsed) {
            assert_eq!(a.profile, b.profile);
            assert_eq!(a.hat, b.hat);
            assert_eq!(a.operation, b.operation);
            assert_eq!(a.path, b.path);
            assert_eq!(a.requested, b.requested);
            assert_eq!(a.decision, b.decision);
            assert_eq!(a.effective, b.effective);
            // Timestamps round-trip at microsecond precision.
            assert_eq!(
                a.timestamp.timestamp_micros(),
                b.timestamp.timestamp_micros()
            );
        }
    }

    #[test]
    fn concurrent_writers_produce_intact_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        let log = std::sync::Arc::new(AuditLog::to_file(&path).unwrap());
        let mut handles = Vec::new();
        for job in 0..8 {
            let log = log.clone();
            handles.push(std::thread::spawn(move || {
                for i in 0..125 {
                    log.append(&record(&format!("job{job}"), &format!("/f{i}"), "rw"))
                        .unwrap();
                }
            }));
        }
        for handle in handles {
            handle.join().unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let (records, diagnostics) = parse_log(&text);
        assert!(diagnostics.is_empty(), "{diagnostics:?}");
        assert_eq!(records.len(), 1000);
    }

    #[test]
    fn corrupted_middle_line_is_reported_and_skipped() {
        let mut sink = Vec::new();
        for i in 0..100 {
            append_record(&mut sink, &record("p", &format!("/f{i}"), "r")).unwrap();
        }
        let mut lines: Vec<String> = String::from_utf8(sink)
            .unwrap()
            .lines()
            .map(str::to_string)
            .collect();
        lines[49] = "garbage".to_string();
        let (records, diagnostics) = parse_log(&lines.join("\n"));
        assert_eq!(records.len(), 99);
        assert_eq!(diagnostics.len(), 1);
        assert_eq!(diagnostics[0].line, 50);
    }

    #[test]
    fn empty_input_yields_nothing() {
        let (records, diagnostics) = parse_log("");
        assert!(records.is_empty());
        assert!(diagnostics.is_empty());
    }

    #[test]
    fn suggestions_union_modes_per_path() {
        let set = ProfileSet::default();
        let records = vec![
            record("p", "/data/x", "r"),
            record("p", "/data/x", "w"),
            record("p", "/other", "r"),
        ];
        let suggestions = suggest_rules(&records, &set);
        assert_eq!(suggestions.len(), 2);
        // Two denials on /data/x dominate by evidence.
        assert_eq!(suggestions[0].rule.pattern.source(), "/data/x");
        assert_eq!(suggestions[0].rule.modes.canonical(), "rw");
        assert_eq!(suggestions[0].evidence, 2);
        assert_eq!(suggestions[1].evidence, 1);
    }

    #[test]
    fn suggestions_ignore_allowed_records() {
        let mut rec = record("p", "/x", "r");
        rec.decision = Verdict::Allowed;
        rec.effective = Verdict::Allowed;
        assert!(suggest_rules(&[rec], &ProfileSet::default()).is_empty());
        assert!(suggest_rules(&[], &ProfileSet::default()).is_empty());
    }

    #[test]
    fn suggestion_flips_its_evidence_to_allowed() {
        let text = "profile testprofile {\n        /etc/group r,\n}\n";
        let set = parse_profiles(text, "inline", &IncludeResolver::empty()).unwrap();
        let records = vec![record("testprofile", "/etc/passwd", "r")];
        assert_eq!(replay_denials(&records, &set), 1);
        let suggestions = suggest_rules(&records, &set);
        assert_eq!(suggestions.len(), 1);
        assert_eq!(suggestions[0].rule.pattern.source(), "/etc/passwd");
        assert_eq!(suggestions[0].rule.modes.canonical(), "r");
        let augmented = apply_suggestions(&set, &suggestions);
        assert_eq!(replay_denials(&records, &augmented), 0);
    }

    #[test]
    fn suggestions_use_exact_paths_without_globs() {
        let records = vec![record("p", "/deep/dir/file.txt", "rw")];
        let suggestions = suggest_rules(&records, &ProfileSet::default());
        let source = suggestions[0].rule.pattern.source();
        assert!(!source.contains('*'));
        assert!(!source.contains('{'));
        assert!(!source.contains('?'));
    }

    #[test]
    fn generalize_collapses_three_siblings() {
        let records = vec![
            record("p", "/data/a", "r"),
            record("p", "/data/b", "w"),
            record("p", "/data/c", "r"),
            record("p", "/elsewhere/d", "r"),
        ];
        let suggestions = suggest_rules(&records, &ProfileSet::default());
        let generalized = generalize(suggestions);
        assert_eq!(generalized.len(), 2);
        let collapsed = generalized
            .iter()
            .find(|s| s.rule.pattern.source() == "/data/*")
            .expect("siblings should collapse");
        assert_eq!(collapsed.rule.modes.canonical(), "rw");
        assert_eq!(collapsed.evidence, 3);
    }

    #[test]
    fn suggestions_are_stable() {
        let records = vec![
            record("b", "/x", "r"),
            record("a", "/x", "r"),
            record("a", "/y", "w"),
        ];
        let set = ProfileSet::default();
        let first = suggest_rules(&records, &set);
        let second = suggest_rules(&records, &set);
        assert_eq!(first, second);
    }
}
