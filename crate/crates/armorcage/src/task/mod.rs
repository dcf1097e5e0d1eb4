//! A small scripted-workload interpreter. Scripts run inside a supervised
//! child (or in pure simulation), and every file or exec step consults the
//! policy engine before touching anything.
//!
//! The text form is line-oriented, one step per line, `#` comments:
//!
//! ```text
//! read <path>
//! write <path> <hex-bytes>
//! list <path>
//! exec <path> [args...]
//! alloc <bytes>
//! burn <seconds>
//! forkn <count>
//! sleep <seconds>
//! scan <root> <regex> <size-cap>
//! emit <hex-bytes>
//! ```
//!
//! Arguments containing whitespace can be double-quoted with `\"`, `\\`,
//! `\n` and `\t` escapes.

mod scan;

pub use scan::scan_pattern;

use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::audit::AuditRecord;
use crate::engine::{
    check_access, exec_transition, AccessRequest, Decision, EngineError, Operation, SubjectContext,
};
use crate::policy::{PathError, ProfileSet};

/// One step of a task script.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskStep {
    ReadFile(String),
    WriteFile(String, Vec<u8>),
    ListDir(String),
    Exec(String, Vec<String>),
    AllocBytes(u64),
    BurnCpu(f64),
    ForkN(u32),
    Sleep(f64),
    ScanPattern {
        root: String,
        regex: String,
        size_cap: u64,
    },
    Emit(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskScript {
    pub steps: Vec<TaskStep>,
}

impl TaskScript {
    pub fn new(steps: Vec<TaskStep>) -> Self {
        TaskScript { steps }
    }

    /// Validates every step's parameters before execution begins.
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.steps.is_empty() {
            return Err(TaskError::EmptyScript);
        }
        for (index, step) in self.steps.iter().enumerate() {
            match step {
                TaskStep::AllocBytes(0) => {
                    return Err(TaskError::BadStep {
                        step: index,
                        message: "alloc size must be positive".to_string(),
                    });
                }
                TaskStep::BurnCpu(s) | TaskStep::Sleep(s) if *s <= 0.0 => {
                    return Err(TaskError::BadStep {
                        step: index,
                        message: "duration must be positive".to_string(),
                    });
                }
                TaskStep::ForkN(0) => {
                    return Err(TaskError::BadStep {
                        step: index,
                        message: "fork count must be positive".to_string(),
                    });
                }
                TaskStep::ScanPattern { regex, .. } => {
                    regex::Regex::new(regex).map_err(|e| TaskError::BadStep {
                        step: index,
                        message: format!("regex does not compile: {e}"),
                    })?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Whether the script forks; the CLI refuses such tasks without an
    /// NPROC limit unless explicitly overridden.
    pub fn forks(&self) -> bool {
        self.steps.iter().any(|s| matches!(s, TaskStep::ForkN(_)))
    }

    /// Parses the line-oriented text form.
    pub fn parse(text: &str) -> Result<TaskScript, TaskError> {
        let mut steps = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let tokens = tokenize(line).map_err(|message| TaskError::BadScript {
                line: idx + 1,
                message,
            })?;
            if tokens.is_empty() {
                continue;
            }
            steps.push(parse_step(&tokens).map_err(|message| TaskError::BadScript {
                line: idx + 1,
                message,
            })?);
        }
        let script = TaskScript { steps };
        script.validate()?;
        Ok(script)
    }
}

impl fmt::Display for TaskScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for step in &self.steps {
            writeln!(f, "{step}")?;
        }
        Ok(())
    }
}

impl fmt::Display for TaskStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskStep::ReadFile(path) => write!(f, "read {}", quote(path)),
            TaskStep::WriteFile(path, bytes) => {
                write!(f, "write {} {}", quote(path), hex_encode(bytes))
            }
            TaskStep::ListDir(path) => write!(f, "list {}", quote(path)),
            TaskStep::Exec(path, args) => {
                write!(f, "exec {}", quote(path))?;
                for arg in args {
                    write!(f, " {}", quote(arg))?;
                }
                Ok(())
            }
            TaskStep::AllocBytes(n) => write!(f, "alloc {n}"),
            TaskStep::BurnCpu(s) => write!(f, "burn {s}"),
            TaskStep::ForkN(n) => write!(f, "forkn {n}"),
            TaskStep::Sleep(s) => write!(f, "sleep {s}"),
            TaskStep::ScanPattern {
                root,
                regex,
                size_cap,
            } => write!(f, "scan {} {} {size_cap}", quote(root), quote(regex)),
            TaskStep::Emit(bytes) => write!(f, "emit {}", hex_encode(bytes)),
        }
    }
}

fn parse_step(tokens: &[String]) -> Result<TaskStep, String> {
    let args = &tokens[1..];
    match (tokens[0].as_str(), args) {
        ("read", [path]) => Ok(TaskStep::ReadFile(path.clone())),
        ("write", [path, hex]) => Ok(TaskStep::WriteFile(path.clone(), hex_decode(hex)?)),
        ("list", [path]) => Ok(TaskStep::ListDir(path.clone())),
        ("exec", [path, rest @ ..]) => Ok(TaskStep::Exec(path.clone(), rest.to_vec())),
        ("alloc", [n]) => Ok(TaskStep::AllocBytes(
            n.parse().map_err(|_| format!("bad byte count '{n}'"))?,
        )),
        ("burn", [s]) => Ok(TaskStep::BurnCpu(
            s.parse().map_err(|_| format!("bad duration '{s}'"))?,
        )),
        ("forkn", [n]) => Ok(TaskStep::ForkN(
            n.parse().map_err(|_| format!("bad count '{n}'"))?,
        )),
        ("sleep", [s]) => Ok(TaskStep::Sleep(
            s.parse().map_err(|_| format!("bad duration '{s}'"))?,
        )),
        ("scan", [root, regex, cap]) => Ok(TaskStep::ScanPattern {
            root: root.clone(),
            regex: regex.clone(),
            size_cap: cap.parse().map_err(|_| format!("bad size cap '{cap}'"))?,
        }),
        ("emit", [hex]) => Ok(TaskStep::Emit(hex_decode(hex)?)),
        (verb, _) => Err(format!("unknown step or wrong arity: '{verb}'")),
    }
}

/// Returns the canned script for a named builtin workload.
pub fn builtin_fixture(name: &str) -> Result<TaskScript, TaskError> {
    let steps = match name {
        "read_syslog" => vec![TaskStep::ReadFile("/var/log/syslog".to_string())],
        "find_credit_cards" => vec![TaskStep::ScanPattern {
            root: "~/Documents".to_string(),
            regex: "([0-9]{4}[- ]){3}[0-9]{4}".to_string(),
            size_cap: 1_000_000,
        }],
        "memtest" => vec![TaskStep::AllocBytes(80 * 1024 * 1024)],
        "cputest" => vec![TaskStep::BurnCpu(30.0)],
        "forkbomb" => vec![TaskStep::ForkN(4096)],
        _ => return Err(TaskError::UnknownFixture(name.to_string())),
    };
    Ok(TaskScript { steps })
}

pub const FIXTURE_NAMES: [&str; 5] = [
    "read_syslog",
    "find_credit_cards",
    "memtest",
    "cputest",
    "forkbomb",
];

/// Whether steps take real effect or only produce decisions.
///
/// Simulation performs no writes, allocations, forks, sleeps or burns and
/// never opens file contents; it does walk directory trees for `scan` so
/// that the decision sequence matches an execute run over the same tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Execute,
    Simulate,
}

/// One policy decision made while running a script.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision {
    pub step: usize,
    pub operation: Operation,
    pub path: String,
    pub allowed: bool,
    pub effective: bool,
}

/// How a script run ended.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum TaskOutcome {
    #[default]
    Completed,
    /// Policy denial: the step index, the path, and what was missing.
    Denied {
        step: usize,
        path: String,
        missing: crate::policy::AccessModeSet,
    },
    Failed {
        step: usize,
        error: String,
    },
}

impl TaskOutcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, TaskOutcome::Completed)
    }
}

impl fmt::Display for TaskOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskOutcome::Completed => f.write_str("completed"),
            TaskOutcome::Denied {
                step,
                path,
                missing,
            } => write!(
                f,
                "denied at step {step}: {path} (missing modes: {})",
                missing.canonical()
            ),
            TaskOutcome::Failed { step, error } => write!(f, "failed at step {step}: {error}"),
        }
    }
}

/// Everything a run produced: the payload assembled by `emit` and `scan`,
/// the ordered decision log, and audit records for every denial observed
/// (complain-mode would-be denials included).
#[derive(Debug, Default)]
pub struct TaskReport {
    pub payload: Vec<u8>,
    pub decisions: Vec<StepDecision>,
    pub audit: Vec<AuditRecord>,
    pub outcome: TaskOutcome,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("script has no steps")]
    EmptyScript,
    #[error("script line {line}: {message}")]
    BadScript { line: usize, message: String },
    #[error("step {step}: {message}")]
    BadStep { step: usize, message: String },
    #[error("unknown fixture '{0}'")]
    UnknownFixture(String),
    #[error("{operation} {path}: {message}")]
    Io {
        operation: &'static str,
        path: String,
        message: String,
    },
    #[error("cannot allocate {bytes} bytes: {message}")]
    Alloc { bytes: u64, message: String },
    #[error("unable to fork, possible reason: {0}")]
    Fork(String),
    #[error("exec {path}: {message}")]
    Exec { path: String, message: String },
    #[error("{0}")]
    Engine(String),
    #[error("invalid path: {0}")]
    Path(#[from] PathError),
}

impl From<EngineError> for TaskError {
    fn from(e: EngineError) -> Self {
        TaskError::Engine(e.to_string())
    }
}

/// Runs a script under a subject context. File and exec steps normalize
/// their paths (after `~` expansion) and call the policy engine first; a
/// denial that is actually enforced aborts the run. Exec transitions apply
/// to all subsequent steps.
pub fn run_task(
    script: &TaskScript,
    ctx: &mut SubjectContext,
    set: &ProfileSet,
    mode: RunMode,
) -> TaskReport {
    let mut report = TaskReport::default();
    if let Err(error) = script.validate() {
        report.outcome = TaskOutcome::Failed {
            step: 0,
            error: error.to_string(),
        };
        return report;
    }
    for (index, step) in script.steps.iter().enumerate() {
        match run_step(index, step, ctx, set, mode, &mut report) {
            Ok(()) => {}
            Err(StepStop::Denied { path, missing }) => {
                report.outcome = TaskOutcome::Denied {
                    step: index,
                    path,
                    missing,
                };
                return report;
            }
            Err(StepStop::Failed(error)) => {
                report.outcome = TaskOutcome::Failed {
                    step: index,
                    error: error.to_string(),
                };
                return report;
            }
        }
    }
    report.outcome = TaskOutcome::Completed;
    report
}

pub(crate) enum StepStop {
    Denied {
        path: String,
        missing: crate::policy::AccessModeSet,
    },
    Failed(TaskError),
}

impl From<TaskError> for StepStop {
    fn from(e: TaskError) -> Self {
        StepStop::Failed(e)
    }
}

impl From<PathError> for StepStop {
    fn from(e: PathError) -> Self {
        StepStop::Failed(TaskError::Path(e))
    }
}

/// Records the decision for one request and tells the caller whether to
/// continue: an enforced denial stops the script.
pub(crate) fn gate(
    index: usize,
    req: &AccessRequest,
    ctx: &SubjectContext,
    set: &ProfileSet,
    report: &mut TaskReport,
) -> Result<Decision, StepStop> {
    let decision = check_access(ctx, set, req);
    report.decisions.push(StepDecision {
        step: index,
        operation: req.operation,
        path: req.path.clone(),
        allowed: decision.allowed,
        effective: decision.effective,
    });
    if let Some(record) = &decision.audit {
        report.audit.push(record.clone());
    }
    if !decision.effective {
        return Err(StepStop::Denied {
            path: req.path.clone(),
            missing: req.requested.missing_from(decision.granted),
        });
    }
    Ok(decision)
}

fn run_step(
    index: usize,
    step: &TaskStep,
    ctx: &mut SubjectContext,
    set: &ProfileSet,
    mode: RunMode,
    report: &mut TaskReport,
) -> Result<(), StepStop> {
    match step {
        TaskStep::ReadFile(raw) => {
            let path = expand_tilde(raw);
            let req = AccessRequest::read(&path)?;
            gate(index, &req, ctx, set, report)?;
            if mode == RunMode::Execute {
                std::fs::read(&req.path).map_err(|e| io_error("read", &req.path, e))?;
            }
            Ok(())
        }
        TaskStep::WriteFile(raw, bytes) => {
            let path = expand_tilde(raw);
            let req = AccessRequest::write(&path)?;
            gate(index, &req, ctx, set, report)?;
            if mode == RunMode::Execute {
                std::fs::write(&req.path, bytes).map_err(|e| io_error("write", &req.path, e))?;
            }
            Ok(())
        }
        TaskStep::ListDir(raw) => {
            let path = expand_tilde(raw);
            let req = AccessRequest::list(&path)?;
            gate(index, &req, ctx, set, report)?;
            if mode == RunMode::Execute {
                let entries =
                    std::fs::read_dir(&req.path).map_err(|e| io_error("list", &req.path, e))?;
                for entry in entries {
                    entry.map_err(|e| io_error("list", &req.path, e))?;
                }
            }
            Ok(())
        }
        TaskStep::Exec(raw, args) => {
            let path = expand_tilde(raw);
            let req = AccessRequest::exec(&path)?;
            gate(index, &req, ctx, set, report)?;
            exec_transition(ctx, set, &req.path).map_err(TaskError::from)?;
            if mode == RunMode::Execute {
                let status = std::process::Command::new(&req.path)
                    .args(args)
                    .status()
                    .map_err(|e| TaskError::Exec {
                        path: req.path.clone(),
                        message: e.to_string(),
                    })?;
                if !status.success() {
                    return Err(StepStop::Failed(TaskError::Exec {
                        path: req.path.clone(),
                        message: format!("exited with {status}"),
                    }));
                }
            }
            Ok(())
        }
        TaskStep::AllocBytes(n) => {
            if mode == RunMode::Execute {
                alloc_touch(*n).map_err(StepStop::Failed)?;
            }
            Ok(())
        }
        TaskStep::BurnCpu(seconds) => {
            if mode == RunMode::Execute {
                burn_cpu(*seconds);
            }
            Ok(())
        }
        TaskStep::ForkN(n) => {
            if mode == RunMode::Execute {
                fork_replicating(*n).map_err(StepStop::Failed)?;
            }
            Ok(())
        }
        TaskStep::Sleep(seconds) => {
            if mode == RunMode::Execute {
                std::thread::sleep(Duration::from_secs_f64(*seconds));
            }
            Ok(())
        }
        TaskStep::ScanPattern {
            root,
            regex,
            size_cap,
        } => {
            let matches = scan::scan_step(index, root, regex, *size_cap, ctx, set, mode, report)?;
            for (path, matched) in matches {
                report.payload.extend_from_slice(path.as_bytes());
                report.payload.extend_from_slice(b": ");
                report.payload.extend_from_slice(matched.as_bytes());
                report.payload.push(b'\n');
            }
            Ok(())
        }
        TaskStep::Emit(bytes) => {
            report.payload.extend_from_slice(bytes);
            Ok(())
        }
    }
}

fn io_error(operation: &'static str, path: &str, e: std::io::Error) -> StepStop {
    StepStop::Failed(TaskError::Io {
        operation,
        path: path.to_string(),
        message: e.to_string(),
    })
}

/// `~` expands to the effective user's home directory (falling back to
/// `$HOME`) before normalization.
pub fn expand_tilde(path: &str) -> String {
    if path != "~" && !path.starts_with("~/") {
        return path.to_string();
    }
    let home = effective_home().unwrap_or_else(|| "/".to_string());
    let home = home.trim_end_matches('/');
    if path == "~" {
        return if home.is_empty() {
            "/".to_string()
        } else {
            home.to_string()
        };
    }
    format!("{home}/{}", &path[2..])
}

fn effective_home() -> Option<String> {
    let euid = unsafe { libc::geteuid() };
    let mut buf = vec![0u8; 4096];
    let mut pwd: libc::passwd = unsafe { std::mem::zeroed() };
    let mut result: *mut libc::passwd = std::ptr::null_mut();
    let rc = unsafe {
        libc::getpwuid_r(
            euid,
            &mut pwd,
            buf.as_mut_ptr() as *mut libc::c_char,
            buf.len(),
            &mut result,
        )
    };
    if rc == 0 && !result.is_null() {
        let dir = unsafe { std::ffi::CStr::from_ptr(pwd.pw_dir) };
        if let Ok(s) = dir.to_str() {
            if !s.is_empty() {
                return Some(s.to_string());
            }
        }
    }
    std::env::var("HOME").ok()
}

/// Reserves and touches `n` bytes so the address-space limit actually
/// bites, then releases them.
fn alloc_touch(n: u64) -> Result<(), TaskError> {
    let size = usize::try_from(n).map_err(|_| TaskError::Alloc {
        bytes: n,
        message: "size exceeds address space".to_string(),
    })?;
    let mut buf: Vec<u8> = Vec::new();
    buf.try_reserve_exact(size).map_err(|e| TaskError::Alloc {
        bytes: n,
        message: e.to_string(),
    })?;
    buf.resize(size, 0);
    std::hint::black_box(&buf);
    Ok(())
}

fn cpu_seconds() -> f64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    ts.tv_sec as f64 + ts.tv_nsec as f64 / 1e9
}

/// Spins on arithmetic (no sleeping) until the process has consumed the
/// given amount of CPU time, so CPU limits rather than wall limits trigger.
fn burn_cpu(seconds: f64) {
    let start = cpu_seconds();
    let mut acc: u64 = 0x9e37_79b9_7f4a_7c15;
    while cpu_seconds() - start < seconds {
        for _ in 0..100_000 {
            acc = acc
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
        }
        std::hint::black_box(acc);
    }
}

/// The fork bomb: attempts up to `n` forks from this process; every child
/// enters an endless replicate loop and never exits. The first failed
/// attempt surfaces as an error, which is the observable containment signal
/// under an NPROC limit. Stray children are cleaned up by the supervisor's
/// process-group kill.
fn fork_replicating(n: u32) -> Result<(), TaskError> {
    for _ in 0..n {
        match unsafe { libc::fork() } {
            -1 => {
                let errno = std::io::Error::last_os_error();
                return Err(TaskError::Fork(errno.to_string()));
            }
            0 => replicate_forever(),
            _ => {}
        }
    }
    Ok(())
}

fn replicate_forever() -> ! {
    loop {
        match unsafe { libc::fork() } {
            -1 => {
                // At the cap: keep the pressure up without burning CPU.
                std::thread::sleep(Duration::from_millis(2));
            }
            0 => {}
            _ => {
                std::thread::sleep(Duration::from_millis(1));
            }
        }
    }
}

fn quote(s: &str) -> String {
    if !s.is_empty()
        && !s
            .chars()
            .any(|c| c.is_whitespace() || c == '"' || c == '\\' || c == '#')
    {
        return s.to_string();
    }
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Splits a script line into tokens, honoring double quotes and dropping
/// `#` comments.
fn tokenize(line: &str) -> Result<Vec<String>, String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut in_token = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '#' if !in_token => break,
            c if c.is_whitespace() => {
                if in_token {
                    tokens.push(std::mem::take(&mut current));
                    in_token = false;
                }
            }
            '"' => {
                in_token = true;
                loop {
                    match chars.next() {
                        None => return Err("unterminated quote".to_string()),
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some('n') => current.push('\n'),
                            Some('t') => current.push('\t'),
                            Some(other) => current.push(other),
                            None => return Err("dangling escape".to_string()),
                        },
                        Some(other) => current.push(other),
                    }
                }
            }
            c => {
                in_token = true;
                current.push(c);
            }
        }
    }
    if in_token {
        tokens.push(current);
    }
    Ok(tokens)
}

fn hex_encode(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn hex_decode(s: &str) -> Result<Vec<u8>, String> {
    if !s.len().is_multiple_of(2) {
        return Err(format!("odd-length hex string '{s}'"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| format!("bad hex byte in '{s}'")))
        .collect()
}
