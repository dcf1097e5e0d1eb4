//! Fork-based secure evaluation: run one job in an isolated child process
//! under a [`SandboxSpec`], with timeout termination and result transfer.
//! The parent's limits, identity, priority and confinement are untouched.
//!
//! Inside the child, spec application order is: resource limits (NPROC
//! deferred), gid, supplementary groups, uid, the NPROC limit (its
//! accounting is per-user, so it lands after the switch), priority, profile
//! entry, working directory, then the job. Profile entry comes last among
//! the privileged steps so profiles need not grant identity-change rights.
//!
//! Child exit protocol: 0 success (payload frame on the payload pipe), 64
//! setup failure, 65 policy denial, 66 task error, 70 internal panic —
//! details on the error pipe; signal deaths are reported via the wait
//! status. On timeout the whole process group gets SIGTERM, half a second
//! of grace, then SIGKILL.

mod channel;

pub use channel::{read_frame, write_frame, MAX_FRAME};

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::AuditLog;
use crate::engine::{change_profile, SubjectContext};
use crate::limits::{set_priority, set_rlimit_value, Identity, RlimitKind, RlimitValue};
use crate::policy::ProfileSet;
use crate::task::{run_task, RunMode, TaskScript};

const EXIT_SETUP: i32 = 64;
const EXIT_DENIED: i32 = 65;
const EXIT_TASK: i32 = 66;
const EXIT_PANIC: i32 = 70;

const TERM_GRACE: Duration = Duration::from_millis(500);
const POLL_INTERVAL: Duration = Duration::from_millis(2);

/// How profile confinement is enforced inside the child.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// Pick Native when the kernel MAC interface is present, otherwise
    /// Simulated.
    #[default]
    Auto,
    /// Write the kernel's change-profile attribute; file rules are enforced
    /// by the kernel for any code the child runs.
    Native,
    /// Enforce the profile in userspace via the policy engine. Only
    /// task-script jobs are mediated; native binaries run unconfined.
    Simulated,
}

impl Backend {
    pub fn resolve(self) -> Backend {
        match self {
            Backend::Auto => {
                if native_backend_available() {
                    Backend::Native
                } else {
                    Backend::Simulated
                }
            }
            other => other,
        }
    }
}

/// Whether the kernel exposes a usable MAC attribute interface.
pub fn native_backend_available() -> bool {
    let enabled = std::fs::read_to_string("/sys/module/apparmor/parameters/enabled")
        .map(|s| s.trim() == "Y")
        .unwrap_or(false);
    enabled
        && (Path::new("/proc/self/attr/apparmor/current").exists()
            || Path::new("/proc/self/attr/current").exists())
}

/// Everything to apply to the child before the job runs.
#[derive(Debug, Default)]
pub struct SandboxSpec {
    pub identity: Option<Identity>,
    pub priority: Option<i32>,
    pub rlimits: BTreeMap<RlimitKind, RlimitValue>,
    pub profile: Option<String>,
    pub timeout: Option<Duration>,
    pub workdir: Option<PathBuf>,
    /// Where the child appends audit records for policy denials.
    pub audit_log: Option<PathBuf>,
    pub backend: Backend,
}

impl SandboxSpec {
    pub fn new() -> Self {
        SandboxSpec::default()
    }

    pub fn with_rlimit(mut self, kind: RlimitKind, value: RlimitValue) -> Self {
        self.rlimits.insert(kind, value);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    pub fn with_profile(mut self, profile: &str) -> Self {
        self.profile = Some(profile.to_string());
        self
    }

    pub fn with_identity(mut self, identity: Identity) -> Self {
        self.identity = Some(identity);
        self
    }

    fn validate(&self, set: &ProfileSet) -> Result<(), SupervisorError> {
        if let Some(timeout) = self.timeout {
            if timeout.is_zero() {
                return Err(SupervisorError::InvalidSpec(
                    "timeout must be positive".to_string(),
                ));
            }
        }
        if let Some(profile) = &self.profile {
            if !set.contains(profile) {
                return Err(SupervisorError::UnknownProfile(profile.clone()));
            }
        }
        Ok(())
    }
}

/// The work to run inside the child.
pub enum Job {
    /// A task script interpreted by the policy-mediated runner.
    Task(TaskScript),
    /// A command (argv) executed with the spec applied; its stdout becomes
    /// the payload.
    Command(Vec<String>),
    /// An arbitrary closure; its bytes become the payload. This is the
    /// closest analog of evaluating an expression in the child.
    Callback(Box<dyn FnOnce() -> Result<Vec<u8>, String> + Send>),
}

impl Job {
    pub fn task(script: TaskScript) -> Job {
        Job::Task(script)
    }

    pub fn command<S: Into<String>>(argv: impl IntoIterator<Item = S>) -> Job {
        Job::Command(argv.into_iter().map(Into::into).collect())
    }

    pub fn callback(f: impl FnOnce() -> Result<Vec<u8>, String> + Send + 'static) -> Job {
        Job::Callback(Box::new(f))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "signal")]
pub enum EvalStatus {
    Ok,
    Timeout,
    LimitKilled(String),
    Denied,
    TaskError,
    SetupError,
}

/// Resource usage of the finished child (its waited descendants included).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Usage {
    pub cpu_seconds: f64,
    pub max_rss_bytes: u64,
}

/// Outcome of one supervised run.
#[derive(Debug)]
pub struct EvalResult {
    pub status: EvalStatus,
    pub payload: Vec<u8>,
    pub error: Option<String>,
    pub usage: Usage,
    pub duration: Duration,
}

impl EvalResult {
    pub fn is_ok(&self) -> bool {
        self.status == EvalStatus::Ok
    }

    pub fn to_json(&self) -> EvalResultJson {
        let (status, signal) = match &self.status {
            EvalStatus::Ok => ("ok", None),
            EvalStatus::Timeout => ("timeout", None),
            EvalStatus::LimitKilled(sig) => ("limit_killed", Some(sig.clone())),
            EvalStatus::Denied => ("denied", None),
            EvalStatus::TaskError => ("task_error", None),
            EvalStatus::SetupError => ("setup_error", None),
        };
        EvalResultJson {
            status: status.to_string(),
            signal,
            payload: String::from_utf8_lossy(&self.payload).into_owned(),
            payload_len: self.payload.len(),
            error: self.error.clone(),
            duration_secs: self.duration.as_secs_f64(),
            cpu_seconds: self.usage.cpu_seconds,
            max_rss_bytes: self.usage.max_rss_bytes,
        }
    }
}

/// The documented machine-readable result schema (`run --json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResultJson {
    pub status: String,
    pub signal: Option<String>,
    /// Payload decoded as UTF-8 (lossily); `payload_len` is the byte count.
    pub payload: String,
    pub payload_len: usize,
    pub error: Option<String>,
    pub duration_secs: f64,
    pub cpu_seconds: f64,
    pub max_rss_bytes: u64,
}

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error("unknown profile '{0}'")]
    UnknownProfile(String),
    #[error("invalid sandbox spec: {0}")]
    InvalidSpec(String),
    #[error("pipe creation failed: {0}")]
    Pipe(io::Error),
    #[error("fork failed: {0}")]
    Fork(io::Error),
    #[error("wait failed: {0}")]
    Wait(io::Error),
}

/// Runs jobs in supervised children against one immutable profile set.
/// Safe to share across threads; each eval owns its child exclusively.
pub struct Supervisor {
    set: Arc<ProfileSet>,
    backend: Backend,
    spawned: AtomicUsize,
    collected: AtomicUsize,
    /// Children forked but not yet waited (normally transient; an entry
    /// survives only if an eval was interrupted).
    strays: Mutex<Vec<libc::pid_t>>,
}

impl Supervisor {
    pub fn new(set: ProfileSet) -> Self {
        Supervisor::with_backend(set, Backend::Auto)
    }

    pub fn with_backend(set: ProfileSet, backend: Backend) -> Self {
        Supervisor {
            set: Arc::new(set),
            backend: backend.resolve(),
            spawned: AtomicUsize::new(0),
            collected: AtomicUsize::new(0),
            strays: Mutex::new(Vec::new()),
        }
    }

    pub fn profile_set(&self) -> &ProfileSet {
        &self.set
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Children forked so far.
    pub fn spawned(&self) -> usize {
        self.spawned.load(Ordering::SeqCst)
    }

    /// Collects any stray children and returns the total number of
    /// children reaped so far. Idempotent; after any completed
    /// `secure_eval` no zombie descendant remains.
    pub fn reap(&self) -> usize {
        let mut strays = self.strays.lock().unwrap_or_else(|e| e.into_inner());
        strays.retain(|&pid| {
            let mut status = 0;
            let rc = unsafe { libc::waitpid(pid, &mut status, libc::WNOHANG) };
            if rc == pid {
                self.collected.fetch_add(1, Ordering::SeqCst);
                false
            } else {
                rc == 0 // still running: keep; gone some other way: drop
            }
        });
        self.collected.load(Ordering::SeqCst)
    }

    /// Runs one job in a freshly forked child under `spec` and waits for
    /// it. Returns a structured result whatever happens to the child;
    /// errors are reserved for supervisor-side failures.
    pub fn secure_eval(&self, job: Job, spec: &SandboxSpec) -> Result<EvalResult, SupervisorError> {
        spec.validate(&self.set)?;
        let backend = match spec.backend {
            Backend::Auto => self.backend,
            other => other.resolve(),
        };

        let payload_pipe = channel::Pipe::new().map_err(SupervisorError::Pipe)?;
        let error_pipe = channel::Pipe::new().map_err(SupervisorError::Pipe)?;

        let start = Instant::now();
        let pid = unsafe { libc::fork() };
        if pid < 0 {
            return Err(SupervisorError::Fork(io::Error::last_os_error()));
        }
        if pid == 0 {
            // Child: never returns.
            let payload_w = payload_pipe.into_writer();
            let error_w = error_pipe.into_writer();
            child_main(job, spec, &self.set, backend, payload_w, error_w);
        }

        // Both sides set the process group to close the signalling race.
        unsafe { libc::setpgid(pid, pid) };
        self.spawned.fetch_add(1, Ordering::SeqCst);
        {
            let mut strays = self.strays.lock().unwrap_or_else(|e| e.into_inner());
            strays.push(pid);
        }

        let mut payload_r = payload_pipe.into_reader();
        let mut error_r = error_pipe.into_reader();
        let payload_thread =
            std::thread::spawn(move || read_frame(&mut payload_r).unwrap_or_default());
        let error_thread = std::thread::spawn(move || read_frame(&mut error_r).unwrap_or_default());

        let deadline = spec.timeout.map(|t| start + t);
        let mut timed_out = false;
        let mut grace_deadline: Option<Instant> = None;
        let mut status = 0i32;
        let mut rusage: libc::rusage = unsafe { std::mem::zeroed() };
        loop {
            let rc = unsafe { libc::wait4(pid, &mut status, libc::WNOHANG, &mut rusage) };
            if rc == pid {
                break;
            }
            if rc < 0 {
                let err = io::Error::last_os_error();
                if err.kind() != io::ErrorKind::Interrupted {
                    self.forget(pid);
                    return Err(SupervisorError::Wait(err));
                }
            }
            let now = Instant::now();
            if let Some(d) = deadline {
                if now >= d && !timed_out {
                    timed_out = true;
                    unsafe { libc::kill(-pid, libc::SIGTERM) };
                    grace_deadline = Some(now + TERM_GRACE);
                }
            }
            if let Some(g) = grace_deadline {
                if now >= g {
                    unsafe { libc::kill(-pid, libc::SIGKILL) };
                }
            }
            std::thread::sleep(POLL_INTERVAL);
        }
        self.collected.fetch_add(1, Ordering::SeqCst);
        self.forget(pid);
        // The job may have left descendants (its own forks); the group dies
        // with it regardless of how the child exited. The pipes reach EOF
        // only once every inherited write end is gone, so keep re-killing
        // the group until the readers finish (a descendant mid-fork can
        // race one round of the group signal).
        unsafe { libc::kill(-pid, libc::SIGKILL) };
        while !payload_thread.is_finished() || !error_thread.is_finished() {
            std::thread::sleep(POLL_INTERVAL);
            unsafe { libc::kill(-pid, libc::SIGKILL) };
        }
        let payload = payload_thread.join().unwrap_or_default();
        let error_frame = error_thread.join().unwrap_or_default();
        let duration = start.elapsed();
        let usage = Usage {
            cpu_seconds: timeval_secs(rusage.ru_utime) + timeval_secs(rusage.ru_stime),
            max_rss_bytes: (rusage.ru_maxrss.max(0) as u64) * 1024,
        };
        let error_text = error_frame.map(|b| String::from_utf8_lossy(&b).into_owned());

        let result = if timed_out && libc::WIFSIGNALED(status) {
            EvalResult {
                status: EvalStatus::Timeout,
                payload: Vec::new(),
                error: error_text,
                usage,
                duration,
            }
        } else if libc::WIFSIGNALED(status) {
            let signal = libc::WTERMSIG(status);
            EvalResult {
                status: EvalStatus::LimitKilled(signal_name(signal)),
                payload: payload.unwrap_or_default(),
                error: error_text,
                usage,
                duration,
            }
        } else {
            let code = libc::WEXITSTATUS(status);
            match code {
                0 => match payload {
                    Some(payload) => EvalResult {
                        status: EvalStatus::Ok,
                        payload,
                        error: None,
                        usage,
                        duration,
                    },
                    None => EvalResult {
                        status: EvalStatus::TaskError,
                        payload: Vec::new(),
                        error: Some("child exited without a payload frame".to_string()),
                        usage,
                        duration,
                    },
                },
                EXIT_SETUP => EvalResult {
                    status: EvalStatus::SetupError,
                    payload: Vec::new(),
                    error: error_text,
                    usage,
                    duration,
                },
                EXIT_DENIED => EvalResult {
                    status: EvalStatus::Denied,
                    payload: Vec::new(),
                    error: error_text,
                    usage,
                    duration,
                },
                EXIT_TASK | EXIT_PANIC => EvalResult {
                    status: EvalStatus::TaskError,
                    payload: Vec::new(),
                    error: error_text,
                    usage,
                    duration,
                },
                other => EvalResult {
                    status: EvalStatus::TaskError,
                    payload: Vec::new(),
                    error: Some(
                        error_text.unwrap_or_else(|| format!("child exited with code {other}")),
                    ),
                    usage,
                    duration,
                },
            }
        };
        Ok(result)
    }

    fn forget(&self, pid: libc::pid_t) {
        let mut strays = self.strays.lock().unwrap_or_else(|e| e.into_inner());
        strays.retain(|&p| p != pid);
    }
}

fn timeval_secs(tv: libc::timeval) -> f64 {
    tv.tv_sec as f64 + tv.tv_usec as f64 / 1e6
}

fn signal_name(signal: i32) -> String {
    match signal {
        libc::SIGHUP => "SIGHUP".to_string(),
        libc::SIGINT => "SIGINT".to_string(),
        libc::SIGQUIT => "SIGQUIT".to_string(),
        libc::SIGILL => "SIGILL".to_string(),
        libc::SIGABRT => "SIGABRT".to_string(),
        libc::SIGBUS => "SIGBUS".to_string(),
        libc::SIGFPE => "SIGFPE".to_string(),
        libc::SIGKILL => "SIGKILL".to_string(),
        libc::SIGSEGV => "SIGSEGV".to_string(),
        libc::SIGPIPE => "SIGPIPE".to_string(),
        libc::SIGALRM => "SIGALRM".to_string(),
        libc::SIGTERM => "SIGTERM".to_string(),
        libc::SIGXCPU => "SIGXCPU".to_string(),
        libc::SIGXFSZ => "SIGXFSZ".to_string(),
        other => format!("SIG{other}"),
    }
}

// ---------------------------------------------------------------------------
// Child side.
// ---------------------------------------------------------------------------

fn child_main(
    job: Job,
    spec: &SandboxSpec,
    set: &ProfileSet,
    backend: Backend,
    mut payload_w: std::fs::File,
    mut error_w: std::fs::File,
) -> ! {
    unsafe { libc::setpgid(0, 0) };
    // The default panic hook prints through the process-wide stderr lock,
    // which another thread of the parent may have held at fork time;
    // replace it so a panicking child cannot deadlock. The panic payload
    // still reaches the parent through the error frame.
    std::panic::set_hook(Box::new(|_| {}));

    if let Err((step, message)) = apply_spec(spec, backend, set) {
        let _ = write_frame(&mut error_w, format!("{step}: {message}").as_bytes());
        unsafe { libc::_exit(EXIT_SETUP) };
    }

    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        run_job(job, spec, set, backend)
    }));
    let code = match outcome {
        Ok(JobResult::Success(payload)) => {
            if write_frame(&mut payload_w, &payload).is_err() {
                EXIT_TASK
            } else {
                0
            }
        }
        Ok(JobResult::Denied(report)) => {
            let _ = write_frame(&mut error_w, report.as_bytes());
            EXIT_DENIED
        }
        Ok(JobResult::Failed(message)) => {
            let _ = write_frame(&mut error_w, message.as_bytes());
            EXIT_TASK
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            let _ = write_frame(&mut error_w, format!("panic: {message}").as_bytes());
            EXIT_PANIC
        }
    };
    unsafe { libc::_exit(code) };
}

enum JobResult {
    Success(Vec<u8>),
    Denied(String),
    Failed(String),
}

/// Applies the spec in order; the failing step is named in the error.
fn apply_spec(
    spec: &SandboxSpec,
    backend: Backend,
    _set: &ProfileSet,
) -> Result<(), (String, String)> {
    for (kind, value) in &spec.rlimits {
        if *kind == RlimitKind::Nproc {
            continue;
        }
        set_rlimit_value(*kind, *value, None)
            .map_err(|e| (format!("rlimit {kind}"), e.to_string()))?;
    }
    if let Some(identity) = &spec.identity {
        crate::limits::set_identity(identity)
            .map_err(|e| ("identity".to_string(), e.to_string()))?;
    }
    if let Some(value) = spec.rlimits.get(&RlimitKind::Nproc) {
        set_rlimit_value(RlimitKind::Nproc, *value, None)
            .map_err(|e| ("rlimit NPROC".to_string(), e.to_string()))?;
    }
    if let Some(nice) = spec.priority {
        set_priority(nice).map_err(|e| ("priority".to_string(), e.to_string()))?;
    }
    if let Some(profile) = &spec.profile {
        if backend == Backend::Native {
            enter_profile_native(profile).map_err(|e| ("profile".to_string(), e.to_string()))?;
        }
        // Simulated confinement is established per-job in run_job.
    }
    if let Some(dir) = &spec.workdir {
        std::env::set_current_dir(dir).map_err(|e| ("workdir".to_string(), e.to_string()))?;
    }
    Ok(())
}

/// Writes the kernel's change-profile attribute, confining this process
/// and everything it executes.
fn enter_profile_native(profile: &str) -> io::Result<()> {
    let payload = format!("changeprofile {profile}");
    for path in [
        "/proc/self/attr/apparmor/current",
        "/proc/self/attr/current",
    ] {
        if Path::new(path).exists() {
            let mut file = std::fs::OpenOptions::new().write(true).open(path)?;
            file.write_all(payload.as_bytes())?;
            return Ok(());
        }
    }
    Err(io::Error::new(
        io::ErrorKind::NotFound,
        "no kernel MAC attribute interface",
    ))
}

fn run_job(job: Job, spec: &SandboxSpec, set: &ProfileSet, backend: Backend) -> JobResult {
    match job {
        Job::Task(script) => {
            let mut ctx = SubjectContext::unconfined();
            if backend == Backend::Simulated {
                if let Some(profile) = &spec.profile {
                    if let Err(e) = change_profile(&mut ctx, set, profile) {
                        return JobResult::Failed(format!("profile entry: {e}"));
                    }
                }
            }
            let report = run_task(&script, &mut ctx, set, RunMode::Execute);
            if !report.audit.is_empty() {
                // File sink when configured, standard error otherwise.
                let log = match &spec.audit_log {
                    Some(path) => AuditLog::to_file(path).ok(),
                    None => Some(AuditLog::stderr()),
                };
                if let Some(log) = log {
                    for record in &report.audit {
                        let _ = log.append(record);
                    }
                }
            }
            match report.outcome {
                crate::task::TaskOutcome::Completed => JobResult::Success(report.payload),
                denied @ crate::task::TaskOutcome::Denied { .. } => {
                    JobResult::Denied(denied.to_string())
                }
                failed @ crate::task::TaskOutcome::Failed { .. } => {
                    JobResult::Failed(failed.to_string())
                }
            }
        }
        Job::Command(argv) => {
            let Some((program, args)) = argv.split_first() else {
                return JobResult::Failed("empty command".to_string());
            };
            match std::process::Command::new(program).args(args).output() {
                Ok(output) if output.status.success() => JobResult::Success(output.stdout),
                Ok(output) => JobResult::Failed(format!(
                    "command exited with {}: {}",
                    output.status,
                    String::from_utf8_lossy(&output.stderr)
                )),
                Err(e) => JobResult::Failed(format!("spawn {program}: {e}")),
            }
        }
        Job::Callback(f) => match f() {
            Ok(payload) => JobResult::Success(payload),
            Err(message) => JobResult::Failed(message),
        },
    }
}
