//! armorcage command-line interface.
//!
//! Subcommands: `run` (supervised execution), `check` (one access
//! decision), `simulate` (dry-run a task script), `lint`, `logprof`
//! (rule suggestions from an audit log), `limits` and `sanitize`.
//!
//! Exit codes for `run`: 0 ok, 10 policy denial, 11 timeout, 12 limit
//! killed, 13 task error, 64 setup error. `check` exits 0 allowed / 10
//! denied. The analysis commands exit 0 clean, 1 findings. Usage errors
//! exit 2 everywhere.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use armorcage::audit::{generalize, parse_log, suggest_rules};
use armorcage::engine::{check_access, AccessRequest, Operation, SubjectContext};
use armorcage::limits::{get_rlimit, IdSpec, Identity, Limit, RlimitKind, RlimitValue};
use armorcage::parser::{
    lint_profiles, load_profile_dirs, serialize_rule, ParseOptions, ParseWarning,
};
use armorcage::policy::{normalize_path, AccessModeSet, ProfileSet};
use armorcage::sanitize::sanitize_identifier;
use armorcage::supervisor::{Backend, EvalStatus, Job, SandboxSpec, Supervisor};
use armorcage::task::{builtin_fixture, run_task, RunMode, TaskScript, FIXTURE_NAMES};

const EXIT_DENIED: u8 = 10;
const EXIT_TIMEOUT: u8 = 11;
const EXIT_LIMIT_KILLED: u8 = 12;
const EXIT_TASK_ERROR: u8 = 13;
const EXIT_SETUP_ERROR: u8 = 64;
const EXIT_FINDINGS: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "armorcage", version, about = "Sandboxed execution toolkit")]
struct Cli {
    /// Directory searched for profiles and includes (repeatable). Defaults
    /// to $ARMORCAGE_PROFILE_PATH, then ./profiles and /etc/apparmor.d.
    #[arg(long = "profile-root", global = true)]
    profile_root: Vec<PathBuf>,

    /// Audit log file for policy denials; $ARMORCAGE_AUDIT_LOG is the
    /// fallback, standard error the default.
    #[arg(long, global = true)]
    audit_log: Option<PathBuf>,

    /// Profile enforcement backend.
    #[arg(long, global = true, value_enum, default_value_t = BackendArg::Auto)]
    backend: BackendArg,

    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Auto,
    Native,
    Simulated,
}

impl From<BackendArg> for Backend {
    fn from(arg: BackendArg) -> Backend {
        match arg {
            BackendArg::Auto => Backend::Auto,
            BackendArg::Native => Backend::Native,
            BackendArg::Simulated => Backend::Simulated,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a task or command in a supervised sandboxed child.
    Run(RunArgs),
    /// Decide one access request against a loaded profile.
    Check {
        profile: String,
        /// Absolute path; @{VAR} expands from the environment.
        path: String,
        /// Mode string, e.g. r, rw, rix.
        modes: String,
    },
    /// Parse profiles leniently and report policy hazards.
    Lint {
        /// Profile files (defaults to everything under the profile roots).
        files: Vec<PathBuf>,
    },
    /// Suggest profile rules from an audit log of denials.
    Logprof {
        /// Audit log file.
        log: PathBuf,
        /// Collapse three or more sibling suggestions into a dir/* rule.
        #[arg(long)]
        generalize: bool,
    },
    /// Print the current resource limits as a table.
    Limits,
    /// Dry-run a task script, printing each policy decision.
    Simulate {
        #[arg(long)]
        profile: Option<String>,
        /// Builtin fixture name or script file.
        #[arg(long)]
        task: String,
    },
    /// Strip everything outside [a-zA-Z0-9] from the input.
    Sanitize { input: String },
}

#[derive(Args)]
struct RunArgs {
    /// Confine the child with this profile.
    #[arg(long)]
    profile: Option<String>,
    /// Run the child as this user (name or uid).
    #[arg(long)]
    uid: Option<String>,
    /// Run the child under this group (name or gid).
    #[arg(long)]
    gid: Option<String>,
    /// Niceness for the child, -20..=19.
    #[arg(long)]
    priority: Option<i32>,
    /// Resource limit KIND=SOFT[:HARD]; byte kinds accept K/M/G suffixes.
    /// Repeatable.
    #[arg(long = "rlimit")]
    rlimits: Vec<String>,
    /// Kill the child after this many seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// Builtin fixture name or task script file.
    #[arg(long)]
    task: Option<String>,
    /// Working directory for the child.
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Print the result as JSON.
    #[arg(long)]
    json: bool,
    /// Run this many identical jobs concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Allow fork-heavy tasks without an NPROC limit.
    #[arg(long)]
    dangerous: bool,
    /// Command to execute instead of a task.
    #[arg(last = true)]
    command: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

/// `Err` means a usage error (exit 2); anything with a dedicated exit code
/// is an `Ok` value.
fn dispatch(cli: Cli) -> Result<u8, String> {
    let roots = profile_roots(&cli.profile_root);
    let audit_log = cli
        .audit_log
        .clone()
        .or_else(|| std::env::var_os("ARMORCAGE_AUDIT_LOG").map(PathBuf::from));
    let backend: Backend = cli.backend.into();
    match cli.command {
        Command::Run(args) => cmd_run(args, &roots, audit_log, backend),
        Command::Check {
            profile,
            path,
            modes,
        } => cmd_check(&profile, &path, &modes, &roots),
        Command::Lint { files } => cmd_lint(&files, &roots),
        Command::Logprof { log, generalize } => cmd_logprof(&log, generalize, &roots),
        Command::Limits => cmd_limits(),
        Command::Simulate { profile, task } => cmd_simulate(profile.as_deref(), &task, &roots),
        Command::Sanitize { input } => {
            println!("{}", sanitize_identifier(&input));
            Ok(0)
        }
    }
}

/// Flag roots win; then the environment; then ./profiles and the system
/// directory, keeping only those that exist.
fn profile_roots(flag_roots: &[PathBuf]) -> Vec<PathBuf> {
    if !flag_roots.is_empty() {
        return flag_roots.to_vec();
    }
    if let Some(env) = std::env::var_os("ARMORCAGE_PROFILE_PATH") {
        let roots: Vec<PathBuf> = std::env::split_paths(&env).collect();
        if !roots.is_empty() {
            return roots;
        }
    }
    [
        PathBuf::from("./profiles"),
        PathBuf::from("/etc/apparmor.d"),
    ]
    .into_iter()
    .filter(|p| p.is_dir())
    .collect()
}

fn load_set(
    roots: &[PathBuf],
    strict_includes: bool,
) -> Result<(ProfileSet, Vec<ParseWarning>), String> {
    load_profile_dirs(roots, ParseOptions { strict_includes }).map_err(|e| e.to_string())
}

fn parse_task(name_or_path: &str) -> Result<TaskScript, String> {
    if FIXTURE_NAMES.contains(&name_or_path) {
        return builtin_fixture(name_or_path).map_err(|e| e.to_string());
    }
    let text = std::fs::read_to_string(name_or_path)
        .map_err(|e| format!("cannot read task '{name_or_path}': {e}"))?;
    TaskScript::parse(&text).map_err(|e| e.to_string())
}

fn parse_rlimit_flag(flag: &str) -> Result<(RlimitKind, RlimitValue), String> {
    let (kind_str, values) = flag
        .split_once('=')
        .ok_or_else(|| format!("--rlimit expects KIND=SOFT[:HARD], got '{flag}'"))?;
    let kind = RlimitKind::from_name(kind_str)
        .ok_or_else(|| format!("unknown rlimit kind '{kind_str}'"))?;
    let value = match values.split_once(':') {
        Some((soft, hard)) => RlimitValue::new(
            Limit::parse(soft, kind.unit()).map_err(|e| e.to_string())?,
            Limit::parse(hard, kind.unit()).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?,
        None => RlimitValue::both(Limit::parse(values, kind.unit()).map_err(|e| e.to_string())?),
    };
    Ok((kind, value))
}

fn cmd_run(
    args: RunArgs,
    roots: &[PathBuf],
    audit_log: Option<PathBuf>,
    backend: Backend,
) -> Result<u8, String> {
    let script = match (&args.task, args.command.is_empty()) {
        (Some(task), true) => Some(parse_task(task)?),
        (None, false) => None,
        (Some(_), false) => return Err("give either --task or a command, not both".to_string()),
        (None, true) => return Err("nothing to run: give --task NAME or -- CMD ARGS".to_string()),
    };

    let mut spec = SandboxSpec::new();
    spec.backend = backend;
    spec.audit_log = audit_log;
    spec.profile = args.profile.clone();
    spec.priority = args.priority;
    spec.workdir = args.workdir.clone();
    if let Some(secs) = args.timeout {
        if secs <= 0.0 {
            return Err("--timeout must be positive".to_string());
        }
        spec.timeout = Some(Duration::from_secs_f64(secs));
    }
    for flag in &args.rlimits {
        let (kind, value) = parse_rlimit_flag(flag)?;
        spec.rlimits.insert(kind, value);
    }
    match (&args.uid, &args.gid) {
        (None, None) => {}
        (uid, gid) => {
            let current = armorcage::limits::current_identity();
            spec.identity = Some(Identity {
                uid: uid.as_deref().map(IdSpec::parse).unwrap_or(current.uid),
                gid: gid.as_deref().map(IdSpec::parse).unwrap_or(current.gid),
            });
        }
    }

    if let Some(script) = &script {
        if script.forks() && !args.dangerous && !spec.rlimits.contains_key(&RlimitKind::Nproc) {
            return Err(
                "task forks: set --rlimit NPROC=... or pass --dangerous to run unbounded"
                    .to_string(),
            );
        }
    }

    // Profiles are only required when one is named; a missing or empty
    // root set surfaces as a setup error below, not a usage error.
    let set = match load_set(roots, true) {
        Ok((set, _)) => set,
        Err(message) => {
            if args.profile.is_some() {
                eprintln!("setup error: {message}");
                return Ok(EXIT_SETUP_ERROR);
            }
            ProfileSet::default()
        }
    };

    let supervisor = Arc::new(Supervisor::with_backend(set, backend));
    let jobs = args.jobs.max(1);
    let mut results = Vec::new();
    if jobs == 1 {
        let job = make_job(&script, &args.command);
        match supervisor.secure_eval(job, &spec) {
            Ok(result) => results.push(result),
            Err(e) => {
                eprintln!("setup error: {e}");
                return Ok(EXIT_SETUP_ERROR);
            }
        }
    } else {
        let spec = Arc::new(spec);
        let mut handles = Vec::new();
        for _ in 0..jobs {
            let supervisor = supervisor.clone();
            let spec = spec.clone();
            let script = script.clone();
            let command = args.command.clone();
            handles.push(std::thread::spawn(move || {
                supervisor.secure_eval(make_job(&script, &command), &spec)
            }));
        }
        for handle in handles {
            match handle.join().map_err(|_| "worker panicked".to_string())? {
                Ok(result) => results.push(result),
                Err(e) => {
                    eprintln!("setup error: {e}");
                    return Ok(EXIT_SETUP_ERROR);
                }
            }
        }
        supervisor.reap();
    }

    let mut worst = 0u8;
    for result in &results {
        let code = print_result(result, args.json);
        worst = worst.max(code);
    }
    Ok(worst)
}

fn make_job(script: &Option<TaskScript>, command: &[String]) -> Job {
    match script {
        Some(script) => Job::task(script.clone()),
        None => Job::command(command.iter().cloned()),
    }
}

fn print_result(result: &armorcage::supervisor::EvalResult, json: bool) -> u8 {
    if json {
        println!(
            "{}",
            serde_json::to_string(&result.to_json()).expect("result serializes")
        );
    } else {
        use std::io::Write;
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        if !result.payload.is_empty() {
            let _ = out.write_all(&result.payload);
            if !result.payload.ends_with(b"\n") {
                let _ = out.write_all(b"\n");
            }
        }
        let mut summary = format!(
            "status={} duration={:.3}s cpu={:.3}s max_rss={}B payload={}B",
            status_label(&result.status),
            result.duration.as_secs_f64(),
            result.usage.cpu_seconds,
            result.usage.max_rss_bytes,
            result.payload.len(),
        );
        if let Some(error) = &result.error {
            summary.push_str(&format!(" error={error:?}"));
        }
        let _ = writeln!(out, "{summary}");
    }
    match result.status {
        EvalStatus::Ok => 0,
        EvalStatus::Denied => EXIT_DENIED,
        EvalStatus::Timeout => EXIT_TIMEOUT,
        EvalStatus::LimitKilled(_) => EXIT_LIMIT_KILLED,
        EvalStatus::TaskError => EXIT_TASK_ERROR,
        EvalStatus::SetupError => EXIT_SETUP_ERROR,
    }
}

fn status_label(status: &EvalStatus) -> String {
    match status {
        EvalStatus::Ok => "ok".to_string(),
        EvalStatus::Timeout => "timeout".to_string(),
        EvalStatus::LimitKilled(signal) => format!("limit_killed({signal})"),
        EvalStatus::Denied => "denied".to_string(),
        EvalStatus::TaskError => "task_error".to_string(),
        EvalStatus::SetupError => "setup_error".to_string(),
    }
}

fn cmd_check(profile: &str, path: &str, modes: &str, roots: &[PathBuf]) -> Result<u8, String> {
    let (set, _) = load_set(roots, true)?;
    if !set.contains(profile) {
        return Err(format!("unknown profile '{profile}'"));
    }
    let requested = AccessModeSet::parse(modes).map_err(|e| e.to_string())?;
    let expanded = expand_env_vars(path)?;
    let normalized = normalize_path(&expanded).map_err(|e| e.to_string())?;
    let operation = if normalized.ends_with('/') {
        Operation::List
    } else if requested.has_exec() {
        Operation::Exec
    } else if requested.has_write() {
        Operation::Write
    } else if requested.has_mmap() {
        Operation::Mmap
    } else {
        Operation::Read
    };
    let request = AccessRequest {
        path: normalized.clone(),
        requested,
        operation,
    };
    let ctx = SubjectContext::for_profile(&set, profile).map_err(|e| e.to_string())?;
    let decision = check_access(&ctx, &set, &request);
    if decision.allowed {
        println!("allowed: {profile} {normalized} {}", requested.canonical());
    } else {
        println!(
            "denied: {profile} {normalized} {} (granted: {})",
            requested.canonical(),
            decision.granted.canonical()
        );
    }
    for rule_ref in &decision.matched {
        if let Some(p) = set.get(&rule_ref.profile) {
            let rules = match &rule_ref.hat {
                Some(hat) => p.hats.get(hat).map(|h| &h.rules),
                None => Some(&p.rules),
            };
            if let Some(rules) = rules {
                if let Some(rule) = rules.get(rule_ref.index) {
                    println!("  matched: {}", serialize_rule(rule));
                }
            }
        }
    }
    Ok(if decision.allowed { 0 } else { EXIT_DENIED })
}

/// Expands `@{NAME}` from the process environment, for paths given on the
/// command line (profile patterns expand from tunables instead).
fn expand_env_vars(path: &str) -> Result<String, String> {
    let mut out = String::new();
    let mut rest = path;
    while let Some(start) = rest.find("@{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| format!("unterminated variable in '{path}'"))?;
        let name = &after[..end];
        let value =
            std::env::var(name).map_err(|_| format!("environment variable '{name}' not set"))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn cmd_lint(files: &[PathBuf], roots: &[PathBuf]) -> Result<u8, String> {
    let options = ParseOptions {
        strict_includes: false,
    };
    let (set, warnings) = if files.is_empty() {
        load_profile_dirs(roots, options).map_err(|e| e.to_string())?
    } else {
        let resolver = armorcage::parser::IncludeResolver::new(roots.to_vec());
        let mut set = ProfileSet::default();
        let mut warnings = Vec::new();
        for file in files {
            let (parsed, mut warn) = armorcage::parser::load_profile_file(file, &resolver, options)
                .map_err(|e| e.to_string())?;
            warnings.append(&mut warn);
            set.merge(parsed).map_err(|e| e.to_string())?;
        }
        (set, warnings)
    };
    let mut findings = 0;
    for warning in &warnings {
        println!("warning: {warning}");
        findings += 1;
    }
    for diagnostic in lint_profiles(&set) {
        println!("warning: {diagnostic}");
        findings += 1;
    }
    Ok(if findings > 0 { EXIT_FINDINGS } else { 0 })
}

fn cmd_logprof(log: &PathBuf, do_generalize: bool, roots: &[PathBuf]) -> Result<u8, String> {
    let text = std::fs::read_to_string(log)
        .map_err(|e| format!("cannot read log '{}': {e}", log.display()))?;
    let (records, diagnostics) = parse_log(&text);
    for diagnostic in &diagnostics {
        eprintln!("warning: line {}: {}", diagnostic.line, diagnostic.message);
    }
    let set = load_set(roots, false)
        .map(|(set, _)| set)
        .unwrap_or_default();
    let mut suggestions = suggest_rules(&records, &set);
    if do_generalize {
        suggestions = generalize(suggestions);
    }
    if suggestions.is_empty() {
        println!("no suggestions: log contains no denials");
        return Ok(0);
    }
    for suggestion in &suggestions {
        println!("{suggestion}");
    }
    Ok(EXIT_FINDINGS)
}

fn cmd_limits() -> Result<u8, String> {
    println!("{:<12} {:>20} {:>20}  UNIT", "KIND", "SOFT", "HARD");
    for kind in RlimitKind::ALL {
        let value = get_rlimit(kind, None).map_err(|e| e.to_string())?;
        println!(
            "{:<12} {:>20} {:>20}  {}",
            kind.name(),
            value.soft.to_string(),
            value.hard.to_string(),
            kind.unit().label()
        );
    }
    Ok(0)
}

fn cmd_simulate(profile: Option<&str>, task: &str, roots: &[PathBuf]) -> Result<u8, String> {
    let script = parse_task(task)?;
    let set = match profile {
        Some(_) => load_set(roots, true)?.0,
        None => ProfileSet::default(),
    };
    let mut ctx = match profile {
        Some(name) => SubjectContext::for_profile(&set, name).map_err(|e| e.to_string())?,
        None => SubjectContext::unconfined(),
    };
    let report = run_task(&script, &mut ctx, &set, RunMode::Simulate);
    for decision in &report.decisions {
        println!(
            "step {}: {} {} -> {}{}",
            decision.step,
            decision.operation,
            decision.path,
            if decision.allowed {
                "allowed"
            } else {
                "denied"
            },
            if decision.allowed != decision.effective {
                " (not enforced: complain mode)"
            } else {
                ""
            }
        );
    }
    println!("outcome: {}", report.outcome);
    let findings = report.decisions.iter().filter(|d| !d.allowed).count();
    Ok(if findings > 0 || !report.outcome.is_completed() {
        EXIT_FINDINGS
    } else {
        0
    })
}
