//! Acceptance suite: one test per release criterion, each printing a PASS
//! line. Tests that spawn children or depend on process-wide accounting
//! serialize on a lock so their measurements cannot disturb each other.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use armorcage::audit::{apply_suggestions, replay_denials, suggest_rules};
use armorcage::engine::{
    change_hat, change_profile, check_access, revert_hat, set_mode, AccessRequest, EngineError,
    MagicToken, SubjectContext,
};
use armorcage::limits::{
    get_rlimit, set_priority, set_rlimit_value, Identity, Limit, LimitsError, RlimitKind,
    RlimitValue,
};
use armorcage::parser::{parse_profiles, serialize_set, IncludeResolver};
use armorcage::policy::{AccessModeSet, ProfileMode, ProfileSet};
use armorcage::sanitize::sanitize_identifier;
use armorcage::supervisor::{Backend, EvalStatus, Job, SandboxSpec, Supervisor};
use armorcage::task::{builtin_fixture, run_task, RunMode, TaskScript, TaskStep};

/// Serializes the tests that fork children or sample the process table.
static OS_LOCK: Mutex<()> = Mutex::new(());

fn os_lock() -> std::sync::MutexGuard<'static, ()> {
    OS_LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn corpus_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../profiles")
}

fn corpus() -> ProfileSet {
    let root = corpus_root();
    let resolver = IncludeResolver::new(vec![root.clone()]);
    let mut set = ProfileSet::default();
    for name in ["r-base", "r-compile", "r-user", "testprofile"] {
        let text = std::fs::read_to_string(root.join(name)).unwrap();
        set.merge(parse_profiles(&text, name, &resolver).unwrap())
            .unwrap();
    }
    set
}

fn is_root() -> bool {
    unsafe { libc::geteuid() == 0 }
}

/// Transitive descendants of a pid, from /proc.
fn descendants_of(root: u32) -> usize {
    let mut children: HashMap<u32, Vec<u32>> = HashMap::new();
    let Ok(entries) = std::fs::read_dir("/proc") else {
        return 0;
    };
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(pid) = name.to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        let Ok(stat) = std::fs::read_to_string(format!("/proc/{pid}/stat")) else {
            continue;
        };
        // Fields after the parenthesized command name: state, ppid, ...
        let Some(close) = stat.rfind(')') else {
            continue;
        };
        let mut fields = stat[close + 1..].split_whitespace();
        let _state = fields.next();
        if let Some(ppid) = fields.next().and_then(|s| s.parse::<u32>().ok()) {
            children.entry(ppid).or_default().push(pid);
        }
    }
    let mut count = 0;
    let mut queue = vec![root];
    while let Some(pid) = queue.pop() {
        for &child in children.get(&pid).map(|v| v.as_slice()).unwrap_or(&[]) {
            count += 1;
            queue.push(child);
        }
    }
    count
}

fn wait_for_no_descendants(timeout: Duration) -> usize {
    let deadline = Instant::now() + timeout;
    loop {
        let count = descendants_of(std::process::id());
        if count == 0 || Instant::now() >= deadline {
            return count;
        }
        std::thread::sleep(Duration::from_millis(25));
    }
}

/// Processes whose real uid matches, from /proc.
fn count_uid_processes(uid: u32) -> usize {
    let Ok(entries) = std::fs::read_dir("/proc") else {
        return 0;
    };
    let mut count = 0;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(pid) = name.to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        let Ok(status) = std::fs::read_to_string(format!("/proc/{pid}/status")) else {
            continue;
        };
        for line in status.lines() {
            if let Some(rest) = line.strip_prefix("Uid:") {
                if let Some(real) = rest.split_whitespace().next() {
                    if real.parse::<u32>() == Ok(uid) {
                        count += 1;
                    }
                }
                break;
            }
        }
    }
    count
}

// ---------------------------------------------------------------------------
// Criterion: corpus parse.
// ---------------------------------------------------------------------------

#[test]
fn corpus_parse_counts_and_round_trip() {
    let root = corpus_root();
    let resolver = IncludeResolver::new(vec![root.clone()]);

    let text = std::fs::read_to_string(root.join("r-base")).unwrap();
    let set = parse_profiles(&text, "r-base", &resolver).unwrap();
    let r_base = set.get("r-base").unwrap();
    assert_eq!(r_base.rules.len(), 13, "r-base file rules");
    assert_eq!(r_base.includes.len(), 2, "r-base includes");
    assert_eq!(r_base.capabilities.len(), 0, "r-base capabilities");

    let text = std::fs::read_to_string(root.join("r-compile")).unwrap();
    let set = parse_profiles(&text, "r-compile", &resolver).unwrap();
    assert_eq!(
        set.get("r-compile").unwrap().rules.len(),
        15,
        "r-compile file rules"
    );

    let text = std::fs::read_to_string(root.join("r-user")).unwrap();
    let set = parse_profiles(&text, "r-user", &resolver).unwrap();
    let r_user = set.get("r-user").unwrap();
    assert_eq!(r_user.capabilities.len(), 3, "r-user capabilities");
    // The shipped r-user profile extends r-compile (15 rules) with four
    // home-directory rules: 19 file rules, verified line by line against
    // the corpus file.
    assert_eq!(r_user.rules.len(), 19, "r-user file rules");

    for name in ["r-base", "r-compile", "r-user", "testprofile"] {
        let text = std::fs::read_to_string(root.join(name)).unwrap();
        let first = parse_profiles(&text, name, &resolver).unwrap();
        let canonical = serialize_set(&first);
        let second = parse_profiles(&canonical, name, &resolver).unwrap();
        assert_eq!(
            first, second,
            "{name}: parse-serialize-parse changed the set"
        );
        assert_eq!(
            canonical,
            serialize_set(&second),
            "{name}: canonical text not bytewise stable"
        );
    }
    println!("PASS: corpus parse counts and round trip");
}

// ---------------------------------------------------------------------------
// Criterion: transcript decision table.
// ---------------------------------------------------------------------------

#[test]
fn transcript_decision_table() {
    let started = Instant::now();
    let set = corpus();

    // testprofile: group readable, passwd not.
    let mut ctx = SubjectContext::for_profile(&set, "testprofile").unwrap();
    assert!(check_access(&ctx, &set, &AccessRequest::read("/etc/group").unwrap()).allowed);
    assert!(!check_access(&ctx, &set, &AccessRequest::read("/etc/passwd").unwrap()).allowed);

    // testhat denies both; matching token restores; mismatch poisons.
    change_hat(&mut ctx, &set, "testhat", MagicToken::from(13337u64)).unwrap();
    assert!(!check_access(&ctx, &set, &AccessRequest::read("/etc/group").unwrap()).allowed);
    assert!(!check_access(&ctx, &set, &AccessRequest::read("/etc/passwd").unwrap()).allowed);
    revert_hat(&mut ctx, MagicToken::from(13337u64)).unwrap();
    assert!(check_access(&ctx, &set, &AccessRequest::read("/etc/group").unwrap()).allowed);

    change_hat(&mut ctx, &set, "testhat", MagicToken::from(13337u64)).unwrap();
    assert_eq!(
        revert_hat(&mut ctx, MagicToken::from(99999u64)),
        Err(EngineError::TokenMismatch)
    );
    assert!(ctx.is_poisoned());
    assert!(!check_access(&ctx, &set, &AccessRequest::read("/etc/group").unwrap()).allowed);

    // r-base: no home write, full rw under /tmp subdirectories, no /tmp
    // listing.
    let r_base = SubjectContext::for_profile(&set, "r-base").unwrap();
    assert!(
        !check_access(
            &r_base,
            &set,
            &AccessRequest::write("/home/jeroen/test").unwrap()
        )
        .allowed
    );
    assert!(
        check_access(
            &r_base,
            &set,
            &AccessRequest::read("/tmp/x/test.pdf").unwrap()
        )
        .allowed
    );
    assert!(
        check_access(
            &r_base,
            &set,
            &AccessRequest::write("/tmp/x/test.pdf").unwrap()
        )
        .allowed
    );
    assert!(!check_access(&r_base, &set, &AccessRequest::list("/tmp").unwrap()).allowed);

    // r-user: writable ~/R, unreadable ~/Documents.
    let r_user = SubjectContext::for_profile(&set, "r-user").unwrap();
    assert!(check_access(&r_user, &set, &AccessRequest::write("/home/u/R/x").unwrap()).allowed);
    assert!(
        !check_access(
            &r_user,
            &set,
            &AccessRequest::read("/home/u/Documents/x").unwrap()
        )
        .allowed
    );

    assert!(
        started.elapsed() < Duration::from_secs(1),
        "table must decide in under a second"
    );
    println!("PASS: transcript decision table");
}

// ---------------------------------------------------------------------------
// Criterion: memory limit.
// ---------------------------------------------------------------------------

#[test]
fn memory_limit_enforced() {
    let _guard = os_lock();
    let started = Instant::now();
    let supervisor = Supervisor::with_backend(ProfileSet::default(), Backend::Simulated);

    let tight = SandboxSpec::new().with_rlimit(
        RlimitKind::As,
        RlimitValue::both(Limit::Value(10 * 1024 * 1024)),
    );
    let result = supervisor
        .secure_eval(Job::task(builtin_fixture("memtest").unwrap()), &tight)
        .unwrap();
    assert_eq!(result.status, EvalStatus::TaskError, "{result:?}");
    assert!(
        result
            .error
            .as_deref()
            .unwrap_or("")
            .contains("cannot allocate"),
        "{:?}",
        result.error
    );

    let roomy = SandboxSpec::new().with_rlimit(
        RlimitKind::As,
        RlimitValue::both(Limit::Value(1000 * 1024 * 1024)),
    );
    let result = supervisor
        .secure_eval(Job::task(builtin_fixture("memtest").unwrap()), &roomy)
        .unwrap();
    assert_eq!(result.status, EvalStatus::Ok, "{result:?}");

    assert!(started.elapsed() < Duration::from_secs(5));
    println!("PASS: memory limit (AS=10MiB fails allocation, AS=1000MiB succeeds)");
}

// ---------------------------------------------------------------------------
// Criterion: CPU limit.
// ---------------------------------------------------------------------------

#[test]
fn cpu_limit_kills_within_bounds() {
    let _guard = os_lock();
    let supervisor = Supervisor::with_backend(ProfileSet::default(), Backend::Simulated);
    let spec = SandboxSpec::new().with_rlimit(RlimitKind::Cpu, RlimitValue::both(Limit::Value(2)));
    let result = supervisor
        .secure_eval(Job::task(builtin_fixture("cputest").unwrap()), &spec)
        .unwrap();
    match &result.status {
        EvalStatus::LimitKilled(signal) => {
            assert!(
                signal == "SIGXCPU" || signal == "SIGKILL",
                "unexpected limit signal {signal}"
            );
        }
        other => panic!("expected limit kill, got {other:?} ({:?})", result.error),
    }
    let wall = result.duration.as_secs_f64();
    assert!(
        (2.0..=3.5).contains(&wall),
        "wall time {wall}s outside [2.0, 3.5]"
    );
    assert!(
        (1.5..=3.2).contains(&result.usage.cpu_seconds),
        "cpu usage {}s not ~2s",
        result.usage.cpu_seconds
    );
    println!("PASS: CPU limit (killed at ~2s cpu, wall {wall:.2}s)");
}

// ---------------------------------------------------------------------------
// Criterion: timeout.
// ---------------------------------------------------------------------------

#[test]
fn timeout_terminates_and_leaves_no_descendants() {
    let _guard = os_lock();
    let supervisor = Supervisor::with_backend(ProfileSet::default(), Backend::Simulated);
    let spec = SandboxSpec::new().with_timeout(Duration::from_secs(2));
    let result = supervisor
        .secure_eval(Job::task(builtin_fixture("cputest").unwrap()), &spec)
        .unwrap();
    assert_eq!(result.status, EvalStatus::Timeout, "{result:?}");
    let wall = result.duration.as_secs_f64();
    assert!(
        (2.0..=3.5).contains(&wall),
        "wall time {wall}s outside [2.0, 3.5]"
    );
    let survivors = wait_for_no_descendants(Duration::from_secs(2));
    assert_eq!(survivors, 0, "descendants survived the timeout kill");
    println!("PASS: timeout (terminated at {wall:.2}s, zero surviving descendants)");
}

// ---------------------------------------------------------------------------
// Criterion: fork bomb containment.
// ---------------------------------------------------------------------------

#[test]
fn fork_bomb_is_contained_by_nproc() {
    let _guard = os_lock();
    let started = Instant::now();
    let supervisor = std::sync::Arc::new(Supervisor::with_backend(
        ProfileSet::default(),
        Backend::Simulated,
    ));

    // Run the bomb under a dedicated uid when privileged, so the per-user
    // process accounting is exact; otherwise fall back to the current user
    // and tolerate unrelated process churn in the sample. Even with exact
    // accounting the kernel may check the count before incrementing it, so
    // the instantaneous population can read cap+1.
    let (subject_uid, slack) = if is_root() {
        (65533u32, 1usize)
    } else {
        (unsafe { libc::getuid() }, 5usize)
    };
    let baseline = count_uid_processes(subject_uid);
    let cap = baseline + 20;

    let mut spec = SandboxSpec::new()
        .with_rlimit(
            RlimitKind::Nproc,
            RlimitValue::both(Limit::Value(cap as u64)),
        )
        .with_timeout(Duration::from_secs(5));
    if is_root() {
        spec.identity = Some(Identity::numeric(subject_uid, subject_uid));
    }

    // The bomb lives only milliseconds between the fork failure surfacing
    // and the group kill; sample tightly to catch the peak.
    let sampler_stop = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
    let sampler = {
        let stop = sampler_stop.clone();
        std::thread::spawn(move || {
            let mut max = 0;
            while !stop.load(std::sync::atomic::Ordering::SeqCst) {
                max = max.max(count_uid_processes(subject_uid));
                std::thread::sleep(Duration::from_millis(1));
            }
            max
        })
    };

    let result = supervisor
        .secure_eval(Job::task(builtin_fixture("forkbomb").unwrap()), &spec)
        .unwrap();
    sampler_stop.store(true, std::sync::atomic::Ordering::SeqCst);
    let observed_max = sampler.join().unwrap();

    // The supervisor returned: either the root of the bomb surfaced the
    // fork failure, or the double-dutch timeout fired.
    match &result.status {
        EvalStatus::TaskError => {
            let error = result.error.as_deref().unwrap_or("");
            assert!(error.contains("unable to fork"), "{error}");
        }
        EvalStatus::Timeout => {}
        other => panic!("unexpected status {other:?} ({:?})", result.error),
    }
    assert!(
        observed_max <= cap + slack,
        "observed {observed_max} simultaneous processes, cap {cap}"
    );
    let survivors = wait_for_no_descendants(Duration::from_secs(3));
    assert_eq!(survivors, 0, "fork bomb left descendants behind");

    // The host (and the supervisor itself) must remain responsive.
    let check = supervisor
        .secure_eval(Job::callback(|| Ok(b"alive".to_vec())), &SandboxSpec::new())
        .unwrap();
    assert_eq!(check.status, EvalStatus::Ok);
    assert!(started.elapsed() < Duration::from_secs(10));
    println!(
        "PASS: fork bomb containment (max {observed_max} processes under cap {cap}, host responsive)"
    );
}

// ---------------------------------------------------------------------------
// Criterion: privilege ratchet.
// ---------------------------------------------------------------------------

/// Kinds that are safe to ratchet down inside a child that still needs to
/// allocate, write to a pipe and exit: the address-space family is excluded.
const RATCHET_KINDS: [(RlimitKind, u64, u64); 9] = [
    (RlimitKind::Core, 0, 1 << 30),
    (RlimitKind::Cpu, 5, 600),
    (RlimitKind::Fsize, 1 << 16, 1 << 40),
    (RlimitKind::Memlock, 0, 1 << 30),
    (RlimitKind::Msgqueue, 0, 1 << 20),
    (RlimitKind::Nofile, 64, 16_384),
    (RlimitKind::Nproc, 50, 10_000),
    (RlimitKind::Rttime, 1_000, 1 << 40),
    (RlimitKind::Sigpending, 0, 10_000),
];

fn drop_to_nobody_if_root() -> Result<(), String> {
    if unsafe { libc::geteuid() } == 0 {
        armorcage::limits::set_identity(&Identity::numeric(65534, 65534))
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Some kernels (notably sandboxed ones) implement setrlimit only for a
/// subset of resource kinds and reject the rest outright. Probes each
/// candidate with a plain lowering in a throwaway child; kinds the kernel
/// cannot set at all are excluded from the ratchet rotation.
fn kernel_settable_kinds(supervisor: &Supervisor) -> Vec<(RlimitKind, u64, u64)> {
    RATCHET_KINDS
        .into_iter()
        .filter(|&(kind, floor, ceil)| {
            let result = supervisor
                .secure_eval(
                    Job::callback(move || {
                        drop_to_nobody_if_root()?;
                        let current = get_rlimit(kind, None).map_err(|e| e.to_string())?;
                        let target = match current.hard {
                            Limit::Value(h) => h.min(ceil).max(floor),
                            Limit::Infinity => ceil,
                        };
                        match set_rlimit_value(kind, RlimitValue::both(Limit::Value(target)), None)
                        {
                            Ok(_) => Ok(b"yes".to_vec()),
                            Err(LimitsError::RaiseDenied { .. }) => Ok(b"no".to_vec()),
                            Err(e) => Err(e.to_string()),
                        }
                    }),
                    &SandboxSpec::new(),
                )
                .unwrap();
            assert_eq!(result.status, EvalStatus::Ok, "{:?}", result.error);
            result.payload == b"yes"
        })
        .collect()
}

#[test]
fn privilege_ratchet_properties() {
    let _guard = os_lock();
    let supervisor = Supervisor::with_backend(ProfileSet::default(), Backend::Simulated);
    let mut rng = StdRng::seed_from_u64(0x524154);

    let kinds = kernel_settable_kinds(&supervisor);
    assert!(
        !kinds.is_empty(),
        "kernel supports no settable resource kinds at all"
    );

    for sequence in 0..200 {
        let (kind, floor, ceil) = kinds[sequence % kinds.len()];
        let inherited = get_rlimit(kind, None).unwrap();
        let start_cap = match inherited.hard {
            Limit::Value(h) => h.min(ceil),
            Limit::Infinity => ceil,
        };
        if start_cap <= floor {
            continue; // environment already tighter than our test range
        }
        // A non-increasing sequence of hard limits with soft <= hard.
        let mut hard = rng.gen_range(floor..=start_cap);
        let mut steps: Vec<(u64, u64)> = Vec::new();
        for _ in 0..4 {
            let soft = rng.gen_range(floor.min(hard)..=hard);
            steps.push((soft, hard));
            if hard > floor {
                hard = rng.gen_range(floor..=hard);
            }
        }
        let raise_to = steps.last().unwrap().1 + 1 + rng.gen_range(0..1024);

        let result = supervisor
            .secure_eval(
                Job::callback(move || {
                    drop_to_nobody_if_root()?;
                    for (soft, hard) in &steps {
                        let value = RlimitValue::new(Limit::Value(*soft), Limit::Value(*hard))
                            .map_err(|e| e.to_string())?;
                        set_rlimit_value(kind, value, None).map_err(|e| e.to_string())?;
                        let back = get_rlimit(kind, None).map_err(|e| e.to_string())?;
                        if back != value {
                            return Err(format!("{kind}: set {value} but read back {back}"));
                        }
                    }
                    match set_rlimit_value(kind, RlimitValue::both(Limit::Value(raise_to)), None) {
                        Err(LimitsError::RaiseDenied { .. }) => Ok(b"ok".to_vec()),
                        other => Err(format!(
                            "{kind}: raising the hard limit should be denied, got {other:?}"
                        )),
                    }
                }),
                &SandboxSpec::new(),
            )
            .unwrap();
        assert_eq!(
            result.status,
            EvalStatus::Ok,
            "sequence {sequence} ({kind:?}): {:?}",
            result.error
        );
    }

    // Lowering the priority back down needs privilege.
    let result = supervisor
        .secure_eval(
            Job::callback(|| {
                drop_to_nobody_if_root()?;
                let got = set_priority(10).map_err(|e| e.to_string())?;
                if got != 10 {
                    return Err(format!("set_priority(10) read back {got}"));
                }
                match set_priority(5) {
                    Err(LimitsError::PriorityLowerDenied { from: 10, to: 5 }) => Ok(b"ok".to_vec()),
                    other => Err(format!("expected PriorityLowerDenied, got {other:?}")),
                }
            }),
            &SandboxSpec::new(),
        )
        .unwrap();
    assert_eq!(result.status, EvalStatus::Ok, "{:?}", result.error);
    println!(
        "PASS: privilege ratchet (200 sequences over {} kernel-settable kinds; raises and priority lowering denied)",
        kinds.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion: change_profile one-way.
// ---------------------------------------------------------------------------

#[test]
fn change_profile_is_one_way() {
    let set = corpus();

    // Confined without a directive: the error names source and target.
    let mut ctx = SubjectContext::for_profile(&set, "r-base").unwrap();
    let err = change_profile(&mut ctx, &set, "r-user").unwrap_err();
    let message = err.to_string();
    assert!(message.contains("from: r-base"), "{message}");
    assert!(message.contains("to: r-user"), "{message}");

    // The attached-profile shape from the transcript: /usr/bin/R without a
    // directive cannot become r-user.
    let extra = parse_profiles(
        "/usr/bin/R {\n        /etc/R/* r,\n}\n\
         profile granted {\n        change_profile -> r-user,\n        /a r,\n}\n",
        "inline",
        &IncludeResolver::empty(),
    )
    .unwrap();
    let mut set2 = set.clone();
    set2.merge(extra).unwrap();
    let mut attached = SubjectContext::for_profile(&set2, "/usr/bin/R").unwrap();
    let err = change_profile(&mut attached, &set2, "r-user").unwrap_err();
    let message = err.to_string();
    assert!(message.contains("from: /usr/bin/R"), "{message}");
    assert!(message.contains("to: r-user"), "{message}");
    assert!(message.contains("change_profile -> r-user"), "{message}");

    // With the directive present the transition succeeds.
    let mut granted = SubjectContext::for_profile(&set2, "granted").unwrap();
    change_profile(&mut granted, &set2, "r-user").unwrap();
    assert_eq!(granted.profile(), Some("r-user"));
    println!("PASS: change_profile one-way");
}

// ---------------------------------------------------------------------------
// Criterion: logprof soundness.
// ---------------------------------------------------------------------------

#[test]
fn logprof_suggestions_are_sound() {
    let mut rng = StdRng::seed_from_u64(0x4c4f47);
    let dirs = ["data", "srv", "opt"];
    let names = ["x", "y", "z"];

    for round in 0..50 {
        // Random small profile over the path universe, in complain mode.
        let mut rules = String::new();
        for _ in 0..rng.gen_range(1..=3) {
            let dir = dirs[rng.gen_range(0..dirs.len())];
            let pattern = match rng.gen_range(0..3) {
                0 => format!("/{dir}/*"),
                1 => format!("/{dir}/**"),
                _ => format!("/{dir}/{}", names[rng.gen_range(0..names.len())]),
            };
            let modes = ["r", "w", "rw"][rng.gen_range(0..3)];
            rules.push_str(&format!("        {pattern} {modes},\n"));
        }
        let text = format!("profile subject {{\n{rules}}}\n");
        let set = parse_profiles(&text, "inline", &IncludeResolver::empty()).unwrap();
        let set = set_mode(&set, "subject", ProfileMode::Complain).unwrap();

        // Random script of file operations.
        let mut steps = Vec::new();
        for _ in 0..rng.gen_range(2..=8) {
            let dir = dirs[rng.gen_range(0..dirs.len())];
            let name = names[rng.gen_range(0..names.len())];
            let path = format!("/{dir}/{name}");
            steps.push(match rng.gen_range(0..3) {
                0 => TaskStep::ReadFile(path),
                1 => TaskStep::WriteFile(path, b"payload".to_vec()),
                _ => TaskStep::ListDir(format!("/{dir}")),
            });
        }
        let script = TaskScript::new(steps);

        let mut ctx = SubjectContext::for_profile(&set, "subject").unwrap();
        let report = run_task(&script, &mut ctx, &set, RunMode::Simulate);
        assert!(
            report.outcome.is_completed(),
            "complain mode must not abort: {:?}",
            report.outcome
        );

        let suggestions = suggest_rules(&report.audit, &set);
        let augmented = apply_suggestions(&set, &suggestions);
        let remaining = replay_denials(&report.audit, &augmented);
        assert_eq!(
            remaining, 0,
            "round {round}: {remaining} denials survive the suggested rules"
        );
        // Exact-path policy: no suggestion carries a glob.
        for suggestion in &suggestions {
            let source = suggestion.rule.pattern.source();
            assert!(
                !source.contains('*') && !source.contains('?') && !source.contains('{'),
                "suggestion '{source}' contains a glob"
            );
        }
    }
    println!("PASS: logprof soundness (50 randomized rounds replay clean)");
}

// ---------------------------------------------------------------------------
// Criterion: oracle equivalence.
// ---------------------------------------------------------------------------

/// An independent decision oracle: naive recursive glob matching over the
/// pattern source plus union accumulation with default deny.
mod oracle {
    use armorcage::policy::AccessModeSet;

    pub fn decide(rules: &[(String, AccessModeSet)], path: &str, requested: AccessModeSet) -> bool {
        let mut granted = AccessModeSet::EMPTY;
        for (pattern, modes) in rules {
            if glob(
                &pattern.chars().collect::<Vec<_>>(),
                &path.chars().collect::<Vec<_>>(),
            ) {
                granted = granted.union(*modes);
            }
        }
        requested.satisfied_by(granted)
    }

    fn glob(p: &[char], t: &[char]) -> bool {
        match p.first() {
            None => t.is_empty(),
            Some('*') => {
                let mut run = 1;
                while p.get(run) == Some(&'*') {
                    run += 1;
                }
                let rest = &p[run..];
                if run >= 2 {
                    (1..=t.len()).any(|k| glob(rest, &t[k..]))
                } else {
                    let mut limit = 0;
                    while limit < t.len() && t[limit] != '/' {
                        limit += 1;
                    }
                    (1..=limit).any(|k| glob(rest, &t[k..]))
                }
            }
            Some('?') => !t.is_empty() && t[0] != '/' && glob(&p[1..], &t[1..]),
            Some(&c) => !t.is_empty() && t[0] == c && glob(&p[1..], &t[1..]),
        }
    }
}

#[test]
fn decisions_match_exhaustive_oracle() {
    let mut rng = StdRng::seed_from_u64(0x4f5241);
    let segments = ["a", "b", "c"];

    // Every path of one to three segments over the universe, with and
    // without a trailing slash.
    let mut paths = Vec::new();
    for s1 in segments {
        paths.push(format!("/{s1}"));
        paths.push(format!("/{s1}/"));
        for s2 in segments {
            paths.push(format!("/{s1}/{s2}"));
            paths.push(format!("/{s1}/{s2}/"));
            for s3 in segments {
                paths.push(format!("/{s1}/{s2}/{s3}"));
                paths.push(format!("/{s1}/{s2}/{s3}/"));
            }
        }
    }

    let mode_pool = ["r", "w", "m", "rw", "rm", "rwm", "rix"];
    let mut cases = 0usize;
    for _ in 0..120 {
        let rule_count = rng.gen_range(0..=4);
        let mut rule_sources: Vec<(String, AccessModeSet)> = Vec::new();
        let mut profile_text = String::from("profile p {\n");
        for _ in 0..rule_count {
            let depth = rng.gen_range(1..=3);
            let mut pattern = String::new();
            for level in 0..depth {
                let segment = match rng.gen_range(0..5) {
                    0 => "*".to_string(),
                    1 if level == depth - 1 => "**".to_string(),
                    2 => "?".to_string(),
                    _ => segments[rng.gen_range(0..segments.len())].to_string(),
                };
                pattern.push('/');
                pattern.push_str(&segment);
            }
            if rng.gen_bool(0.25) {
                pattern.push('/');
            }
            let modes = mode_pool[rng.gen_range(0..mode_pool.len())];
            profile_text.push_str(&format!("        {pattern} {modes},\n"));
            rule_sources.push((pattern, AccessModeSet::parse(modes).unwrap()));
        }
        profile_text.push_str("}\n");
        let set = parse_profiles(&profile_text, "inline", &IncludeResolver::empty()).unwrap();
        let ctx = SubjectContext::for_profile(&set, "p").unwrap();

        for path in &paths {
            for modes in ["r", "w"] {
                let requested = AccessModeSet::parse(modes).unwrap();
                let request = AccessRequest {
                    path: path.clone(),
                    requested,
                    operation: if modes == "w" {
                        armorcage::engine::Operation::Write
                    } else {
                        armorcage::engine::Operation::Read
                    },
                };
                let engine_says = check_access(&ctx, &set, &request).allowed;
                let oracle_says = oracle::decide(&rule_sources, path, requested);
                assert_eq!(
                    engine_says, oracle_says,
                    "disagreement for path {path} requesting {modes} under\n{profile_text}"
                );
                cases += 1;
            }
        }
    }
    assert!(cases >= 10_000, "only {cases} cases exercised");
    println!("PASS: oracle equivalence ({cases} decisions agree)");
}

// ---------------------------------------------------------------------------
// Criterion: sanitizer.
// ---------------------------------------------------------------------------

#[test]
fn sanitizer_filters_to_alphanumeric() {
    assert_eq!(
        sanitize_identifier("speed ~ dist + system('whoami')"),
        "speeddistsystemwhoami"
    );
    let mut rng = StdRng::seed_from_u64(0x53414e);
    for _ in 0..10_000 {
        let len = rng.gen_range(0..64);
        let input: String = (0..len)
            .map(|_| char::from_u32(rng.gen_range(1..0x300)).unwrap_or('x'))
            .collect();
        let output = sanitize_identifier(&input);
        assert!(
            output.chars().all(|c| c.is_ascii_alphanumeric()),
            "unsanitized output {output:?} from {input:?}"
        );
        assert!(output.len() <= input.len());
        assert_eq!(sanitize_identifier(&output), output, "not idempotent");
    }
    println!("PASS: sanitizer (10000 random strings alphanumeric and idempotent)");
}
