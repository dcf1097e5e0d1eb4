//! Real OS-level resource limits, user/group identity and scheduling
//! priority.
//!
//! Everything here acts on process-global state. Callers must serialize
//! calls targeting the same process; the supervisor only invokes these
//! inside a freshly forked child before the task starts.

use std::fmt;
use std::io;

use serde::Serialize;
use thiserror::Error;

/// The fourteen supported resource kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum RlimitKind {
    /// Maximum size of the process's virtual memory (bytes).
    As,
    /// Maximum core file size (bytes).
    Core,
    /// CPU time limit (seconds).
    Cpu,
    /// Maximum size of the data segment (bytes).
    Data,
    /// Maximum size of created files (bytes).
    Fsize,
    /// Bytes of memory that may be locked into RAM.
    Memlock,
    /// Bytes allocatable for POSIX message queues.
    Msgqueue,
    /// Ceiling for the nice value: ceiling `c` permits niceness down to
    /// `20 - c`.
    Nice,
    /// Maximum open file descriptor number (count).
    Nofile,
    /// Maximum number of processes for the real user of the calling
    /// process (count).
    Nproc,
    /// Ceiling on the real-time priority.
    Rtprio,
    /// CPU time a real-time process may consume without a blocking call
    /// (microseconds).
    Rttime,
    /// Signals that may be queued for the real user (count).
    Sigpending,
    /// Maximum stack size (bytes).
    Stack,
}

/// The measurement unit a kind's values are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitUnit {
    Bytes,
    Seconds,
    Microseconds,
    Count,
    PriorityCeiling,
}

impl LimitUnit {
    pub fn label(&self) -> &'static str {
        match self {
            LimitUnit::Bytes => "bytes",
            LimitUnit::Seconds => "seconds",
            LimitUnit::Microseconds => "microseconds",
            LimitUnit::Count => "count",
            LimitUnit::PriorityCeiling => "priority ceiling",
        }
    }
}

impl RlimitKind {
    pub const ALL: [RlimitKind; 14] = [
        RlimitKind::As,
        RlimitKind::Core,
        RlimitKind::Cpu,
        RlimitKind::Data,
        RlimitKind::Fsize,
        RlimitKind::Memlock,
        RlimitKind::Msgqueue,
        RlimitKind::Nice,
        RlimitKind::Nofile,
        RlimitKind::Nproc,
        RlimitKind::Rtprio,
        RlimitKind::Rttime,
        RlimitKind::Sigpending,
        RlimitKind::Stack,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RlimitKind::As => "AS",
            RlimitKind::Core => "CORE",
            RlimitKind::Cpu => "CPU",
            RlimitKind::Data => "DATA",
            RlimitKind::Fsize => "FSIZE",
            RlimitKind::Memlock => "MEMLOCK",
            RlimitKind::Msgqueue => "MSGQUEUE",
            RlimitKind::Nice => "NICE",
            RlimitKind::Nofile => "NOFILE",
            RlimitKind::Nproc => "NPROC",
            RlimitKind::Rtprio => "RTPRIO",
            RlimitKind::Rttime => "RTTIME",
            RlimitKind::Sigpending => "SIGPENDING",
            RlimitKind::Stack => "STACK",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        let upper = s.to_ascii_uppercase();
        let upper = upper.strip_prefix("RLIMIT_").unwrap_or(&upper);
        RlimitKind::ALL.iter().copied().find(|k| k.name() == upper)
    }

    pub fn unit(&self) -> LimitUnit {
        match self {
            RlimitKind::As
            | RlimitKind::Core
            | RlimitKind::Data
            | RlimitKind::Fsize
            | RlimitKind::Memlock
            | RlimitKind::Msgqueue
            | RlimitKind::Stack => LimitUnit::Bytes,
            RlimitKind::Cpu => LimitUnit::Seconds,
            RlimitKind::Rttime => LimitUnit::Microseconds,
            RlimitKind::Nofile | RlimitKind::Nproc | RlimitKind::Sigpending => LimitUnit::Count,
            RlimitKind::Nice | RlimitKind::Rtprio => LimitUnit::PriorityCeiling,
        }
    }

    fn raw(&self) -> libc::__rlimit_resource_t {
        match self {
            RlimitKind::As => libc::RLIMIT_AS,
            RlimitKind::Core => libc::RLIMIT_CORE,
            RlimitKind::Cpu => libc::RLIMIT_CPU,
            RlimitKind::Data => libc::RLIMIT_DATA,
            RlimitKind::Fsize => libc::RLIMIT_FSIZE,
            RlimitKind::Memlock => libc::RLIMIT_MEMLOCK,
            RlimitKind::Msgqueue => libc::RLIMIT_MSGQUEUE,
            RlimitKind::Nice => libc::RLIMIT_NICE,
            RlimitKind::Nofile => libc::RLIMIT_NOFILE,
            RlimitKind::Nproc => libc::RLIMIT_NPROC,
            RlimitKind::Rtprio => libc::RLIMIT_RTPRIO,
            RlimitKind::Rttime => libc::RLIMIT_RTTIME,
            RlimitKind::Sigpending => libc::RLIMIT_SIGPENDING,
            RlimitKind::Stack => libc::RLIMIT_STACK,
        }
    }
}

impl fmt::Display for RlimitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One limit value; `Infinity` is greater than every finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Limit {
    Value(u64),
    Infinity,
}

impl Limit {
    fn from_raw(raw: libc::rlim_t) -> Self {
        if raw == libc::RLIM_INFINITY {
            Limit::Infinity
        } else {
            Limit::Value(raw)
        }
    }

    fn to_raw(self) -> libc::rlim_t {
        match self {
            Limit::Value(v) => v,
            Limit::Infinity => libc::RLIM_INFINITY,
        }
    }

    pub fn le(&self, other: &Limit) -> bool {
        match (self, other) {
            (_, Limit::Infinity) => true,
            (Limit::Infinity, Limit::Value(_)) => false,
            (Limit::Value(a), Limit::Value(b)) => a <= b,
        }
    }

    /// Parses `unlimited`/`infinity` or an integer, with binary suffixes
    /// K/M/G accepted for byte-valued kinds.
    pub fn parse(s: &str, unit: LimitUnit) -> Result<Limit, LimitsError> {
        let lower = s.to_ascii_lowercase();
        if matches!(lower.as_str(), "unlimited" | "infinity" | "inf") {
            return Ok(Limit::Infinity);
        }
        let (digits, multiplier) = match lower.strip_suffix(['k', 'm', 'g']) {
            Some(digits) if unit == LimitUnit::Bytes => {
                let factor = match lower.as_bytes()[lower.len() - 1] {
                    b'k' => 1024u64,
                    b'm' => 1024 * 1024,
                    _ => 1024 * 1024 * 1024,
                };
                (digits, factor)
            }
            _ => (lower.as_str(), 1),
        };
        let value: u64 = digits
            .parse()
            .map_err(|_| LimitsError::BadValue(s.to_string()))?;
        value
            .checked_mul(multiplier)
            .map(Limit::Value)
            .ok_or_else(|| LimitsError::BadValue(s.to_string()))
    }
}

impl fmt::Display for Limit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Limit::Value(v) => write!(f, "{v}"),
            Limit::Infinity => f.write_str("unlimited"),
        }
    }
}

/// A soft/hard pair. The soft limit is what the kernel enforces; the hard
/// limit is the ceiling an unprivileged process can raise the soft limit to,
/// and can only be lowered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RlimitValue {
    pub soft: Limit,
    pub hard: Limit,
}

impl RlimitValue {
    pub fn new(soft: Limit, hard: Limit) -> Result<Self, LimitsError> {
        if !soft.le(&hard) {
            return Err(LimitsError::SoftAboveHard { soft, hard });
        }
        Ok(RlimitValue { soft, hard })
    }

    /// Soft and hard both set to `value`.
    pub fn both(value: Limit) -> Self {
        RlimitValue {
            soft: value,
            hard: value,
        }
    }
}

impl fmt::Display for RlimitValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "soft={} hard={}", self.soft, self.hard)
    }
}

/// A user or group given numerically or by name. Names resolve through the
/// system user database at apply time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdSpec {
    Id(u32),
    Name(String),
}

impl IdSpec {
    pub fn parse(s: &str) -> IdSpec {
        match s.parse::<u32>() {
            Ok(id) => IdSpec::Id(id),
            Err(_) => IdSpec::Name(s.to_string()),
        }
    }
}

impl fmt::Display for IdSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdSpec::Id(id) => write!(f, "{id}"),
            IdSpec::Name(name) => f.write_str(name),
        }
    }
}

/// A uid/gid pair to switch a process to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identity {
    pub uid: IdSpec,
    pub gid: IdSpec,
}

impl Identity {
    pub fn numeric(uid: u32, gid: u32) -> Self {
        Identity {
            uid: IdSpec::Id(uid),
            gid: IdSpec::Id(gid),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LimitsError {
    #[error("soft limit {soft} exceeds hard limit {hard}")]
    SoftAboveHard { soft: Limit, hard: Limit },
    #[error("cannot parse limit value '{0}'")]
    BadValue(String),
    #[error("no such process: pid {0}")]
    NoSuchProcess(i32),
    #[error(
        "failed to set {kind}: operation not permitted \
         (an unprivileged process may only lower its limits)"
    )]
    RaiseDenied { kind: RlimitKind },
    #[error("unknown user '{0}'")]
    UnknownUser(String),
    #[error("unknown group '{0}'")]
    UnknownGroup(String),
    #[error("changing identity requires superuser privileges")]
    IdentityChangeDenied,
    #[error("priority {0} outside the valid range -20..=19")]
    PriorityOutOfRange(i32),
    #[error(
        "failed to set priority: the caller attempted to lower a process \
         priority from {from} to {to}, but did not have the required privilege"
    )]
    PriorityLowerDenied { from: i32, to: i32 },
    #[error("{op} failed: {source}")]
    Sys { op: &'static str, source: Errno },
}

/// A captured errno with its description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Errno(pub i32);

impl fmt::Display for Errno {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (errno {})",
            io::Error::from_raw_os_error(self.0),
            self.0
        )
    }
}

impl std::error::Error for Errno {}

fn last_errno() -> i32 {
    io::Error::last_os_error().raw_os_error().unwrap_or(0)
}

/// Reads the current limits for a kind; `pid: None` targets the calling
/// process.
pub fn get_rlimit(kind: RlimitKind, pid: Option<i32>) -> Result<RlimitValue, LimitsError> {
    let mut old = libc::rlimit {
        rlim_cur: 0,
        rlim_max: 0,
    };
    let pid = pid.unwrap_or(0);
    let rc = unsafe { libc::prlimit(pid, kind.raw(), std::ptr::null(), &mut old) };
    if rc != 0 {
        return Err(match last_errno() {
            libc::ESRCH => LimitsError::NoSuchProcess(pid),
            errno => LimitsError::Sys {
                op: "prlimit(get)",
                source: Errno(errno),
            },
        });
    }
    Ok(RlimitValue {
        soft: Limit::from_raw(old.rlim_cur),
        hard: Limit::from_raw(old.rlim_max),
    })
}

/// Sets a limit and returns the previous value for audit. When `soft` is
/// omitted it is set equal to `hard`. Unprivileged processes may only lower
/// values; an attempted raise of the hard limit is a typed error.
pub fn set_rlimit(
    kind: RlimitKind,
    hard: Limit,
    soft: Option<Limit>,
    pid: Option<i32>,
) -> Result<RlimitValue, LimitsError> {
    let value = RlimitValue::new(soft.unwrap_or(hard), hard)?;
    set_rlimit_value(kind, value, pid)
}

/// Sets a soft/hard pair and returns the previous value.
pub fn set_rlimit_value(
    kind: RlimitKind,
    value: RlimitValue,
    pid: Option<i32>,
) -> Result<RlimitValue, LimitsError> {
    let new = libc::rlimit {
        rlim_cur: value.soft.to_raw(),
        rlim_max: value.hard.to_raw(),
    };
    let mut old = libc::rlimit {
        rlim_cur: 0,
        rlim_max: 0,
    };
    let pid = pid.unwrap_or(0);
    let rc = unsafe { libc::prlimit(pid, kind.raw(), &new, &mut old) };
    if rc != 0 {
        return Err(match last_errno() {
            libc::ESRCH => LimitsError::NoSuchProcess(pid),
            libc::EPERM => LimitsError::RaiseDenied { kind },
            errno => LimitsError::Sys {
                op: "prlimit(set)",
                source: Errno(errno),
            },
        });
    }
    Ok(RlimitValue {
        soft: Limit::from_raw(old.rlim_cur),
        hard: Limit::from_raw(old.rlim_max),
    })
}

/// The current real uid/gid of this process.
pub fn current_identity() -> Identity {
    unsafe { Identity::numeric(libc::getuid(), libc::getgid()) }
}

fn resolve_uid(spec: &IdSpec) -> Result<(u32, Option<String>), LimitsError> {
    match spec {
        IdSpec::Id(id) => Ok((*id, user_name_of(*id))),
        IdSpec::Name(name) => lookup_passwd_by_name(name)
            .map(|(uid, _)| (uid, Some(name.clone())))
            .ok_or_else(|| LimitsError::UnknownUser(name.clone())),
    }
}

fn resolve_gid(spec: &IdSpec) -> Result<u32, LimitsError> {
    match spec {
        IdSpec::Id(id) => Ok(*id),
        IdSpec::Name(name) => {
            lookup_group_by_name(name).ok_or_else(|| LimitsError::UnknownGroup(name.clone()))
        }
    }
}

/// The login name for a uid, if the user database knows it.
pub fn user_name_of(uid: u32) -> Option<String> {
    let mut buf = vec![0u8; 4096];
    let mut pwd: libc::passwd = unsafe { std::mem::zeroed() };
    let mut result: *mut libc::passwd = std::ptr::null_mut();
    let rc = unsafe {
        libc::getpwuid_r(
            uid,
            &mut pwd,
            buf.as_mut_ptr() as *mut libc::c_char,
            buf.len(),
            &mut result,
        )
    };
    if rc != 0 || result.is_null() {
        return None;
    }
    let name = unsafe { std::ffi::CStr::from_ptr(pwd.pw_name) };
    name.to_str().ok().map(str::to_string)
}

fn lookup_passwd_by_name(name: &str) -> Option<(u32, u32)> {
    let cname = std::ffi::CString::new(name).ok()?;
    let mut buf = vec![0u8; 4096];
    let mut pwd: libc::passwd = unsafe { std::mem::zeroed() };
    let mut result: *mut libc::passwd = std::ptr::null_mut();
    let rc = unsafe {
        libc::getpwnam_r(
            cname.as_ptr(),
            &mut pwd,
            buf.as_mut_ptr() as *mut libc::c_char,
            buf.len(),
            &mut result,
        )
    };
    if rc != 0 || result.is_null() {
        return None;
    }
    Some((pwd.pw_uid, pwd.pw_gid))
}

fn lookup_group_by_name(name: &str) -> Option<u32> {
    let cname = std::ffi::CString::new(name).ok()?;
    let mut buf = vec![0u8; 4096];
    let mut grp: libc::group = unsafe { std::mem::zeroed() };
    let mut result: *mut libc::group = std::ptr::null_mut();
    let rc = unsafe {
        libc::getgrnam_r(
            cname.as_ptr(),
            &mut grp,
            buf.as_mut_ptr() as *mut libc::c_char,
            buf.len(),
            &mut result,
        )
    };
    if rc != 0 || result.is_null() {
        return None;
    }
    Some(grp.gr_gid)
}

/// Switches the process identity: supplementary groups are reset to the
/// target user's groups, then the gid is applied before the uid (the uid
/// switch drops the privilege needed for the rest). Insufficient privilege
/// is detected up front so nothing is partially applied.
pub fn set_identity(identity: &Identity) -> Result<Identity, LimitsError> {
    let previous = current_identity();
    let (uid, user_name) = resolve_uid(&identity.uid)?;
    let gid = resolve_gid(&identity.gid)?;

    let euid = unsafe { libc::geteuid() };
    let already = matches!(previous.uid, IdSpec::Id(u) if u == uid)
        && matches!(previous.gid, IdSpec::Id(g) if g == gid);
    if already {
        return Ok(previous);
    }
    if euid != 0 {
        return Err(LimitsError::IdentityChangeDenied);
    }

    let rc = match user_name.and_then(|n| std::ffi::CString::new(n).ok()) {
        Some(cname) => unsafe { libc::initgroups(cname.as_ptr(), gid) },
        None => unsafe { libc::setgroups(1, &gid) },
    };
    if rc != 0 {
        return Err(LimitsError::Sys {
            op: "setgroups",
            source: Errno(last_errno()),
        });
    }
    if unsafe { libc::setgid(gid) } != 0 {
        return Err(LimitsError::Sys {
            op: "setgid",
            source: Errno(last_errno()),
        });
    }
    if unsafe { libc::setuid(uid) } != 0 {
        return Err(LimitsError::Sys {
            op: "setuid",
            source: Errno(last_errno()),
        });
    }
    Ok(previous)
}

/// The current niceness of this process.
pub fn get_priority() -> Result<i32, LimitsError> {
    // getpriority can legitimately return -1; clear errno to distinguish.
    unsafe { *libc::__errno_location() = 0 };
    let value = unsafe { libc::getpriority(libc::PRIO_PROCESS, 0) };
    let errno = last_errno();
    if value == -1 && errno != 0 {
        return Err(LimitsError::Sys {
            op: "getpriority",
            source: Errno(errno),
        });
    }
    Ok(value)
}

/// Sets the niceness and returns the read-back value. Unprivileged callers
/// may only increase it (lower the priority); lowering without privilege is
/// a typed error.
///
/// Insufficient privilege is detected up front, following the kernel rule:
/// lowering niceness below its current value requires either the SYS_NICE
/// capability or a NICE rlimit ceiling `c` with `nice >= 20 - c`.
pub fn set_priority(nice: i32) -> Result<i32, LimitsError> {
    if !(-20..=19).contains(&nice) {
        return Err(LimitsError::PriorityOutOfRange(nice));
    }
    let current = get_priority()?;
    if nice < current && !can_lower_niceness_to(nice) {
        return Err(LimitsError::PriorityLowerDenied {
            from: current,
            to: nice,
        });
    }
    let rc = unsafe { libc::setpriority(libc::PRIO_PROCESS, 0, nice) };
    if rc != 0 {
        return Err(match last_errno() {
            libc::EACCES | libc::EPERM => LimitsError::PriorityLowerDenied {
                from: current,
                to: nice,
            },
            errno => LimitsError::Sys {
                op: "setpriority",
                source: Errno(errno),
            },
        });
    }
    get_priority()
}

fn can_lower_niceness_to(nice: i32) -> bool {
    if has_effective_capability(CAP_SYS_NICE_BIT) {
        return true;
    }
    match get_rlimit(RlimitKind::Nice, None) {
        Ok(value) => match value.soft {
            Limit::Infinity => true,
            Limit::Value(ceiling) => nice >= nice_floor(ceiling),
        },
        Err(_) => false,
    }
}

const CAP_SYS_NICE_BIT: u32 = 23;

/// Whether this process holds a capability in its effective set, read from
/// /proc so no extra library is needed.
fn has_effective_capability(bit: u32) -> bool {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return false;
    };
    for line in status.lines() {
        if let Some(hex) = line.strip_prefix("CapEff:") {
            if let Ok(mask) = u64::from_str_radix(hex.trim(), 16) {
                return mask >> bit & 1 == 1;
            }
        }
    }
    false
}

/// The lowest niceness a NICE rlimit ceiling permits: ceiling `c`
/// corresponds to permitted niceness `>= 20 - c`. A floor of 20 means no
/// lowering is permitted at all.
pub fn nice_floor(ceiling: u64) -> i32 {
    (20i64 - ceiling as i64).clamp(-20, 20) as i32
}
