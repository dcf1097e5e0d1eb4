//! Deterministic access decisions, enforcement modes, exec transitions and
//! the hat lifecycle — a userspace analog of kernel MAC enforcement.
//!
//! Decision semantics: the modes of every rule whose pattern matches the
//! requested path are accumulated into a union, and the request is allowed
//! exactly when its modes are contained in that union. No rule matching
//! means deny. Adding a rule can therefore never flip a decision from
//! allowed to denied.

use std::fmt;

use chrono::Utc;
use serde::Serialize;
use thiserror::Error;

use crate::audit::{AuditRecord, Verdict};
use crate::policy::{AccessModeSet, ExecMode, PathError, Profile, ProfileMode, ProfileSet};

/// Secret value guarding hat reversal. Comparison is constant-time so a
/// confined task cannot probe the token bytewise through timing.
#[derive(Clone)]
pub struct MagicToken(Vec<u8>);

impl MagicToken {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        MagicToken(bytes.into())
    }

    /// A token drawn from the OS entropy pool, used where a hat must be
    /// entered irreversibly.
    pub fn unforgeable() -> Self {
        let mut bytes = vec![0u8; 16];
        let rc =
            unsafe { libc::getrandom(bytes.as_mut_ptr() as *mut libc::c_void, bytes.len(), 0) };
        if rc != bytes.len() as isize {
            // Extremely unlikely; fall back to a clock-derived value.
            let now = Utc::now().timestamp_nanos_opt().unwrap_or_default();
            bytes = now.to_le_bytes().to_vec();
        }
        MagicToken(bytes)
    }

    fn ct_eq(&self, other: &MagicToken) -> bool {
        if self.0.len() != other.0.len() {
            return false;
        }
        let mut acc = 0u8;
        for (a, b) in self.0.iter().zip(&other.0) {
            acc |= a ^ b;
        }
        acc == 0
    }
}

impl From<u64> for MagicToken {
    fn from(value: u64) -> Self {
        MagicToken(value.to_le_bytes().to_vec())
    }
}

impl fmt::Debug for MagicToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MagicToken(..)")
    }
}

/// The confinement state of one subject (job). `profile: None` means
/// unconfined. A poisoned context denies every subsequent request.
#[derive(Debug, Clone)]
pub struct SubjectContext {
    profile: Option<String>,
    active_hat: Option<String>,
    hat_token: Option<MagicToken>,
    poisoned: bool,
}

impl SubjectContext {
    pub fn unconfined() -> Self {
        SubjectContext {
            profile: None,
            active_hat: None,
            hat_token: None,
            poisoned: false,
        }
    }

    /// A context confined to `profile`, which must exist in the set.
    pub fn for_profile(set: &ProfileSet, profile: &str) -> Result<Self, EngineError> {
        if !set.contains(profile) {
            return Err(EngineError::UnknownProfile(profile.to_string()));
        }
        Ok(SubjectContext {
            profile: Some(profile.to_string()),
            active_hat: None,
            hat_token: None,
            poisoned: false,
        })
    }

    pub fn profile(&self) -> Option<&str> {
        self.profile.as_deref()
    }

    pub fn active_hat(&self) -> Option<&str> {
        self.active_hat.as_deref()
    }

    pub fn is_unconfined(&self) -> bool {
        self.profile.is_none()
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    /// The profile (or hat) whose rules currently govern decisions.
    fn active_profile<'s>(&self, set: &'s ProfileSet) -> Option<&'s Profile> {
        let profile = set.get(self.profile.as_deref()?)?;
        match &self.active_hat {
            Some(hat) => profile.hats.get(hat),
            None => Some(profile),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Read,
    Write,
    Mmap,
    Exec,
    List,
}

impl Operation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Operation::Read => "read",
            Operation::Write => "write",
            Operation::Mmap => "mmap",
            Operation::Exec => "exec",
            Operation::List => "list",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "read" => Some(Operation::Read),
            "write" => Some(Operation::Write),
            "mmap" => Some(Operation::Mmap),
            "exec" => Some(Operation::Exec),
            "list" => Some(Operation::List),
            _ => None,
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One access request over a normalized absolute path.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessRequest {
    pub path: String,
    pub requested: AccessModeSet,
    pub operation: Operation,
}

impl AccessRequest {
    pub fn read(raw: &str) -> Result<Self, PathError> {
        Ok(AccessRequest {
            path: crate::policy::normalize_path(raw)?,
            requested: AccessModeSet::read(),
            operation: Operation::Read,
        })
    }

    pub fn write(raw: &str) -> Result<Self, PathError> {
        Ok(AccessRequest {
            path: crate::policy::normalize_path(raw)?,
            requested: AccessModeSet::write(),
            operation: Operation::Write,
        })
    }

    pub fn mmap(raw: &str) -> Result<Self, PathError> {
        Ok(AccessRequest {
            path: crate::policy::normalize_path(raw)?,
            requested: AccessModeSet::mmap(),
            operation: Operation::Mmap,
        })
    }

    /// An exec request. The concrete exec mode is the policy's choice, not
    /// the requester's; the `ix` placeholder stands for "any exec".
    pub fn exec(raw: &str) -> Result<Self, PathError> {
        Ok(AccessRequest {
            path: crate::policy::normalize_path(raw)?,
            requested: AccessModeSet::exec(ExecMode::Inherit),
            operation: Operation::Exec,
        })
    }

    /// A directory-listing request: read on a trailing-`/` path.
    pub fn list(raw: &str) -> Result<Self, PathError> {
        let mut path = crate::policy::normalize_path(raw)?;
        if !path.ends_with('/') {
            path.push('/');
        }
        Ok(AccessRequest {
            path,
            requested: AccessModeSet::read(),
            operation: Operation::List,
        })
    }
}

/// A reference to one rule that matched a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleRef {
    pub profile: String,
    pub hat: Option<String>,
    /// Index into the governing rule list.
    pub index: usize,
}

/// The outcome of a decision. In complain mode `allowed` records the policy
/// verdict while `effective` is what actually happens (always true there);
/// in enforce mode the two are equal.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub allowed: bool,
    pub effective: bool,
    pub matched: Vec<RuleRef>,
    /// The accumulated union of modes over all matching rules.
    pub granted: AccessModeSet,
    pub audit: Option<AuditRecord>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("unknown profile '{0}'")]
    UnknownProfile(String),
    #[error("no profile attached to {0}")]
    NoProfileAttached(String),
    #[error("multiple attached profiles match {0}")]
    AmbiguousAttachment(String),
    #[error("conflicting exec modes for {path}: {modes}")]
    ConflictingExecModes { path: String, modes: String },
    #[error("exec of {0} denied by policy")]
    ExecDenied(String),
    #[error("profile '{profile}' has no hat '^{hat}'")]
    NoSuchHat { profile: String, hat: String },
    #[error("already inside hat '^{0}'")]
    AlreadyInHat(String),
    #[error("cannot change hat: subject is unconfined")]
    NotConfined,
    #[error("no active hat to revert")]
    NoActiveHat,
    #[error("magic token mismatch: context poisoned")]
    TokenMismatch,
    #[error(
        "failed to change profile from: {from} to: {to}. Note that this is only \
         allowed if the current profile has a directive \"change_profile -> {to}\""
    )]
    DeniedTransition { from: String, to: String },
    #[error("subject context is poisoned")]
    Poisoned,
    #[error("invalid path: {0}")]
    Path(#[from] PathError),
}

/// Decides one access request. Denial is a value, not an error.
///
/// Unconfined subjects are always allowed. Disabled profiles allow
/// everything with no matching. Otherwise the rules of the active profile
/// (the hat's own rules when a hat is active — a hat inherits nothing) are
/// matched against the path and the request must be contained in the union
/// of the matching rules' modes.
pub fn check_access(ctx: &SubjectContext, set: &ProfileSet, req: &AccessRequest) -> Decision {
    if ctx.poisoned {
        return decided(ctx, req, false, false, Vec::new(), AccessModeSet::EMPTY);
    }
    let Some(profile_name) = ctx.profile.as_deref() else {
        return Decision {
            allowed: true,
            effective: true,
            matched: Vec::new(),
            granted: AccessModeSet::EMPTY,
            audit: None,
        };
    };
    let Some(profile) = set.get(profile_name) else {
        // A stale context referencing a profile this set no longer has:
        // default deny.
        return decided(ctx, req, false, false, Vec::new(), AccessModeSet::EMPTY);
    };
    if profile.mode == ProfileMode::Disabled {
        return Decision {
            allowed: true,
            effective: true,
            matched: Vec::new(),
            granted: AccessModeSet::EMPTY,
            audit: None,
        };
    }
    let Some(active) = ctx.active_profile(set) else {
        return decided(ctx, req, false, false, Vec::new(), AccessModeSet::EMPTY);
    };

    let mut granted = AccessModeSet::EMPTY;
    let mut matched = Vec::new();
    for (index, rule) in active.rules.iter().enumerate() {
        if rule.pattern.matches(&req.path) {
            granted = granted.union(rule.modes);
            matched.push(RuleRef {
                profile: profile_name.to_string(),
                hat: ctx.active_hat.clone(),
                index,
            });
        }
    }
    let allowed = req.requested.satisfied_by(granted);
    let effective = match profile.mode {
        ProfileMode::Enforce => allowed,
        ProfileMode::Complain => true,
        ProfileMode::Disabled => unreachable!("handled above"),
    };
    decided(ctx, req, allowed, effective, matched, granted)
}

fn decided(
    ctx: &SubjectContext,
    req: &AccessRequest,
    allowed: bool,
    effective: bool,
    matched: Vec<RuleRef>,
    granted: AccessModeSet,
) -> Decision {
    let audit = (!allowed).then(|| AuditRecord {
        timestamp: Utc::now(),
        profile: ctx.profile.clone().unwrap_or_else(|| "-".to_string()),
        hat: ctx.active_hat.clone(),
        operation: req.operation,
        path: req.path.clone(),
        requested: req.requested,
        decision: Verdict::Denied,
        effective: if effective {
            Verdict::Allowed
        } else {
            Verdict::Denied
        },
    });
    Decision {
        allowed,
        effective,
        matched,
        granted,
        audit,
    }
}

/// Capability check under the same default-deny rule: a confined subject
/// holds a capability only if the active profile (or hat) lists it.
/// Complain and disabled modes do not enforce.
pub fn check_capability(ctx: &SubjectContext, set: &ProfileSet, name: &str) -> bool {
    if ctx.poisoned {
        return false;
    }
    let Some(profile_name) = ctx.profile.as_deref() else {
        return true;
    };
    let Some(profile) = set.get(profile_name) else {
        return false;
    };
    match profile.mode {
        ProfileMode::Disabled | ProfileMode::Complain => true,
        ProfileMode::Enforce => ctx
            .active_profile(set)
            .is_some_and(|active| active.has_capability(name)),
    }
}

/// Applies the exec transition prescribed by the rules matching
/// `exec_path`: `ix` keeps the context, `px` enters the profile attached to
/// the path, `cs` enters the hat named by the path's last segment, `ux`
/// drops confinement entirely.
pub fn exec_transition(
    ctx: &mut SubjectContext,
    set: &ProfileSet,
    exec_path: &str,
) -> Result<(), EngineError> {
    if ctx.poisoned {
        return Err(EngineError::Poisoned);
    }
    if ctx.is_unconfined() {
        return Ok(());
    }
    let request = AccessRequest::exec(exec_path)?;
    let decision = check_access(ctx, set, &request);
    if !decision.allowed {
        return Err(EngineError::ExecDenied(request.path));
    }
    let profile = set
        .get(ctx.profile.as_deref().unwrap_or_default())
        .expect("allowed decision implies a loaded profile");
    if profile.mode != ProfileMode::Enforce {
        // Complain/disabled profiles do not constrain the transition.
        return Ok(());
    }
    let exec_modes = decision.granted.exec_modes();
    let mode = match exec_modes.as_slice() {
        [one] => *one,
        [] => return Err(EngineError::ExecDenied(request.path)),
        many => {
            return Err(EngineError::ConflictingExecModes {
                path: request.path,
                modes: many.iter().map(|m| m.token()).collect::<Vec<_>>().join(","),
            });
        }
    };
    match mode {
        ExecMode::Inherit => Ok(()),
        ExecMode::Discrete => {
            let candidates = set.attached_matching(&request.path);
            match candidates.as_slice() {
                [] => Err(EngineError::NoProfileAttached(request.path)),
                [profile] => {
                    ctx.profile = Some(profile.name().to_string());
                    ctx.active_hat = None;
                    ctx.hat_token = None;
                    Ok(())
                }
                _ => Err(EngineError::AmbiguousAttachment(request.path)),
            }
        }
        ExecMode::Subprofile => {
            let segment = request
                .path
                .trim_end_matches('/')
                .rsplit('/')
                .next()
                .unwrap_or_default()
                .to_string();
            if !profile.hats.contains_key(&segment) {
                return Err(EngineError::NoSuchHat {
                    profile: profile.name().to_string(),
                    hat: segment,
                });
            }
            // cs is one-way: the token is never disclosed, so the hat
            // cannot be reverted.
            ctx.active_hat = Some(segment);
            ctx.hat_token = Some(MagicToken::unforgeable());
            Ok(())
        }
        ExecMode::Unconfined => {
            log::warn!(
                "unconfined execution of {} from profile '{}' (dangerous)",
                request.path,
                profile.name()
            );
            ctx.profile = None;
            ctx.active_hat = None;
            ctx.hat_token = None;
            Ok(())
        }
    }
}

/// One-way profile switch. Allowed from an unconfined context, or when the
/// active profile carries a matching `change_profile ->` directive.
pub fn change_profile(
    ctx: &mut SubjectContext,
    set: &ProfileSet,
    target: &str,
) -> Result<(), EngineError> {
    if ctx.poisoned {
        return Err(EngineError::Poisoned);
    }
    if !set.contains(target) {
        return Err(EngineError::UnknownProfile(target.to_string()));
    }
    if let Some(from) = ctx.profile.as_deref() {
        let allowed = ctx
            .active_profile(set)
            .is_some_and(|p| p.transitions.iter().any(|t| t == target));
        if !allowed {
            return Err(EngineError::DeniedTransition {
                from: from.to_string(),
                to: target.to_string(),
            });
        }
    }
    ctx.profile = Some(target.to_string());
    ctx.active_hat = None;
    ctx.hat_token = None;
    Ok(())
}

/// Enters a hat of the active profile, storing the token needed to revert.
pub fn change_hat(
    ctx: &mut SubjectContext,
    set: &ProfileSet,
    hat: &str,
    token: MagicToken,
) -> Result<(), EngineError> {
    if ctx.poisoned {
        return Err(EngineError::Poisoned);
    }
    let Some(profile_name) = ctx.profile.as_deref() else {
        return Err(EngineError::NotConfined);
    };
    if let Some(active) = &ctx.active_hat {
        return Err(EngineError::AlreadyInHat(active.clone()));
    }
    let profile = set
        .get(profile_name)
        .ok_or_else(|| EngineError::UnknownProfile(profile_name.to_string()))?;
    if !profile.hats.contains_key(hat) {
        return Err(EngineError::NoSuchHat {
            profile: profile_name.to_string(),
            hat: hat.to_string(),
        });
    }
    ctx.active_hat = Some(hat.to_string());
    ctx.hat_token = Some(token);
    Ok(())
}

/// Leaves the active hat if `token` matches the one stored on entry. A
/// mismatch poisons the context: every further decision denies.
pub fn revert_hat(ctx: &mut SubjectContext, token: MagicToken) -> Result<(), EngineError> {
    if ctx.active_hat.is_none() {
        return Err(EngineError::NoActiveHat);
    }
    let stored = ctx.hat_token.as_ref().expect("active hat implies token");
    if stored.ct_eq(&token) {
        ctx.active_hat = None;
        ctx.hat_token = None;
        Ok(())
    } else {
        ctx.poisoned = true;
        Err(EngineError::TokenMismatch)
    }
}

/// Returns a copy of the set with the named profile's enforcement mode
/// replaced. The set itself is immutable; contexts created against the old
/// set keep deciding under the old modes.
pub fn set_mode(
    set: &ProfileSet,
    profile: &str,
    mode: ProfileMode,
) -> Result<ProfileSet, EngineError> {
    let mut out = set.clone();
    let Some(p) = out.get_mut(profile) else {
        return Err(EngineError::UnknownProfile(profile.to_string()));
    };
    p.mode = mode;
    Ok(out)
}
