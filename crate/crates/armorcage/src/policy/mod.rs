//! Core value types for policies: access modes, file and capability rules,
//! profiles and profile sets. Everything here is immutable after
//! construction and safe to share across concurrent decision evaluations.

mod pattern;

pub use pattern::{compile_pattern, normalize_path, PathError, PathPattern, PatternError};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Serialize, Serializer};
use thiserror::Error;

const R: u8 = 0b0000_0001;
const W: u8 = 0b0000_0010;
const M: u8 = 0b0000_0100;
const IX: u8 = 0b0000_1000;
const PX: u8 = 0b0001_0000;
const CS: u8 = 0b0010_0000;
const UX: u8 = 0b0100_0000;
const EXEC_MASK: u8 = IX | PX | CS | UX;

/// How an allowed `exec` transitions the subject's confinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecMode {
    /// `ix`: inherit the current profile.
    Inherit,
    /// `px`: transition to the profile attached to the executed path.
    Discrete,
    /// `cs`: transition to a subprofile (hat) of the current profile.
    Subprofile,
    /// `ux`: run unconfined (dangerous).
    Unconfined,
}

impl ExecMode {
    pub fn token(&self) -> &'static str {
        match self {
            ExecMode::Inherit => "ix",
            ExecMode::Discrete => "px",
            ExecMode::Subprofile => "cs",
            ExecMode::Unconfined => "ux",
        }
    }

    fn bit(&self) -> u8 {
        match self {
            ExecMode::Inherit => IX,
            ExecMode::Discrete => PX,
            ExecMode::Subprofile => CS,
            ExecMode::Unconfined => UX,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModeError {
    #[error("unknown mode '{0}'")]
    UnknownMode(char),
    #[error("conflicting exec modes in '{0}'")]
    ConflictingExec(String),
    #[error("empty mode string")]
    Empty,
}

/// A set of access-mode flags over `{r, w, m, px, cs, ix, ux}`.
///
/// Rule sets carry at most one exec mode (enforced at parse time). Unions
/// accumulated over several matching rules may transiently hold more; that
/// state is what `exec_transition` reports as a conflict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AccessModeSet(u8);

impl AccessModeSet {
    pub const EMPTY: AccessModeSet = AccessModeSet(0);

    pub fn read() -> Self {
        AccessModeSet(R)
    }

    pub fn write() -> Self {
        AccessModeSet(W)
    }

    pub fn mmap() -> Self {
        AccessModeSet(M)
    }

    pub fn exec(mode: ExecMode) -> Self {
        AccessModeSet(mode.bit())
    }

    /// Parses a mode string like `rix`, `mr` or `rmw`. Flags may appear in
    /// any order; at most one exec mode is accepted.
    pub fn parse(s: &str) -> Result<Self, ModeError> {
        if s.is_empty() {
            return Err(ModeError::Empty);
        }
        let mut bits = 0u8;
        let chars: Vec<char> = s.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let bit = match chars[i] {
                'r' => R,
                'w' => W,
                'm' => M,
                'i' if chars.get(i + 1) == Some(&'x') => {
                    i += 1;
                    IX
                }
                'p' if chars.get(i + 1) == Some(&'x') => {
                    i += 1;
                    PX
                }
                'u' if chars.get(i + 1) == Some(&'x') => {
                    i += 1;
                    UX
                }
                'c' if chars.get(i + 1) == Some(&'s') => {
                    i += 1;
                    CS
                }
                c => return Err(ModeError::UnknownMode(c)),
            };
            if bit & EXEC_MASK != 0 && bits & EXEC_MASK != 0 {
                return Err(ModeError::ConflictingExec(s.to_string()));
            }
            bits |= bit;
            i += 1;
        }
        Ok(AccessModeSet(bits))
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn has_read(&self) -> bool {
        self.0 & R != 0
    }

    pub fn has_write(&self) -> bool {
        self.0 & W != 0
    }

    pub fn has_mmap(&self) -> bool {
        self.0 & M != 0
    }

    pub fn has_exec(&self) -> bool {
        self.0 & EXEC_MASK != 0
    }

    pub fn union(&self, other: AccessModeSet) -> AccessModeSet {
        AccessModeSet(self.0 | other.0)
    }

    pub fn with(self, other: AccessModeSet) -> AccessModeSet {
        self.union(other)
    }

    /// All exec modes present (a rule has at most one; a union may not).
    pub fn exec_modes(&self) -> Vec<ExecMode> {
        [
            ExecMode::Inherit,
            ExecMode::Discrete,
            ExecMode::Subprofile,
            ExecMode::Unconfined,
        ]
        .into_iter()
        .filter(|m| self.0 & m.bit() != 0)
        .collect()
    }

    /// Whether a request with these modes is satisfied by `granted`.
    ///
    /// `r`, `w` and `m` must each be granted individually. A requested exec
    /// is satisfied by any granted exec mode: the requester cannot know
    /// which transition the policy prescribes.
    pub fn satisfied_by(&self, granted: AccessModeSet) -> bool {
        let rwm = self.0 & (R | W | M);
        if rwm & !granted.0 != 0 {
            return false;
        }
        if self.0 & EXEC_MASK != 0 && granted.0 & EXEC_MASK == 0 {
            return false;
        }
        true
    }

    /// The flags present in `self` but not satisfied by `granted`.
    pub fn missing_from(&self, granted: AccessModeSet) -> AccessModeSet {
        let mut bits = self.0 & (R | W | M) & !granted.0;
        if self.0 & EXEC_MASK != 0 && granted.0 & EXEC_MASK == 0 {
            bits |= self.0 & EXEC_MASK;
        }
        AccessModeSet(bits)
    }

    /// Canonical rendering: `r`, `w`, `m` in that order, then the exec mode.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        if self.has_read() {
            out.push('r');
        }
        if self.has_write() {
            out.push('w');
        }
        if self.has_mmap() {
            out.push('m');
        }
        for mode in self.exec_modes() {
            out.push_str(mode.token());
        }
        out
    }
}

impl fmt::Display for AccessModeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl Serialize for AccessModeSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical())
    }
}

/// A file rule: a path pattern plus the modes it grants.
#[derive(Debug, Clone, PartialEq)]
pub struct FileRule {
    pub pattern: PathPattern,
    pub modes: AccessModeSet,
}

impl FileRule {
    pub fn new(pattern: PathPattern, modes: AccessModeSet) -> Self {
        FileRule { pattern, modes }
    }
}

impl fmt::Display for FileRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {},", self.pattern.source(), self.modes.canonical())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid capability name '{0}': expected [a-z_]+")]
pub struct CapabilityNameError(pub String);

/// A granted POSIX capability, e.g. `kill` or `net_bind_service`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapabilityRule {
    name: String,
}

impl CapabilityRule {
    /// Names are accepted freely as long as they look like capability
    /// identifiers; validity against a kernel list is out of scope.
    pub fn new(name: &str) -> Result<Self, CapabilityNameError> {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
            return Err(CapabilityNameError(name.to_string()));
        }
        Ok(CapabilityRule {
            name: name.to_string(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Named expansions used by `@{VAR}` references in patterns.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VariableTable {
    bindings: BTreeMap<String, Vec<String>>,
}

impl VariableTable {
    pub fn new() -> Self {
        VariableTable::default()
    }

    pub fn define(&mut self, name: &str, values: Vec<String>) {
        self.bindings.insert(name.to_string(), values);
    }

    pub fn lookup(&self, name: &str) -> Option<&[String]> {
        self.bindings.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.bindings.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    /// Merges `other` in; a name bound to a different value list is an error.
    pub fn merge(&mut self, other: &VariableTable) -> Result<(), String> {
        for (name, values) in &other.bindings {
            match self.bindings.get(name) {
                Some(existing) if existing != values => {
                    return Err(format!("conflicting definitions for @{{{name}}}"));
                }
                Some(_) => {}
                None => {
                    self.bindings.insert(name.clone(), values.clone());
                }
            }
        }
        Ok(())
    }
}

/// Whether a profile is named (`profile r-base { ... }`) or attached to an
/// executable path (`/usr/bin/R { ... }`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProfileIdentity {
    Named(String),
    Attached(String),
}

impl ProfileIdentity {
    pub fn name(&self) -> &str {
        match self {
            ProfileIdentity::Named(n) | ProfileIdentity::Attached(n) => n,
        }
    }

    pub fn is_attached(&self) -> bool {
        matches!(self, ProfileIdentity::Attached(_))
    }
}

impl fmt::Display for ProfileIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Enforcement mode of a profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileMode {
    /// Violations are denied.
    #[default]
    Enforce,
    /// Violations are allowed but logged (learning mode).
    Complain,
    /// The profile is ignored entirely.
    Disabled,
}

impl ProfileMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProfileMode::Enforce => "enforce",
            ProfileMode::Complain => "complain",
            ProfileMode::Disabled => "disabled",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "enforce" => Some(ProfileMode::Enforce),
            "complain" => Some(ProfileMode::Complain),
            "disabled" => Some(ProfileMode::Disabled),
            _ => None,
        }
    }
}

/// A parsed policy: file rules, capabilities, hats and transition
/// directives, with an enforcement mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub identity: ProfileIdentity,
    pub includes: Vec<String>,
    pub rules: Vec<FileRule>,
    pub capabilities: Vec<CapabilityRule>,
    /// Targets permitted via `change_profile -> NAME,`.
    pub transitions: Vec<String>,
    /// Hats are one level deep: a hat contains no nested hats.
    pub hats: BTreeMap<String, Profile>,
    pub mode: ProfileMode,
}

impl Profile {
    pub fn new(identity: ProfileIdentity) -> Self {
        Profile {
            identity,
            includes: Vec::new(),
            rules: Vec::new(),
            capabilities: Vec::new(),
            transitions: Vec::new(),
            hats: BTreeMap::new(),
            mode: ProfileMode::Enforce,
        }
    }

    pub fn name(&self) -> &str {
        self.identity.name()
    }

    pub fn has_capability(&self, name: &str) -> bool {
        self.capabilities.iter().any(|c| c.name() == name)
    }
}

/// A reference that failed to resolve when the set was loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnresolvedRef {
    /// `change_profile -> target,` with no such profile in the set.
    Transition { profile: String, target: String },
    /// A `px` rule whose pattern matches no attached profile in the set.
    PxAttachment { profile: String, pattern: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileSetError {
    #[error("duplicate profile identity '{0}'")]
    DuplicateIdentity(String),
    #[error("{0}")]
    VariableConflict(String),
}

/// All loaded profiles plus the variable table they were compiled against.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileSet {
    profiles: BTreeMap<String, Profile>,
    variables: VariableTable,
    unresolved: Vec<UnresolvedRef>,
}

impl ProfileSet {
    pub fn new(variables: VariableTable) -> Self {
        ProfileSet {
            profiles: BTreeMap::new(),
            variables,
            unresolved: Vec::new(),
        }
    }

    pub fn insert(&mut self, profile: Profile) -> Result<(), ProfileSetError> {
        let key = profile.name().to_string();
        if self.profiles.contains_key(&key) {
            return Err(ProfileSetError::DuplicateIdentity(key));
        }
        self.profiles.insert(key, profile);
        self.refresh_unresolved();
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Profile> {
        self.profiles.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Profile> {
        self.profiles.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.profiles.contains_key(name)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &Profile> {
        self.profiles.values()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn variables(&self) -> &VariableTable {
        &self.variables
    }

    /// References flagged unresolved at load time.
    pub fn unresolved(&self) -> &[UnresolvedRef] {
        &self.unresolved
    }

    /// Attached profiles whose attachment pattern matches `exec_path`.
    pub fn attached_matching(&self, exec_path: &str) -> Vec<&Profile> {
        self.profiles
            .values()
            .filter(|p| p.identity.is_attached())
            .filter(|p| {
                compile_pattern(p.name(), &self.variables)
                    .map(|pat| pat.matches(exec_path))
                    .unwrap_or(false)
            })
            .collect()
    }

    /// Merges another set in; duplicate identities are an error.
    pub fn merge(&mut self, other: ProfileSet) -> Result<(), ProfileSetError> {
        self.variables
            .merge(&other.variables)
            .map_err(ProfileSetError::VariableConflict)?;
        for (key, profile) in other.profiles {
            if self.profiles.contains_key(&key) {
                return Err(ProfileSetError::DuplicateIdentity(key));
            }
            self.profiles.insert(key, profile);
        }
        self.refresh_unresolved();
        Ok(())
    }

    /// Recomputes the unresolved-reference list. Transitions must name a
    /// loaded profile; `px` rules must have at least one attached profile
    /// their pattern can resolve to.
    fn refresh_unresolved(&mut self) {
        let mut unresolved = Vec::new();
        let attached: Vec<String> = self
            .profiles
            .values()
            .filter(|p| p.identity.is_attached())
            .map(|p| p.name().to_string())
            .collect();
        for profile in self.profiles.values() {
            for target in &profile.transitions {
                if !self.profiles.contains_key(target) {
                    unresolved.push(UnresolvedRef::Transition {
                        profile: profile.name().to_string(),
                        target: target.clone(),
                    });
                }
            }
            for rule in &profile.rules {
                if !rule.modes.exec_modes().contains(&ExecMode::Discrete) {
                    continue;
                }
                let resolves = attached.iter().any(|path| rule.pattern.matches(path));
                if !resolves {
                    unresolved.push(UnresolvedRef::PxAttachment {
                        profile: profile.name().to_string(),
                        pattern: rule.pattern.source().to_string(),
                    });
                }
            }
        }
        self.unresolved = unresolved;
    }
}
