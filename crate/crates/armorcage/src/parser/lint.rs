//! Static checks over a loaded profile set.

use std::fmt;

use crate::policy::{ExecMode, Profile, ProfileSet, UnresolvedRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    /// `change_profile ->` target that no loaded profile provides.
    UnresolvedTransition,
    /// A `px` rule whose pattern matches no attached profile.
    UnresolvedPxAttachment,
    /// A `cs` rule in a profile that defines no hats to transition into.
    CsWithoutHats,
    /// A hat granting nothing: entering it denies every request.
    EmptyHat,
    /// A writable pattern that can also be mapped or executed in place.
    WritableExecutableOverlap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub profile: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.profile, self.message)
    }
}

/// Scans the set for unresolved references, questionable hats and the
/// write+map hazard: a rule that grants `w` together with `m` or `ix` lets
/// the confined process write a file and then load or run it.
pub fn lint_profiles(set: &ProfileSet) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    for unresolved in set.unresolved() {
        match unresolved {
            UnresolvedRef::Transition { profile, target } => out.push(Diagnostic {
                kind: DiagnosticKind::UnresolvedTransition,
                profile: profile.clone(),
                message: format!("change_profile target '{target}' is not a loaded profile"),
            }),
            UnresolvedRef::PxAttachment { profile, pattern } => out.push(Diagnostic {
                kind: DiagnosticKind::UnresolvedPxAttachment,
                profile: profile.clone(),
                message: format!("px rule '{pattern}' matches no attached profile"),
            }),
        }
    }

    for profile in set.profiles() {
        lint_rules(profile, profile.name(), &mut out);
        let has_cs = profile
            .rules
            .iter()
            .any(|r| r.modes.exec_modes().contains(&ExecMode::Subprofile));
        if has_cs && profile.hats.is_empty() {
            out.push(Diagnostic {
                kind: DiagnosticKind::CsWithoutHats,
                profile: profile.name().to_string(),
                message: "cs rule present but the profile defines no hats".to_string(),
            });
        }
        for (name, hat) in &profile.hats {
            lint_rules(hat, profile.name(), &mut out);
            if hat.rules.is_empty() && hat.capabilities.is_empty() {
                out.push(Diagnostic {
                    kind: DiagnosticKind::EmptyHat,
                    profile: profile.name().to_string(),
                    message: format!("hat '^{name}' grants nothing; entering it denies everything"),
                });
            }
        }
    }

    out
}

fn lint_rules(profile: &Profile, owner: &str, out: &mut Vec<Diagnostic>) {
    for rule in &profile.rules {
        let executable =
            rule.modes.has_mmap() || rule.modes.exec_modes().contains(&ExecMode::Inherit);
        if rule.modes.has_write() && executable {
            out.push(Diagnostic {
                kind: DiagnosticKind::WritableExecutableOverlap,
                profile: owner.to_string(),
                message: format!(
                    "rule '{} {},' allows writing content that can also be mapped or executed",
                    rule.pattern.source(),
                    rule.modes.canonical()
                ),
            });
        }
    }
}
