//! Canonical text form for profiles.
//!
//! The emitted form is stable: serializing, reparsing and serializing again
//! yields byte-identical text, and reparsing reproduces an equal
//! [`ProfileSet`] (given the same include resolver). Mode strings come out
//! in canonical flag order, so `mr` in a source file serializes as `rm`.

use crate::policy::{FileRule, Profile, ProfileIdentity, ProfileMode, ProfileSet};

const INDENT: &str = "        ";

/// `<pattern> <modes>,` as it appears inside a profile block.
pub fn serialize_rule(rule: &FileRule) -> String {
    format!("{} {},", rule.pattern.source(), rule.modes.canonical())
}

/// One profile block in canonical form, trailing newline included.
pub fn serialize_profile(profile: &Profile) -> String {
    let mut out = String::new();
    write_block(&mut out, profile, 0);
    out
}

/// The whole set: variable definitions first, then each profile block in
/// identity order, separated by blank lines.
pub fn serialize_set(set: &ProfileSet) -> String {
    let mut sections: Vec<String> = Vec::new();
    let mut vars = String::new();
    for (name, values) in set.variables().iter() {
        vars.push_str(&format!("@{{{name}}}={}\n", values.join(" ")));
    }
    if !vars.is_empty() {
        sections.push(vars);
    }
    for profile in set.profiles() {
        sections.push(serialize_profile(profile));
    }
    sections.join("\n")
}

fn write_block(out: &mut String, profile: &Profile, level: usize) {
    let indent = INDENT.repeat(level);
    let flags = match profile.mode {
        ProfileMode::Enforce => String::new(),
        mode => format!(" flags=({})", mode.as_str()),
    };
    match &profile.identity {
        ProfileIdentity::Named(name) if level > 0 => {
            out.push_str(&format!("{indent}^{name}{flags} {{\n"));
        }
        ProfileIdentity::Named(name) => {
            out.push_str(&format!("{indent}profile {name}{flags} {{\n"));
        }
        ProfileIdentity::Attached(path) => {
            out.push_str(&format!("{indent}{path}{flags} {{\n"));
        }
    }

    let body_indent = INDENT.repeat(level + 1);
    let mut sections: Vec<Vec<String>> = Vec::new();
    if !profile.includes.is_empty() {
        sections.push(
            profile
                .includes
                .iter()
                .map(|i| format!("{body_indent}#include <{i}>"))
                .collect(),
        );
    }
    if !profile.capabilities.is_empty() {
        sections.push(
            profile
                .capabilities
                .iter()
                .map(|c| format!("{body_indent}capability {},", c.name()))
                .collect(),
        );
    }
    if !profile.transitions.is_empty() {
        sections.push(
            profile
                .transitions
                .iter()
                .map(|t| format!("{body_indent}change_profile -> {t},"))
                .collect(),
        );
    }
    if !profile.rules.is_empty() {
        sections.push(
            profile
                .rules
                .iter()
                .map(|r| format!("{body_indent}{}", serialize_rule(r)))
                .collect(),
        );
    }
    for (i, section) in sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for line in section {
            out.push_str(line);
            out.push('\n');
        }
    }

    for (i, hat) in profile.hats.values().enumerate() {
        if i > 0 || !sections.is_empty() {
            out.push('\n');
        }
        write_block(out, hat, level + 1);
    }

    let indent = INDENT.repeat(level);
    out.push_str(&format!("{indent}}}\n"));
}
