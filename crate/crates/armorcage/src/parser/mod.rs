//! Parser for policy text files.
//!
//! The accepted syntax is the profile subset used by the shipped corpus:
//! `profile NAME { ... }` and path-attached `/path { ... }` blocks with file
//! rules (`PATTERN MODES,`), `capability NAME,`, `change_profile -> NAME,`,
//! one level of `^hat { ... }` subprofiles, `#include <target>` directives
//! and `@{NAME}=value...` variable definitions. An optional
//! `flags=(enforce|complain|disabled)` on a block header selects the
//! enforcement mode.
//!
//! Includes are resolved through an [`IncludeResolver`] and inlined; parsing
//! performs no filesystem access besides resolver lookups.

mod lint;
mod serialize;

pub use lint::{lint_profiles, Diagnostic, DiagnosticKind};
pub use serialize::{serialize_profile, serialize_rule, serialize_set};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::policy::{
    compile_pattern, AccessModeSet, CapabilityRule, FileRule, ModeError, Profile, ProfileIdentity,
    ProfileMode, ProfileSet, VariableTable,
};

/// A parse failure with its position. Lines and columns are 1-based.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{file}:{line}:{column}: {message}")]
pub struct ParseError {
    pub file: String,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl ParseError {
    fn new(file: &str, line: usize, column: usize, message: impl Into<String>) -> Self {
        ParseError {
            file: file.to_string(),
            line,
            column,
            message: message.into(),
        }
    }
}

/// A non-fatal finding produced in lenient mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWarning {
    pub file: String,
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.file, self.line, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    /// When true (the default), an include target the resolver cannot find
    /// is an error; otherwise it is recorded and reported as a warning.
    pub strict_includes: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            strict_includes: true,
        }
    }
}

/// Locates `#include <target>` content. Targets are searched in root order,
/// preloaded entries first, so resolution is deterministic given the roots.
#[derive(Debug, Clone, Default)]
pub struct IncludeResolver {
    roots: Vec<PathBuf>,
    preloaded: BTreeMap<String, String>,
}

impl IncludeResolver {
    pub fn new(roots: Vec<PathBuf>) -> Self {
        IncludeResolver {
            roots,
            preloaded: BTreeMap::new(),
        }
    }

    pub fn empty() -> Self {
        IncludeResolver::default()
    }

    /// Registers in-memory content for a target, shadowing the roots.
    pub fn preload(&mut self, target: &str, content: &str) {
        self.preloaded
            .insert(target.to_string(), content.to_string());
    }

    pub fn roots(&self) -> &[PathBuf] {
        &self.roots
    }

    fn resolve(&self, target: &str) -> Option<(String, String)> {
        if let Some(content) = self.preloaded.get(target) {
            return Some((target.to_string(), content.clone()));
        }
        for root in &self.roots {
            let candidate = root.join(target);
            if let Ok(content) = fs::read_to_string(&candidate) {
                return Some((candidate.display().to_string(), content));
            }
        }
        None
    }
}

/// Parses all profiles defined in `text`, strict about includes.
pub fn parse_profiles(
    text: &str,
    origin: &str,
    resolver: &IncludeResolver,
) -> Result<ProfileSet, ParseError> {
    parse_profiles_with(text, origin, resolver, ParseOptions::default()).map(|(set, _)| set)
}

/// Parses all profiles defined in `text` under explicit options, returning
/// the set plus any warnings produced in lenient mode.
pub fn parse_profiles_with(
    text: &str,
    origin: &str,
    resolver: &IncludeResolver,
    options: ParseOptions,
) -> Result<(ProfileSet, Vec<ParseWarning>), ParseError> {
    let mut parser = Parser {
        resolver,
        options,
        warnings: Vec::new(),
        variables: VariableTable::new(),
        profiles: Vec::new(),
        depth: 0,
    };
    parser.parse_top_level(text, origin)?;

    let mut set = ProfileSet::new(parser.variables);
    for (profile, line) in parser.profiles {
        let name = profile.name().to_string();
        set.insert(profile).map_err(|_| {
            ParseError::new(
                origin,
                line,
                1,
                format!("duplicate profile identity '{name}'"),
            )
        })?;
    }
    Ok((set, parser.warnings))
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{0}")]
    Merge(String),
}

/// Loads every regular file directly under each root as a profile file and
/// merges the results. Subdirectories (tunables, abstractions) are include
/// material, not profiles.
pub fn load_profile_dirs(
    roots: &[PathBuf],
    options: ParseOptions,
) -> Result<(ProfileSet, Vec<ParseWarning>), LoadError> {
    let resolver = IncludeResolver::new(roots.to_vec());
    let mut set = ProfileSet::default();
    let mut warnings = Vec::new();
    for root in roots {
        let entries = match fs::read_dir(root) {
            Ok(entries) => entries,
            Err(_) => continue,
        };
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .filter(|p| {
                !p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with('.'))
            })
            .collect();
        files.sort();
        for file in files {
            let text = fs::read_to_string(&file).map_err(|source| LoadError::Io {
                path: file.display().to_string(),
                source,
            })?;
            let (parsed, mut warn) =
                parse_profiles_with(&text, &file.display().to_string(), &resolver, options)?;
            warnings.append(&mut warn);
            set.merge(parsed)
                .map_err(|e| LoadError::Merge(e.to_string()))?;
        }
    }
    Ok((set, warnings))
}

/// Loads a single profile file against a resolver.
pub fn load_profile_file(
    path: &Path,
    resolver: &IncludeResolver,
    options: ParseOptions,
) -> Result<(ProfileSet, Vec<ParseWarning>), LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_profiles_with(
        &text,
        &path.display().to_string(),
        resolver,
        options,
    )?)
}

// ---------------------------------------------------------------------------
// Lexing: physical lines to logical items.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum ItemKind {
    /// Tokens up to and including a standalone `{`.
    Header,
    /// A standalone `}`.
    Close,
    /// Anything else: rule, capability, include, variable definition.
    Plain,
}

#[derive(Debug, Clone)]
struct Item {
    line: usize,
    column: usize,
    text: String,
    kind: ItemKind,
}

/// Splits physical lines into logical items. A `{` or `}` that stands alone
/// as a whitespace-delimited token opens or closes a block; pattern braces
/// like `lib{,32,64}` are never token-separated so they pass through. Plain
/// segments are further split at top-level commas, which lets a whole
/// profile appear on one line.
fn lex(text: &str) -> Vec<Item> {
    let mut items = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw_line);
        let mut current: Vec<(usize, &str)> = Vec::new();
        for (col, token) in tokens_with_columns(line) {
            match token {
                "{" => {
                    let start = current.first().map(|&(c, _)| c).unwrap_or(col);
                    let mut text: String = current
                        .iter()
                        .map(|&(_, t)| t)
                        .collect::<Vec<_>>()
                        .join(" ");
                    current.clear();
                    if !text.is_empty() {
                        text.push(' ');
                    }
                    text.push('{');
                    items.push(Item {
                        line: line_no,
                        column: start,
                        text,
                        kind: ItemKind::Header,
                    });
                }
                "}" => {
                    flush_plain(&mut items, &mut current, line_no);
                    items.push(Item {
                        line: line_no,
                        column: col,
                        text: "}".to_string(),
                        kind: ItemKind::Close,
                    });
                }
                _ => current.push((col, token)),
            }
        }
        flush_plain(&mut items, &mut current, line_no);
    }
    items
}

fn strip_comment(line: &str) -> &str {
    if line.trim_start().starts_with("#include") {
        return line;
    }
    match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn tokens_with_columns(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s + 1, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &line[s..]));
    }
    out
}

/// Emits accumulated tokens as Plain items, one per top-level comma.
fn flush_plain(items: &mut Vec<Item>, current: &mut Vec<(usize, &str)>, line_no: usize) {
    if current.is_empty() {
        return;
    }
    let column = current[0].0;
    let joined = current
        .iter()
        .map(|&(_, t)| t)
        .collect::<Vec<_>>()
        .join(" ");
    current.clear();
    for piece in split_at_toplevel_commas(&joined) {
        let trimmed = piece.trim();
        if trimmed.is_empty() {
            continue;
        }
        items.push(Item {
            line: line_no,
            column,
            text: trimmed.to_string(),
            kind: ItemKind::Plain,
        });
    }
}

/// Splits `a r, b w,` into `a r,` and `b w,`, leaving commas inside brace
/// groups and character classes untouched.
fn split_at_toplevel_commas(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut in_class = false;
    let mut current = String::new();
    for c in text.chars() {
        match c {
            '[' if !in_class => in_class = true,
            ']' if in_class => in_class = false,
            '{' if !in_class => depth += 1,
            '}' if !in_class => depth = depth.saturating_sub(1),
            _ => {}
        }
        current.push(c);
        if c == ',' && depth == 0 && !in_class {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.trim().is_empty() {
        out.push(current);
    }
    out
}

// ---------------------------------------------------------------------------
// Parsing proper.
// ---------------------------------------------------------------------------

const MAX_INCLUDE_DEPTH: usize = 32;

struct Parser<'a> {
    resolver: &'a IncludeResolver,
    options: ParseOptions,
    warnings: Vec<ParseWarning>,
    variables: VariableTable,
    /// Finished profiles with the line of their header, in source order.
    profiles: Vec<(Profile, usize)>,
    depth: usize,
}

impl Parser<'_> {
    fn parse_top_level(&mut self, text: &str, file: &str) -> Result<(), ParseError> {
        let items = lex(text);
        let mut iter = items.into_iter().peekable();
        while let Some(item) = iter.next() {
            match item.kind {
                ItemKind::Plain => self.top_level_plain(&item, file)?,
                ItemKind::Header => {
                    let (profile, header_line) = self.parse_block(&item, &mut iter, file, false)?;
                    self.profiles.push((profile, header_line));
                }
                ItemKind::Close => {
                    return Err(ParseError::new(
                        file,
                        item.line,
                        item.column,
                        "unbalanced '}' at top level",
                    ));
                }
            }
        }
        Ok(())
    }

    fn top_level_plain(&mut self, item: &Item, file: &str) -> Result<(), ParseError> {
        if let Some(target) = parse_include(&item.text) {
            return self.include_top_level(target, item, file);
        }
        if item.text.starts_with("@{") {
            return self.parse_variable_definition(item, file);
        }
        Err(ParseError::new(
            file,
            item.line,
            item.column,
            format!(
                "unrecognized top-level construct '{}': expected a profile block, \
                 '#include <...>' or a variable definition",
                item.text
            ),
        ))
    }

    fn parse_variable_definition(&mut self, item: &Item, file: &str) -> Result<(), ParseError> {
        let Some(eq) = item.text.find('=') else {
            return Err(ParseError::new(
                file,
                item.line,
                item.column,
                format!("expected '=' in variable definition '{}'", item.text),
            ));
        };
        let (head, tail) = item.text.split_at(eq);
        let head = head.trim();
        if !(head.starts_with("@{") && head.ends_with('}')) {
            return Err(ParseError::new(
                file,
                item.line,
                item.column,
                format!("malformed variable name '{head}'"),
            ));
        }
        let name = &head[2..head.len() - 1];
        if name.is_empty() {
            return Err(ParseError::new(
                file,
                item.line,
                item.column,
                "empty variable name",
            ));
        }
        let values: Vec<String> = tail[1..].split_whitespace().map(str::to_string).collect();
        if values.is_empty() {
            return Err(ParseError::new(
                file,
                item.line,
                item.column,
                format!("variable @{{{name}}} has no values"),
            ));
        }
        self.variables.define(name, values);
        Ok(())
    }

    fn include_top_level(
        &mut self,
        target: &str,
        item: &Item,
        file: &str,
    ) -> Result<(), ParseError> {
        let Some((display, content)) = self.resolver.resolve(target) else {
            return self.unresolved_include(target, item, file);
        };
        if self.depth >= MAX_INCLUDE_DEPTH {
            return Err(ParseError::new(
                file,
                item.line,
                item.column,
                format!("include depth exceeded at <{target}>"),
            ));
        }
        self.depth += 1;
        let result = self.parse_top_level(&content, &display);
        self.depth -= 1;
        result
    }

    fn unresolved_include(
        &mut self,
        target: &str,
        item: &Item,
        file: &str,
    ) -> Result<(), ParseError> {
        if self.options.strict_includes {
            Err(ParseError::new(
                file,
                item.line,
                item.column,
                format!("unresolved include <{target}>"),
            ))
        } else {
            self.warnings.push(ParseWarning {
                file: file.to_string(),
                line: item.line,
                message: format!("unresolved include <{target}>"),
            });
            Ok(())
        }
    }

    /// Parses a `... {` block: a profile at top level, a hat inside one.
    fn parse_block(
        &mut self,
        header: &Item,
        iter: &mut std::iter::Peekable<std::vec::IntoIter<Item>>,
        file: &str,
        inside_profile: bool,
    ) -> Result<(Profile, usize), ParseError> {
        let (identity, mode) = self.parse_header(header, file, inside_profile)?;
        let mut profile = Profile::new(identity);
        profile.mode = mode;

        loop {
            let Some(item) = iter.next() else {
                return Err(ParseError::new(
                    file,
                    header.line,
                    header.column,
                    "unbalanced braces: block opened here is never closed",
                ));
            };
            match item.kind {
                ItemKind::Close => return Ok((profile, header.line)),
                ItemKind::Header => {
                    if inside_profile {
                        return Err(ParseError::new(
                            file,
                            item.line,
                            item.column,
                            "nested blocks inside a hat are not allowed",
                        ));
                    }
                    let (hat, hat_line) = self.parse_block(&item, iter, file, true)?;
                    let name = hat.name().to_string();
                    if profile.hats.insert(name.clone(), hat).is_some() {
                        return Err(ParseError::new(
                            file,
                            hat_line,
                            item.column,
                            format!("duplicate hat '^{name}'"),
                        ));
                    }
                }
                ItemKind::Plain => self.body_item(&mut profile, &item, file)?,
            }
        }
    }

    fn parse_header(
        &self,
        header: &Item,
        file: &str,
        inside_profile: bool,
    ) -> Result<(ProfileIdentity, ProfileMode), ParseError> {
        let tokens: Vec<&str> = header.text.split_whitespace().collect();
        debug_assert_eq!(tokens.last(), Some(&"{"));
        let tokens = &tokens[..tokens.len() - 1];

        let err = |msg: String| ParseError::new(file, header.line, header.column, msg);

        let (name_tokens, mode) = match tokens.last() {
            Some(t) if t.starts_with("flags=(") && t.ends_with(')') => {
                let flag = &t["flags=(".len()..t.len() - 1];
                let mode = ProfileMode::from_name(flag)
                    .ok_or_else(|| err(format!("unknown profile flag '{flag}'")))?;
                (&tokens[..tokens.len() - 1], mode)
            }
            _ => (tokens, ProfileMode::Enforce),
        };

        if inside_profile {
            let [name] = name_tokens else {
                return Err(err(format!("malformed hat header '{}'", header.text)));
            };
            let Some(hat) = name.strip_prefix('^') else {
                return Err(err(format!(
                    "expected '^name {{' for a hat, found '{}'",
                    header.text
                )));
            };
            if hat.is_empty() {
                return Err(err("empty hat name".to_string()));
            }
            return Ok((ProfileIdentity::Named(hat.to_string()), mode));
        }

        match name_tokens {
            ["profile", name] => Ok((ProfileIdentity::Named(name.to_string()), mode)),
            [path] if path.starts_with('/') => {
                Ok((ProfileIdentity::Attached(path.to_string()), mode))
            }
            _ => Err(err(format!(
                "malformed profile header '{}': expected 'profile NAME {{' or '/path {{'",
                header.text
            ))),
        }
    }

    fn body_item(
        &mut self,
        profile: &mut Profile,
        item: &Item,
        file: &str,
    ) -> Result<(), ParseError> {
        // Variable definitions are file-scoped wherever they appear, so an
        // included tunables file behaves the same at top level and inside a
        // profile body.
        if item.text.starts_with("@{") && !item.text.ends_with(',') {
            return self.parse_variable_definition(item, file);
        }
        if let Some(target) = parse_include(&item.text) {
            profile.includes.push(target.to_string());
            let Some((display, content)) = self.resolver.resolve(target) else {
                return self.unresolved_include(target, item, file);
            };
            if self.depth >= MAX_INCLUDE_DEPTH {
                return Err(ParseError::new(
                    file,
                    item.line,
                    item.column,
                    format!("include depth exceeded at <{target}>"),
                ));
            }
            self.depth += 1;
            let result = self.parse_body_include(profile, &content, &display);
            self.depth -= 1;
            return result;
        }

        let Some(body) = item.text.strip_suffix(',') else {
            return Err(ParseError::new(
                file,
                item.line,
                item.column,
                format!("missing trailing ',' after '{}'", item.text),
            ));
        };
        let tokens: Vec<&str> = body.split_whitespace().collect();
        match tokens.as_slice() {
            ["capability", name] => {
                let cap = CapabilityRule::new(name)
                    .map_err(|e| ParseError::new(file, item.line, item.column, e.to_string()))?;
                profile.capabilities.push(cap);
                Ok(())
            }
            ["change_profile", "->", target] => {
                profile.transitions.push(target.to_string());
                Ok(())
            }
            [pattern_src, modes_src] => {
                let modes = AccessModeSet::parse(modes_src).map_err(|e| {
                    let column = match &e {
                        ModeError::UnknownMode(c) => {
                            let base = item.text.rfind(modes_src).unwrap_or(0);
                            let offset = modes_src.find(*c).unwrap_or(0);
                            item.column + base + offset
                        }
                        _ => item.column,
                    };
                    ParseError::new(file, item.line, column, e.to_string())
                })?;
                let pattern = compile_pattern(pattern_src, &self.variables)
                    .map_err(|e| ParseError::new(file, item.line, item.column, e.to_string()))?;
                profile.rules.push(FileRule::new(pattern, modes));
                Ok(())
            }
            _ => Err(ParseError::new(
                file,
                item.line,
                item.column,
                format!(
                    "malformed rule '{}': expected '<pattern> <modes>,'",
                    item.text
                ),
            )),
        }
    }

    /// Inlines an included file into a profile body. The included content is
    /// body material: rules, capabilities, nothing block-structured.
    fn parse_body_include(
        &mut self,
        profile: &mut Profile,
        content: &str,
        file: &str,
    ) -> Result<(), ParseError> {
        for item in lex(content) {
            match item.kind {
                ItemKind::Plain => self.body_item(profile, &item, file)?,
                _ => {
                    return Err(ParseError::new(
                        file,
                        item.line,
                        item.column,
                        "block structure is not allowed inside an included abstraction",
                    ));
                }
            }
        }
        Ok(())
    }
}

fn parse_include(text: &str) -> Option<&str> {
    let rest = text.strip_prefix("#include")?.trim_start();
    let rest = rest.strip_prefix('<')?;
    rest.strip_suffix('>')
}

#[cfg(test)]
mod tests;
