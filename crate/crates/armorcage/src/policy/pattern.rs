//! Path patterns and lexical path normalization.
//!
//! A pattern source looks like `/usr/lib{,32,64}/** mr`'s path part: an
//! absolute path with globs (`*`, `**`, `?`, `[...]`), one level of brace
//! alternation and `@{VAR}` references. Compilation expands variables and
//! alternations up front, so matching is a pure string operation with no
//! filesystem access.
//!
//! Glob semantics: `*` matches one or more characters excluding `/`, `**`
//! matches one or more characters including `/`, `?` matches exactly one
//! non-`/` character. A pattern with a trailing `/` only matches directory
//! paths (paths presented with a trailing `/`). In particular `/tmp/**` does
//! not match `/tmp/` itself but does match `/tmp/x/`.

use std::fmt;

use thiserror::Error;

use super::VariableTable;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PatternError {
    #[error("empty pattern")]
    Empty,
    #[error("pattern must begin with '/' or a variable reference: '{0}'")]
    NotAbsolute(String),
    #[error("unbalanced brace in '{0}'")]
    UnbalancedBrace(String),
    #[error("nested alternation in '{0}'")]
    NestedBrace(String),
    #[error("unbalanced bracket in '{0}'")]
    UnbalancedBracket(String),
    #[error("unterminated variable reference in '{0}'")]
    UnterminatedVariable(String),
    #[error("unknown variable @{{{0}}}")]
    UnknownVariable(String),
    #[error("recursive variable @{{{0}}}")]
    RecursiveVariable(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PathError {
    #[error("empty path")]
    Empty,
    #[error("relative path: '{0}'")]
    Relative(String),
    #[error("path escapes root: '{0}'")]
    EscapesRoot(String),
}

/// One matcher token of a fully expanded pattern branch.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Literal(char),
    /// `*`: one or more characters, none of them `/`.
    Star,
    /// `**`: one or more characters, `/` allowed.
    DoubleStar,
    /// `?`: exactly one non-`/` character.
    AnyChar,
    Class {
        negated: bool,
        ranges: Vec<(char, char)>,
    },
}

/// A compiled path pattern. Matching is deterministic and purely lexical:
/// the same source compiled against the same variable table always accepts
/// the same set of paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathPattern {
    source: String,
    branches: Vec<Vec<Token>>,
}

impl PathPattern {
    /// The pattern text as written, variables and braces unexpanded.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// Tests a normalized absolute path against the pattern. Any expanded
    /// branch matching means the pattern matches.
    pub fn matches(&self, path: &str) -> bool {
        let chars: Vec<char> = path.chars().collect();
        self.branches.iter().any(|b| branch_matches(b, &chars))
    }
}

impl fmt::Display for PathPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

/// Compiles a pattern source against a variable table.
///
/// Multiple expansions of a variable produce the union of matchers: the
/// pattern matches if any expansion does.
pub fn compile_pattern(source: &str, vars: &VariableTable) -> Result<PathPattern, PatternError> {
    if source.is_empty() {
        return Err(PatternError::Empty);
    }
    if !(source.starts_with('/') || source.starts_with("@{")) {
        return Err(PatternError::NotAbsolute(source.to_string()));
    }
    let mut branches = Vec::new();
    for expansion in expand_variables(source, vars, &mut Vec::new())? {
        if !expansion.starts_with('/') {
            return Err(PatternError::NotAbsolute(expansion));
        }
        for alt in expand_braces(&expansion)? {
            // An empty alternative can leave a `//` run behind; collapse it
            // like the variable seams.
            branches.push(tokenize(&collapse_slashes(&alt))?);
        }
    }
    Ok(PathPattern {
        source: source.to_string(),
        branches,
    })
}

/// Lexically normalizes a raw absolute path: collapses `//` and `/./`,
/// resolves `..` without consulting the filesystem, and preserves a single
/// trailing `/` marking a directory request.
pub fn normalize_path(raw: &str) -> Result<String, PathError> {
    if raw.is_empty() {
        return Err(PathError::Empty);
    }
    if !raw.starts_with('/') {
        return Err(PathError::Relative(raw.to_string()));
    }
    let trailing_dir = raw.ends_with('/');
    let mut segments: Vec<&str> = Vec::new();
    for segment in raw.split('/') {
        match segment {
            "" | "." => {}
            ".." => {
                if segments.pop().is_none() {
                    return Err(PathError::EscapesRoot(raw.to_string()));
                }
            }
            s => segments.push(s),
        }
    }
    if segments.is_empty() {
        return Ok("/".to_string());
    }
    let mut out = String::with_capacity(raw.len());
    out.push('/');
    out.push_str(&segments.join("/"));
    if trailing_dir {
        out.push('/');
    }
    Ok(out)
}

/// Expands `@{NAME}` references, recursively, producing the cross product
/// over multi-valued variables. `seen` guards against reference cycles.
fn expand_variables(
    source: &str,
    vars: &VariableTable,
    seen: &mut Vec<String>,
) -> Result<Vec<String>, PatternError> {
    let Some(start) = source.find("@{") else {
        return Ok(vec![source.to_string()]);
    };
    let after = &source[start + 2..];
    let Some(end) = after.find('}') else {
        return Err(PatternError::UnterminatedVariable(source.to_string()));
    };
    let name = &after[..end];
    let values = vars
        .lookup(name)
        .ok_or_else(|| PatternError::UnknownVariable(name.to_string()))?;
    if seen.iter().any(|s| s == name) {
        return Err(PatternError::RecursiveVariable(name.to_string()));
    }
    seen.push(name.to_string());
    let mut out = Vec::new();
    for value in values {
        // A variable value may itself reference other variables.
        for expanded_value in expand_variables(value, vars, seen)? {
            let replaced = format!(
                "{}{}{}",
                &source[..start],
                expanded_value,
                &after[end + 1..]
            );
            out.extend(expand_variables(&replaced, vars, seen)?);
        }
    }
    seen.pop();
    Ok(out)
}

/// Variable values like `/home/*/` followed by `/R/**` would otherwise
/// produce `//` runs; patterns never mean a literal empty segment.
fn collapse_slashes(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut prev_slash = false;
    for c in s.chars() {
        if c == '/' && prev_slash {
            continue;
        }
        prev_slash = c == '/';
        out.push(c);
    }
    out
}

/// Expands one level of `{a,b,...}` alternation. Empty alternatives are
/// allowed (`{,32,64}` matches the empty string); nesting is not.
fn expand_braces(s: &str) -> Result<Vec<String>, PatternError> {
    let chars: Vec<char> = s.chars().collect();
    let mut open = None;
    let mut in_class = false;
    for (i, &c) in chars.iter().enumerate() {
        match c {
            '[' if !in_class => in_class = true,
            ']' if in_class => in_class = false,
            '{' if !in_class => {
                open = Some(i);
                break;
            }
            '}' if !in_class => return Err(PatternError::UnbalancedBrace(s.to_string())),
            _ => {}
        }
    }
    let Some(open) = open else {
        return Ok(vec![s.to_string()]);
    };

    let mut alternatives = Vec::new();
    let mut current = String::new();
    let mut close = None;
    let mut in_class = false;
    for (i, &c) in chars.iter().enumerate().skip(open + 1) {
        match c {
            '[' if !in_class => {
                in_class = true;
                current.push(c);
            }
            ']' if in_class => {
                in_class = false;
                current.push(c);
            }
            '{' if !in_class => return Err(PatternError::NestedBrace(s.to_string())),
            '}' if !in_class => {
                close = Some(i);
                break;
            }
            ',' if !in_class => {
                alternatives.push(std::mem::take(&mut current));
            }
            _ => current.push(c),
        }
    }
    let Some(close) = close else {
        return Err(PatternError::UnbalancedBrace(s.to_string()));
    };
    alternatives.push(current);

    let prefix: String = chars[..open].iter().collect();
    let suffix: String = chars[close + 1..].iter().collect();
    let mut out = Vec::new();
    for alt in &alternatives {
        // The suffix may contain further groups; recurse on the remainder.
        for tail in expand_braces(&suffix)? {
            out.push(format!("{prefix}{alt}{tail}"));
        }
    }
    Ok(out)
}

fn tokenize(s: &str) -> Result<Vec<Token>, PatternError> {
    let chars: Vec<char> = s.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '*' => {
                let mut run = 1;
                while i + run < chars.len() && chars[i + run] == '*' {
                    run += 1;
                }
                tokens.push(if run == 1 {
                    Token::Star
                } else {
                    Token::DoubleStar
                });
                i += run;
            }
            '?' => {
                tokens.push(Token::AnyChar);
                i += 1;
            }
            '[' => {
                let (tok, next) = parse_class(&chars, i, s)?;
                tokens.push(tok);
                i = next;
            }
            ']' => return Err(PatternError::UnbalancedBracket(s.to_string())),
            c => {
                tokens.push(Token::Literal(c));
                i += 1;
            }
        }
    }
    Ok(tokens)
}

fn parse_class(chars: &[char], open: usize, source: &str) -> Result<(Token, usize), PatternError> {
    let mut i = open + 1;
    let negated = chars.get(i) == Some(&'^');
    if negated {
        i += 1;
    }
    let mut ranges = Vec::new();
    while i < chars.len() && chars[i] != ']' {
        let lo = chars[i];
        if chars.get(i + 1) == Some(&'-') && i + 2 < chars.len() && chars[i + 2] != ']' {
            ranges.push((lo, chars[i + 2]));
            i += 3;
        } else {
            ranges.push((lo, lo));
            i += 1;
        }
    }
    if i >= chars.len() || ranges.is_empty() {
        return Err(PatternError::UnbalancedBracket(source.to_string()));
    }
    Ok((Token::Class { negated, ranges }, i + 1))
}

fn class_matches(negated: bool, ranges: &[(char, char)], c: char) -> bool {
    if c == '/' {
        return false;
    }
    let hit = ranges.iter().any(|&(lo, hi)| lo <= c && c <= hi);
    hit != negated
}

/// Position-set simulation: `reach[j]` means the tokens consumed so far can
/// end exactly before character `j`.
fn branch_matches(tokens: &[Token], chars: &[char]) -> bool {
    let n = chars.len();
    let mut reach = vec![false; n + 1];
    reach[0] = true;
    for token in tokens {
        let mut next = vec![false; n + 1];
        match token {
            Token::Literal(c) => {
                for j in 0..n {
                    if reach[j] && chars[j] == *c {
                        next[j + 1] = true;
                    }
                }
            }
            Token::AnyChar => {
                for j in 0..n {
                    if reach[j] && chars[j] != '/' {
                        next[j + 1] = true;
                    }
                }
            }
            Token::Class { negated, ranges } => {
                for j in 0..n {
                    if reach[j] && class_matches(*negated, ranges, chars[j]) {
                        next[j + 1] = true;
                    }
                }
            }
            Token::Star => {
                for j in (0..n).filter(|&j| reach[j]) {
                    let mut k = j;
                    while k < n && chars[k] != '/' {
                        k += 1;
                        next[k] = true;
                    }
                }
            }
            Token::DoubleStar => {
                if let Some(first) = reach.iter().position(|&b| b) {
                    for slot in next.iter_mut().skip(first + 1) {
                        *slot = true;
                    }
                }
            }
        }
        reach = next;
        if !reach.iter().any(|&b| b) {
            return false;
        }
    }
    reach[n]
}
