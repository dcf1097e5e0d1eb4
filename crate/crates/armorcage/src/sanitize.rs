//! Input sanitization for data-typed parameters.
//!
//! Dynamic evaluation surfaces (formula strings, identifiers interpolated
//! into expressions) can smuggle executable code. Stripping everything
//! outside `[a-zA-Z0-9]` removes quoting, parentheses and operators, which
//! is the blunt but effective fix for parameters that are supposed to be
//! plain identifiers.

/// Removes every character outside `[a-zA-Z0-9]`. Idempotent; the output
/// is never longer than the input.
pub fn sanitize_identifier(input: &str) -> String {
    input.chars().filter(char::is_ascii_alphanumeric).collect()
}
