//! armorcage: a sandboxed-execution toolkit.
//!
//! The crate combines three layers:
//!
//! - a userspace MAC policy engine: an AppArmor-style profile language with
//!   parser, path-pattern matcher and deterministic access decisions
//!   ([`policy`], [`parser`], [`engine`]);
//! - real OS-level controls: resource limits, user/group identity and
//!   scheduling priority ([`limits`]);
//! - a fork-based supervisor that runs one job in an isolated child under a
//!   [`supervisor::SandboxSpec`], with timeout termination and result
//!   transfer, leaving the parent untouched ([`supervisor`], [`task`]).
//!
//! Complain-mode audit logging and rule suggestion live in [`audit`].

pub mod audit;
pub mod engine;
pub mod limits;
pub mod parser;
pub mod policy;
pub mod sanitize;
pub mod supervisor;
pub mod task;
