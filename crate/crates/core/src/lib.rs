//! Runtime system-call allow-list learning for containerized services.
//!
//! A fast production replica serves traffic under an immutable seccomp-style
//! allow-list. When it trips the filter it is killed, and a hardened oracle
//! replica re-executes the retried request. Syscalls observed on inputs the
//! oracle judges benign are added to the list; inputs it flags as exploits
//! raise an alert and leave the policy untouched.
//!
//! Containers, seccomp enforcement and the sanitizer oracle are simulated
//! deterministically on a virtual clock (see [`sim`]), so sessions are
//! byte-reproducible.

pub mod analysis;
pub mod attacks;
pub mod catalog;
pub mod controller;
pub mod policy;
pub mod sim;
pub mod workload;

pub use catalog::{Column, PolicyComparisonTable, SyscallId};
pub use controller::{run_session, ControllerConfig, OracleMode, SessionResult};
pub use policy::{PolicyDiff, PolicyLogEntry, PolicySource, SyscallPolicy};
pub use sim::{CostModel, Scenario, ServiceSpec};
pub use workload::{LatencyRecord, LatencyStats, Request};

/// Published policy comparison table for Nginx and ComposePost (CSV).
pub const POLICY_FIXTURE: &str = include_str!("../data/policy_comparison.csv");
