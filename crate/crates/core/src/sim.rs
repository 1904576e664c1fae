//! Deterministic stand-in for containers, seccomp and the sanitizer oracle.
//!
//! A service is a table of request handlers, each a fixed syscall trace.
//! Running a request walks its trace against a policy on a virtual clock.
//! Nothing here touches real processes or wall-clock time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::SyscallId;
use crate::policy::SyscallPolicy;

pub type RequestKey = String;

/// Response token for keys the service has no handler for.
pub const UNKNOWN_REQUEST_RESPONSE: &str = "error:unknown-request";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("service {service:?}: {msg}")]
    Invalid { service: String, msg: String },
    #[error("scenario declares no services")]
    Empty,
    #[error("no service named {0:?}")]
    NoSuchService(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub base_request_ms: f64,
    pub production_per_syscall_ms: f64,
    pub oracle_slowdown_factor: f64,
    pub restart_ms: f64,
}

impl CostModel {
    pub fn oracle_per_syscall_ms(&self) -> f64 {
        self.production_per_syscall_ms * self.oracle_slowdown_factor
    }

    fn validate(&self) -> Result<(), String> {
        let finite = [
            self.base_request_ms,
            self.production_per_syscall_ms,
            self.oracle_slowdown_factor,
            self.restart_ms,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err("cost model values must be finite".into());
        }
        if self.base_request_ms < 0.0 {
            return Err("base_request_ms must be non-negative".into());
        }
        if self.production_per_syscall_ms <= 0.0 {
            return Err("production_per_syscall_ms must be positive".into());
        }
        if self.oracle_slowdown_factor <= 1.0 {
            return Err("oracle_slowdown_factor must exceed 1".into());
        }
        if self.restart_ms <= 0.0 {
            return Err("restart_ms must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExploitKind {
    /// Memory corruption the sanitizer catches.
    OracleDetectable,
    /// Logic bug or misconfiguration the sanitizer cannot see.
    OracleUndetectable,
}

/// An exploit riding on a request. The injected syscalls run right after
/// the first `corruption_index` trace entries, then the rest of the trace
/// continues.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploitSpec {
    pub kind: ExploitKind,
    pub corruption_index: usize,
    pub injected: Vec<SyscallId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestBehavior {
    pub trace: Vec<SyscallId>,
    #[serde(default)]
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploit: Option<ExploitSpec>,
}

impl RequestBehavior {
    pub fn benign(trace: Vec<SyscallId>, response: impl Into<String>) -> Self {
        Self { trace, response: response.into(), exploit: None }
    }

    pub fn is_benign(&self) -> bool {
        self.exploit.is_none()
    }

    /// The syscalls the request actually issues, exploit included.
    pub fn effective_trace(&self) -> Vec<SyscallId> {
        match &self.exploit {
            None => self.trace.clone(),
            Some(x) => {
                let cut = x.corruption_index.min(self.trace.len());
                let mut out = Vec::with_capacity(self.trace.len() + x.injected.len());
                out.extend_from_slice(&self.trace[..cut]);
                out.extend_from_slice(&x.injected);
                out.extend_from_slice(&self.trace[cut..]);
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    /// Every syscall reachable in the code, exercised or not.
    pub static_universe: BTreeSet<SyscallId>,
    /// Syscalls the oracle's instrumentation issues on its own.
    #[serde(default)]
    pub oracle_extra: BTreeSet<SyscallId>,
    pub cost_model: CostModel,
    pub handlers: BTreeMap<RequestKey, RequestBehavior>,
}

impl ServiceSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |msg: String| ScenarioError::Invalid { service: self.name.clone(), msg };
        if self.name.is_empty() {
            return Err(invalid("empty service name".into()));
        }
        self.cost_model.validate().map_err(invalid)?;
        for (key, h) in &self.handlers {
            if let Some(s) = h.trace.iter().find(|s| !self.static_universe.contains(*s)) {
                return Err(invalid(format!("handler {key:?} uses {s} outside static_universe")));
            }
            if let Some(x) = &h.exploit {
                if x.corruption_index > h.trace.len() {
                    return Err(invalid(format!(
                        "handler {key:?} corruption_index {} beyond trace length {}",
                        x.corruption_index,
                        h.trace.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn handler(&self, key: &str) -> Option<&RequestBehavior> {
        self.handlers.get(key)
    }

    pub fn benign_keys(&self) -> Vec<RequestKey> {
        self.handlers.iter().filter(|(_, h)| h.is_benign()).map(|(k, _)| k.clone()).collect()
    }

    /// Every syscall the spec mentions anywhere.
    pub fn all_syscalls(&self) -> BTreeSet<SyscallId> {
        let mut all = self.static_universe.clone();
        all.extend(self.oracle_extra.iter().cloned());
        for h in self.handlers.values() {
            all.extend(h.effective_trace());
        }
        all
    }
}

pub fn static_universe_of(spec: &ServiceSpec) -> &BTreeSet<SyscallId> {
    &spec.static_universe
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub services: Vec<ServiceSpec>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.services.is_empty() {
            return Err(ScenarioError::Empty);
        }
        let mut names = BTreeSet::new();
        for s in &self.services {
            s.validate()?;
            if !names.insert(s.name.as_str()) {
                return Err(ScenarioError::Invalid { service: s.name.clone(), msg: "duplicate service name".into() });
            }
        }
        Ok(())
    }

    /// Looks up a service by name, or the first one when `name` is `None`.
    pub fn service(&self, name: Option<&str>) -> Result<&ServiceSpec, ScenarioError> {
        match name {
            None => self.services.first().ok_or(ScenarioError::Empty),
            Some(n) => self
                .services
                .iter()
                .find(|s| s.name == n)
                .ok_or_else(|| ScenarioError::NoSuchService(n.to_string())),
        }
    }
}

/// Simulated milliseconds since session start.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VirtualClock {
    now_ms: f64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now_ms
    }

    pub fn advance(&mut self, ms: f64) {
        debug_assert!(ms >= 0.0);
        self.now_ms += ms;
    }
}

/// How a production container run ends.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExitReason {
    Completed { response: String },
    PolicyViolation { syscall: SyscallId, at_index: usize },
    ExploitDetected { report: String },
    WatchdogTimeout,
    DeniedSyscallHit { syscall: SyscallId, at_index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductionRun {
    pub exit: ExitReason,
    pub elapsed_ms: f64,
    /// Syscalls that ran to completion, in order.
    pub executed: Vec<SyscallId>,
}

/// Runs `key` on the uninstrumented service under `policy`.
///
/// The first syscall outside the allow-list kills the run; corruption goes
/// unnoticed. Advances `clock` by the elapsed time.
pub fn run_production(
    spec: &ServiceSpec,
    policy: &SyscallPolicy,
    key: &str,
    clock: &mut VirtualClock,
) -> ProductionRun {
    let cost = &spec.cost_model;
    let Some(handler) = spec.handler(key) else {
        clock.advance(cost.base_request_ms);
        return ProductionRun {
            exit: ExitReason::Completed { response: UNKNOWN_REQUEST_RESPONSE.to_string() },
            elapsed_ms: cost.base_request_ms,
            executed: Vec::new(),
        };
    };
    let trace = handler.effective_trace();
    let mut executed = Vec::with_capacity(trace.len());
    let mut exit = None;
    for (at_index, s) in trace.iter().enumerate() {
        if !policy.allows(s.as_str()) {
            let syscall = s.clone();
            exit = Some(if policy.denies(s.as_str()) {
                ExitReason::DeniedSyscallHit { syscall, at_index }
            } else {
                ExitReason::PolicyViolation { syscall, at_index }
            });
            break;
        }
        executed.push(s.clone());
    }
    let elapsed_ms = cost.base_request_ms + cost.production_per_syscall_ms * executed.len() as f64;
    clock.advance(elapsed_ms);
    ProductionRun {
        exit: exit.unwrap_or_else(|| ExitReason::Completed { response: handler.response.clone() }),
        elapsed_ms,
        executed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleOutcome {
    Benign { observed: BTreeSet<SyscallId> },
    Malicious { report: String },
    WatchdogTimeout { observed: BTreeSet<SyscallId> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub outcome: OracleOutcome,
    pub elapsed_ms: f64,
    pub executed: Vec<SyscallId>,
    /// Observed syscalls outside the policy the oracle was started with.
    pub new_syscalls: BTreeSet<SyscallId>,
}

/// Runs `key` on the hardened replica in log-all mode.
///
/// Detectable corruption aborts the run before any injected syscall. The
/// instrumentation's own syscalls are observed at start-up, except denied
/// ones, which the oracle attributes to itself. The watchdog is checked
/// between syscalls; on expiry the run reports what it saw so far and
/// `elapsed_ms == watchdog_ms`.
pub fn run_oracle(
    spec: &ServiceSpec,
    policy: &SyscallPolicy,
    key: &str,
    clock: &mut VirtualClock,
    watchdog_ms: f64,
) -> OracleRun {
    let cost = &spec.cost_model;
    let per = cost.oracle_per_syscall_ms();
    let mut observed: BTreeSet<SyscallId> =
        spec.oracle_extra.iter().filter(|s| !policy.denies(s.as_str())).cloned().collect();
    let mut executed = Vec::new();

    let finish = |outcome: OracleOutcome, elapsed_ms: f64, executed: Vec<SyscallId>, clock: &mut VirtualClock| {
        clock.advance(elapsed_ms);
        let seen = match &outcome {
            OracleOutcome::Benign { observed } | OracleOutcome::WatchdogTimeout { observed } => observed.clone(),
            OracleOutcome::Malicious { .. } => executed.iter().cloned().collect(),
        };
        let new_syscalls = seen.into_iter().filter(|s| !policy.allows(s.as_str())).collect();
        OracleRun { outcome, elapsed_ms, executed, new_syscalls }
    };

    if cost.base_request_ms > watchdog_ms {
        return finish(OracleOutcome::WatchdogTimeout { observed }, watchdog_ms, executed, clock);
    }
    let mut elapsed = cost.base_request_ms;

    let Some(handler) = spec.handler(key) else {
        return finish(OracleOutcome::Benign { observed }, elapsed, executed, clock);
    };

    let (trace, detect_at) = match &handler.exploit {
        Some(x) if x.kind == ExploitKind::OracleDetectable => {
            (handler.trace.clone(), Some(x.corruption_index.min(handler.trace.len())))
        }
        _ => (handler.effective_trace(), None),
    };

    for (i, s) in trace.iter().enumerate() {
        if detect_at == Some(i) {
            break;
        }
        if elapsed + per > watchdog_ms {
            return finish(OracleOutcome::WatchdogTimeout { observed }, watchdog_ms, executed, clock);
        }
        elapsed += per;
        observed.insert(s.clone());
        executed.push(s.clone());
    }

    if let Some(at) = detect_at {
        let report = format!(
            "{}: memory corruption in handler {key:?} after {at} syscalls",
            spec.name
        );
        return finish(OracleOutcome::Malicious { report }, elapsed, executed, clock);
    }
    finish(OracleOutcome::Benign { observed }, elapsed, executed, clock)
}
