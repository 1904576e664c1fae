//! The controller state machine and the session driver around it.
//!
//! [`step`] is a pure transition function. [`Session`] owns the mutable
//! pieces (current policy, log, virtual clock) and executes the actions it
//! emits: starting containers costs `restart_ms`, `UpdatePolicy` extends the
//! policy and appends to the out-of-container log.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::catalog::SyscallId;
use crate::policy::{PolicyLogEntry, PolicySource, SyscallPolicy};
use crate::sim::{
    run_oracle, run_production, ExitReason, OracleOutcome, RequestKey, ServiceSpec, VirtualClock,
};
use crate::workload::{send_with_retry, AttemptResult, LatencyRecord, Request, RequestTarget, RetryError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// The oracle handles the retried request, reports, and exits.
    #[default]
    SingleRequest,
    /// The oracle keeps serving until its watchdog expires.
    UntilWatchdog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub oracle_mode: OracleMode,
    pub watchdog_ms: f64,
    pub deny: BTreeSet<SyscallId>,
    pub pretrain_requests: Vec<RequestKey>,
    pub max_attempts: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            oracle_mode: OracleMode::SingleRequest,
            watchdog_ms: 10_000.0,
            deny: BTreeSet::new(),
            pretrain_requests: Vec::new(),
            max_attempts: crate::workload::DEFAULT_MAX_ATTEMPTS,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.watchdog_ms.is_nan() || self.watchdog_ms <= 0.0 {
            return Err(ControllerError::Config("watchdog_ms must be positive".into()));
        }
        if self.max_attempts == 0 {
            return Err(ControllerError::Config("max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("illegal transition: {event} while {state}")]
    IllegalTransition { state: String, event: String },
    #[error("state epoch {state} does not match policy epoch {policy}")]
    EpochMismatch { state: u64, policy: u64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("pretraining set contains exploit request {0:?}")]
    ExploitInPretrainSet(String),
    #[error("controller is halted")]
    Halted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ControllerState {
    ProductionRunning { epoch: u64 },
    OracleRunning { epoch: u64, oracle_started_ms: f64, requests_served: u32 },
    Halted { reason: String },
}

impl ControllerState {
    pub fn epoch(&self) -> Option<u64> {
        match self {
            ControllerState::ProductionRunning { epoch } | ControllerState::OracleRunning { epoch, .. } => Some(*epoch),
            ControllerState::Halted { .. } => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ControllerState::ProductionRunning { .. } => "production",
            ControllerState::OracleRunning { .. } => "oracle",
            ControllerState::Halted { .. } => "halted",
        }
    }
}

impl fmt::Display for ControllerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerEvent {
    ProdExited(ExitReason),
    OracleFinished(OracleOutcome),
    WatchdogFired,
    Shutdown,
}

impl ControllerEvent {
    pub fn label(&self) -> String {
        match self {
            ControllerEvent::ProdExited(r) => match r {
                ExitReason::Completed { .. } => "prod_exited:completed".into(),
                ExitReason::PolicyViolation { syscall, .. } => format!("prod_exited:violation:{syscall}"),
                ExitReason::DeniedSyscallHit { syscall, .. } => format!("prod_exited:denied:{syscall}"),
                ExitReason::ExploitDetected { .. } => "prod_exited:exploit_detected".into(),
                ExitReason::WatchdogTimeout => "prod_exited:watchdog".into(),
            },
            ControllerEvent::OracleFinished(o) => match o {
                OracleOutcome::Benign { .. } => "oracle_finished:benign".into(),
                OracleOutcome::Malicious { .. } => "oracle_finished:malicious".into(),
                OracleOutcome::WatchdogTimeout { .. } => "oracle_finished:watchdog".into(),
            },
            ControllerEvent::WatchdogFired => "watchdog_fired".into(),
            ControllerEvent::Shutdown => "shutdown".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerAction {
    StartProduction { policy: SyscallPolicy },
    StartOracle { policy: SyscallPolicy, watchdog_ms: f64 },
    UpdatePolicy { new_syscalls: BTreeSet<SyscallId> },
    RaiseAlert { report: String },
    LogEvent { text: String },
}

impl ControllerAction {
    pub fn label(&self) -> String {
        match self {
            ControllerAction::StartProduction { policy } => format!("start_production@{}", policy.epoch()),
            ControllerAction::StartOracle { policy, .. } => format!("start_oracle@{}", policy.epoch()),
            ControllerAction::UpdatePolicy { new_syscalls } => format!(
                "update_policy:{}",
                new_syscalls.iter().map(SyscallId::as_str).collect::<Vec<_>>().join("+")
            ),
            ControllerAction::RaiseAlert { .. } => "raise_alert".into(),
            ControllerAction::LogEvent { .. } => "log".into(),
        }
    }
}

/// Read-only inputs to a transition besides state and event.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    /// Policy the running container was started with.
    pub policy: &'a SyscallPolicy,
    pub now_ms: f64,
}

pub type Transition = (ControllerState, Vec<ControllerAction>);

/// Pure transition function of the controller.
pub fn step(
    state: &ControllerState,
    event: &ControllerEvent,
    ctx: StepContext<'_>,
    config: &ControllerConfig,
) -> Result<Transition, ControllerError> {
    use ControllerAction as A;
    use ControllerEvent as E;
    use ControllerState as S;

    if let Some(epoch) = state.epoch() {
        if epoch != ctx.policy.epoch() {
            return Err(ControllerError::EpochMismatch { state: epoch, policy: ctx.policy.epoch() });
        }
    }
    let illegal = || ControllerError::IllegalTransition { state: state.label().into(), event: event.label() };
    let back_to_production = |mut actions: Vec<A>, policy: &SyscallPolicy| {
        actions.push(A::StartProduction { policy: policy.clone() });
        (S::ProductionRunning { epoch: policy.epoch() }, actions)
    };

    let out = match (state, event) {
        (_, E::Shutdown) => (
            S::Halted { reason: "shutdown".into() },
            vec![A::LogEvent { text: "controller shut down".into() }],
        ),
        (S::Halted { .. }, _) => return Err(illegal()),

        (S::ProductionRunning { epoch }, E::ProdExited(exit)) => match exit {
            ExitReason::Completed { .. } => (S::ProductionRunning { epoch: *epoch }, vec![]),
            ExitReason::PolicyViolation { syscall, at_index } | ExitReason::DeniedSyscallHit { syscall, at_index } => (
                S::OracleRunning { epoch: *epoch, oracle_started_ms: ctx.now_ms, requests_served: 0 },
                vec![
                    A::LogEvent { text: format!("violation: {syscall} at trace index {at_index}") },
                    A::StartOracle { policy: ctx.policy.clone(), watchdog_ms: config.watchdog_ms },
                ],
            ),
            ExitReason::ExploitDetected { .. } | ExitReason::WatchdogTimeout => return Err(illegal()),
        },

        (S::OracleRunning { oracle_started_ms, requests_served, .. }, E::OracleFinished(outcome)) => match outcome {
            OracleOutcome::Benign { observed } => {
                let new: BTreeSet<SyscallId> =
                    observed.iter().filter(|s| !ctx.policy.allows(s.as_str())).cloned().collect();
                let denied: Vec<&SyscallId> = new.iter().filter(|s| ctx.policy.denies(s.as_str())).collect();
                if !denied.is_empty() {
                    let names = denied.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",");
                    let report = format!("oracle-approved input requested denied syscalls: {names}");
                    back_to_production(vec![A::RaiseAlert { report }], ctx.policy)
                } else {
                    let mut actions = Vec::new();
                    let next = if new.is_empty() {
                        ctx.policy.clone()
                    } else {
                        let (next, _) = ctx
                            .policy
                            .extend(&new, PolicySource::Oracle, ctx.now_ms)
                            .expect("deny intersection checked above");
                        actions.push(A::UpdatePolicy { new_syscalls: new });
                        next
                    };
                    match config.oracle_mode {
                        OracleMode::SingleRequest => back_to_production(actions, &next),
                        OracleMode::UntilWatchdog => (
                            S::OracleRunning {
                                epoch: next.epoch(),
                                oracle_started_ms: *oracle_started_ms,
                                requests_served: requests_served + 1,
                            },
                            actions,
                        ),
                    }
                }
            }
            OracleOutcome::Malicious { report } => {
                back_to_production(vec![A::RaiseAlert { report: report.clone() }], ctx.policy)
            }
            OracleOutcome::WatchdogTimeout { .. } => back_to_production(
                vec![A::LogEvent { text: "oracle watchdog expired mid-request".into() }],
                ctx.policy,
            ),
        },
        (S::OracleRunning { .. }, E::WatchdogFired) => {
            back_to_production(vec![A::LogEvent { text: "oracle watchdog expired".into() }], ctx.policy)
        }
        _ => return Err(illegal()),
    };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alert {
    pub logical_id: u64,
    pub request: RequestKey,
    pub report: String,
    pub at_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionRecord {
    pub at_ms: f64,
    pub logical_id: Option<u64>,
    pub from: &'static str,
    pub event: String,
    pub to: &'static str,
    pub epoch: Option<u64>,
    pub actions: Vec<String>,
}

/// A policy update and the request that caused it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnedUpdate {
    pub epoch: u64,
    pub logical_id: u64,
    pub key: RequestKey,
    pub from_exploit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Replica {
    Production,
    Oracle,
}

/// One container run, kept for confinement checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub logical_id: u64,
    pub replica: Replica,
    pub epoch: u64,
    pub executed: Vec<SyscallId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub final_policy: SyscallPolicy,
    pub policy_log: Vec<PolicyLogEntry>,
    pub latency_records: Vec<LatencyRecord>,
    pub alerts: Vec<Alert>,
    pub transitions: Vec<TransitionRecord>,
    /// Number of oracle container starts.
    pub consultations: usize,
    pub learned: Vec<LearnedUpdate>,
    /// Logical ids that ran out of retries.
    pub exhausted: Vec<u64>,
    pub runs: Vec<RunRecord>,
}

impl SessionResult {
    /// Policy updates caused by exploit-carrying requests.
    pub fn exploit_sourced_updates(&self) -> impl Iterator<Item = &LearnedUpdate> {
        self.learned.iter().filter(|u| u.from_exploit)
    }

    /// The session report as pretty-printed JSON.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct AlertView<'a> {
            request: &'a str,
            report: &'a str,
            at_ms: f64,
        }
        #[derive(Serialize)]
        struct Report<'a> {
            final_policy: &'a SyscallPolicy,
            alerts: Vec<AlertView<'a>>,
            transitions: &'a [TransitionRecord],
            consultations: usize,
        }
        let report = Report {
            final_policy: &self.final_policy,
            alerts: self
                .alerts
                .iter()
                .map(|a| AlertView { request: &a.request, report: &a.report, at_ms: a.at_ms })
                .collect(),
            transitions: &self.transitions,
            consultations: self.consultations,
        };
        let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Drives one service through the controller on a virtual timeline.
pub struct Session<'a> {
    spec: &'a ServiceSpec,
    config: &'a ControllerConfig,
    policy: SyscallPolicy,
    state: ControllerState,
    clock: VirtualClock,
    log: Vec<PolicyLogEntry>,
    alerts: Vec<Alert>,
    transitions: Vec<TransitionRecord>,
    consultations: usize,
    learned: Vec<LearnedUpdate>,
    runs: Vec<RunRecord>,
}

impl<'a> Session<'a> {
    pub fn new(spec: &'a ServiceSpec, config: &'a ControllerConfig, policy: SyscallPolicy) -> Self {
        Self {
            spec,
            config,
            state: ControllerState::ProductionRunning { epoch: policy.epoch() },
            policy,
            clock: VirtualClock::new(),
            log: Vec::new(),
            alerts: Vec::new(),
            transitions: Vec::new(),
            consultations: 0,
            learned: Vec::new(),
            runs: Vec::new(),
        }
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn policy(&self) -> &SyscallPolicy {
        &self.policy
    }

    fn is_exploit(&self, key: &str) -> bool {
        self.spec.handler(key).is_some_and(|h| h.exploit.is_some())
    }

    /// Applies one event and executes the resulting actions. Returns the
    /// alert time if an alert was raised.
    fn fire(&mut self, event: ControllerEvent, request: Option<&Request>) -> Result<Option<f64>, ControllerError> {
        let ctx = StepContext { policy: &self.policy, now_ms: self.clock.now() };
        let (next, actions) = step(&self.state, &event, ctx, self.config)?;
        let from = self.state.label();
        let now = self.clock.now();
        let mut alert_at = None;
        for action in &actions {
            match action {
                ControllerAction::UpdatePolicy { new_syscalls } => {
                    let (p, entry) = self
                        .policy
                        .extend(new_syscalls, PolicySource::Oracle, now)
                        .expect("step only emits updates the policy accepts");
                    self.policy = p;
                    if let (Some(entry), Some(req)) = (entry, request) {
                        self.learned.push(LearnedUpdate {
                            epoch: entry.epoch,
                            logical_id: req.logical_id,
                            key: req.key.clone(),
                            from_exploit: self.is_exploit(&req.key),
                        });
                        self.log.push(entry);
                    }
                }
                ControllerAction::RaiseAlert { report } => {
                    let (logical_id, key) = request.map(|r| (r.logical_id, r.key.clone())).unwrap_or_default();
                    self.alerts.push(Alert { logical_id, request: key, report: report.clone(), at_ms: now });
                    alert_at = Some(now);
                }
                ControllerAction::StartOracle { .. } => {
                    self.consultations += 1;
                    self.clock.advance(self.spec.cost_model.restart_ms);
                }
                ControllerAction::StartProduction { policy } => {
                    debug_assert_eq!(policy, &self.policy);
                    self.clock.advance(self.spec.cost_model.restart_ms);
                }
                ControllerAction::LogEvent { .. } => {}
            }
        }
        self.transitions.push(TransitionRecord {
            at_ms: now,
            logical_id: request.map(|r| r.logical_id),
            from,
            event: event.label(),
            to: next.label(),
            epoch: next.epoch(),
            actions: actions.iter().map(ControllerAction::label).collect(),
        });
        self.state = next;
        Ok(alert_at)
    }

    pub fn shutdown(&mut self) -> Result<(), ControllerError> {
        self.fire(ControllerEvent::Shutdown, None).map(|_| ())
    }

    pub fn finish(self, latency_records: Vec<LatencyRecord>, exhausted: Vec<u64>) -> SessionResult {
        SessionResult {
            final_policy: self.policy,
            policy_log: self.log,
            latency_records,
            alerts: self.alerts,
            transitions: self.transitions,
            consultations: self.consultations,
            learned: self.learned,
            exhausted,
            runs: self.runs,
        }
    }
}

impl RequestTarget for Session<'_> {
    type Error = ControllerError;

    fn now_ms(&self) -> f64 {
        self.clock.now()
    }

    fn attempt(&mut self, request: &Request) -> Result<AttemptResult, ControllerError> {
        loop {
            match self.state.clone() {
                ControllerState::Halted { .. } => return Err(ControllerError::Halted),
                ControllerState::ProductionRunning { epoch } => {
                    let run = run_production(self.spec, &self.policy, &request.key, &mut self.clock);
                    self.runs.push(RunRecord {
                        logical_id: request.logical_id,
                        replica: Replica::Production,
                        epoch,
                        executed: run.executed,
                    });
                    let served = matches!(run.exit, ExitReason::Completed { .. });
                    self.fire(ControllerEvent::ProdExited(run.exit), Some(request))?;
                    return Ok(if served { AttemptResult::Served } else { AttemptResult::Dropped });
                }
                ControllerState::OracleRunning { epoch, oracle_started_ms, .. } => {
                    let remaining = self.config.watchdog_ms - (self.clock.now() - oracle_started_ms);
                    if remaining <= 0.0 {
                        self.fire(ControllerEvent::WatchdogFired, Some(request))?;
                        continue;
                    }
                    let run = run_oracle(self.spec, &self.policy, &request.key, &mut self.clock, remaining);
                    self.runs.push(RunRecord {
                        logical_id: request.logical_id,
                        replica: Replica::Oracle,
                        epoch,
                        executed: run.executed,
                    });
                    let timed_out = matches!(run.outcome, OracleOutcome::WatchdogTimeout { .. });
                    let alert = self.fire(ControllerEvent::OracleFinished(run.outcome), Some(request))?;
                    return Ok(match alert {
                        Some(at_ms) => AttemptResult::Rejected { at_ms },
                        None if timed_out => AttemptResult::Dropped,
                        None => AttemptResult::Served,
                    });
                }
            }
        }
    }
}

fn drive(
    session: &mut Session<'_>,
    workload: &[Request],
    max_attempts: u32,
) -> Result<(Vec<LatencyRecord>, Vec<u64>), ControllerError> {
    let mut records = Vec::with_capacity(workload.len());
    let mut exhausted = Vec::new();
    for request in workload {
        match send_with_retry(request, session, max_attempts) {
            Ok(r) => records.push(r),
            Err(RetryError::AttemptsExhausted { logical_id, .. }) => exhausted.push(logical_id),
            Err(RetryError::Target(e)) => return Err(e),
            Err(RetryError::ZeroAttempts) => {
                return Err(ControllerError::Config("max_attempts must be at least 1".into()))
            }
        }
    }
    Ok((records, exhausted))
}

/// Learns a starting policy from known-safe requests before deployment.
///
/// Log entries are marked as pretraining with timestamp 0.
pub fn pretrain(
    spec: &ServiceSpec,
    requests: &[RequestKey],
    config: &ControllerConfig,
) -> Result<(SyscallPolicy, Vec<PolicyLogEntry>), ControllerError> {
    config.validate()?;
    if let Some(bad) = requests.iter().find(|k| spec.handler(k).is_some_and(|h| h.exploit.is_some())) {
        return Err(ControllerError::ExploitInPretrainSet(bad.clone()));
    }
    let cfg = ControllerConfig { oracle_mode: OracleMode::SingleRequest, pretrain_requests: Vec::new(), ..config.clone() };
    let mut session = Session::new(spec, &cfg, SyscallPolicy::new(config.deny.clone()));
    let workload: Vec<Request> = requests
        .iter()
        .enumerate()
        .map(|(i, k)| Request { logical_id: i as u64, key: k.clone() })
        .collect();
    drive(&mut session, &workload, cfg.max_attempts)?;
    let result = session.finish(Vec::new(), Vec::new());
    let log = result
        .policy_log
        .into_iter()
        .map(|e| PolicyLogEntry { source: PolicySource::Pretrain, timestamp_ms: 0.0, ..e })
        .collect();
    Ok((result.final_policy, log))
}

/// Runs `workload` through the full learn-on-violation protocol.
pub fn run_session(
    spec: &ServiceSpec,
    workload: &[Request],
    config: &ControllerConfig,
) -> Result<SessionResult, ControllerError> {
    config.validate()?;
    if workload.is_empty() {
        return Err(ControllerError::Config("workload is empty".into()));
    }
    let (policy, log) = if config.pretrain_requests.is_empty() {
        (SyscallPolicy::new(config.deny.clone()), Vec::new())
    } else {
        pretrain(spec, &config.pretrain_requests, config)?
    };
    let mut session = Session::new(spec, config, policy);
    session.log = log;
    let (records, exhausted) = drive(&mut session, workload, config.max_attempts)?;
    Ok(session.finish(records, exhausted))
}

/// Fixed deployments the protocol is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Deployment {
    /// Production build, nothing filtered.
    Unhardened,
    /// Sanitizer build for every request, nothing filtered.
    Hardened,
}

/// Serves `workload` on a fixed deployment with an allow-everything policy.
pub fn run_fixed(spec: &ServiceSpec, workload: &[Request], deployment: Deployment) -> SessionResult {
    use crate::workload::RequestOutcome;

    let policy = SyscallPolicy::from_parts(0, spec.all_syscalls(), BTreeSet::new()).expect("deny is empty");
    let mut clock = VirtualClock::new();
    let mut records = Vec::with_capacity(workload.len());
    let mut alerts = Vec::new();
    let mut runs = Vec::with_capacity(workload.len());
    for req in workload {
        let start = clock.now();
        let (outcome, executed, replica) = match deployment {
            Deployment::Unhardened => {
                let run = run_production(spec, &policy, &req.key, &mut clock);
                (RequestOutcome::Served, run.executed, Replica::Production)
            }
            Deployment::Hardened => {
                let run = run_oracle(spec, &policy, &req.key, &mut clock, f64::INFINITY);
                let outcome = match run.outcome {
                    OracleOutcome::Malicious { report } => {
                        alerts.push(Alert { logical_id: req.logical_id, request: req.key.clone(), report, at_ms: clock.now() });
                        RequestOutcome::RejectedMalicious
                    }
                    _ => RequestOutcome::Served,
                };
                (outcome, run.executed, Replica::Oracle)
            }
        };
        runs.push(RunRecord { logical_id: req.logical_id, replica, epoch: 0, executed });
        records.push(LatencyRecord {
            logical_id: req.logical_id,
            key: req.key.clone(),
            attempts: 1,
            first_attempt_ms: start,
            completion_ms: clock.now(),
            latency_ms: clock.now() - start,
            outcome,
        });
    }
    SessionResult {
        final_policy: policy,
        policy_log: Vec::new(),
        latency_records: records,
        alerts,
        transitions: Vec::new(),
        consultations: 0,
        learned: Vec::new(),
        exhausted: Vec::new(),
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::syscall_set;
    use crate::sim::{CostModel, ExploitKind, ExploitSpec, RequestBehavior};
    use crate::workload::RequestOutcome;

    fn ids(names: &[&str]) -> Vec<SyscallId> {
        names.iter().map(|n| SyscallId::new(*n).unwrap()).collect()
    }

    fn cost() -> CostModel {
        CostModel { base_request_ms: 1.0, production_per_syscall_ms: 0.5, oracle_slowdown_factor: 3.0, restart_ms: 50.0 }
    }

    fn spec() -> ServiceSpec {
        let mut handlers = std::collections::BTreeMap::new();
        handlers.insert("get".to_string(), RequestBehavior::benign(ids(&["read", "write"]), "200"));
        handlers.insert("put".to_string(), RequestBehavior::benign(ids(&["read", "openat", "write"]), "201"));
        handlers.insert(
            "smash".to_string(),
            RequestBehavior {
                trace: ids(&["read", "write"]),
                response: "200".into(),
                exploit: Some(ExploitSpec { kind: ExploitKind::OracleDetectable, corruption_index: 1, injected: ids(&["execve"]) }),
            },
        );
        handlers.insert(
            "logic".to_string(),
            RequestBehavior {
                trace: ids(&["read"]),
                response: "200".into(),
                exploit: Some(ExploitSpec { kind: ExploitKind::OracleUndetectable, corruption_index: 1, injected: ids(&["mount"]) }),
            },
        );
        ServiceSpec {
            name: "svc".into(),
            static_universe: syscall_set(["read", "write", "openat", "shmat"]),
            oracle_extra: syscall_set(["sigaltstack"]),
            cost_model: cost(),
            handlers,
        }
    }

    fn reqs(keys: &[&str]) -> Vec<Request> {
        keys.iter().enumerate().map(|(i, k)| Request { logical_id: i as u64, key: k.to_string() }).collect()
    }

    fn ctx(p: &SyscallPolicy) -> StepContext<'_> {
        StepContext { policy: p, now_ms: 0.0 }
    }

    #[test]
    fn violation_starts_oracle() {
        let p = SyscallPolicy::new(BTreeSet::new());
        let (s, a) = step(
            &ControllerState::ProductionRunning { epoch: 0 },
            &ControllerEvent::ProdExited(ExitReason::PolicyViolation { syscall: SyscallId::new("write").unwrap(), at_index: 0 }),
            ctx(&p),
            &ControllerConfig::default(),
        )
        .unwrap();
        assert!(matches!(s, ControllerState::OracleRunning { epoch: 0, .. }));
        assert!(matches!(a.last(), Some(ControllerAction::StartOracle { .. })));
    }

    #[test]
    fn malicious_alerts_without_update() {
        let p = SyscallPolicy::new(BTreeSet::new());
        let state = ControllerState::OracleRunning { epoch: 0, oracle_started_ms: 0.0, requests_served: 0 };
        let (s, a) = step(
            &state,
            &ControllerEvent::OracleFinished(OracleOutcome::Malicious { report: "asan".into() }),
            ctx(&p),
            &ControllerConfig::default(),
        )
        .unwrap();
        assert_eq!(s, ControllerState::ProductionRunning { epoch: 0 });
        assert!(a.iter().any(|x| matches!(x, ControllerAction::RaiseAlert { .. })));
        assert!(!a.iter().any(|x| matches!(x, ControllerAction::UpdatePolicy { .. })));
    }

    #[test]
    fn watchdog_returns_to_production() {
        let p = SyscallPolicy::new(BTreeSet::new());
        let state = ControllerState::OracleRunning { epoch: 0, oracle_started_ms: 0.0, requests_served: 3 };
        let (s, a) = step(&state, &ControllerEvent::WatchdogFired, ctx(&p), &ControllerConfig::default()).unwrap();
        assert_eq!(s, ControllerState::ProductionRunning { epoch: 0 });
        assert!(matches!(a.last(), Some(ControllerAction::StartProduction { .. })));
    }

    #[test]
    fn benign_update_modes() {
        let p = SyscallPolicy::new(BTreeSet::new());
        let state = ControllerState::OracleRunning { epoch: 0, oracle_started_ms: 0.0, requests_served: 0 };
        let ev = ControllerEvent::OracleFinished(OracleOutcome::Benign { observed: syscall_set(["read"]) });
        let (s, a) = step(&state, &ev, ctx(&p), &ControllerConfig::default()).unwrap();
        assert_eq!(s, ControllerState::ProductionRunning { epoch: 1 });
        assert_eq!(a[0], ControllerAction::UpdatePolicy { new_syscalls: syscall_set(["read"]) });
        let cfg = ControllerConfig { oracle_mode: OracleMode::UntilWatchdog, ..Default::default() };
        let (s, a) = step(&state, &ev, ctx(&p), &cfg).unwrap();
        assert_eq!(s, ControllerState::OracleRunning { epoch: 1, oracle_started_ms: 0.0, requests_served: 1 });
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn illegal_pairs() {
        let p = SyscallPolicy::new(BTreeSet::new());
        let cfg = ControllerConfig::default();
        let err = step(&ControllerState::ProductionRunning { epoch: 0 }, &ControllerEvent::WatchdogFired, ctx(&p), &cfg);
        assert!(matches!(err, Err(ControllerError::IllegalTransition { .. })));
        let err = step(&ControllerState::ProductionRunning { epoch: 3 }, &ControllerEvent::Shutdown, ctx(&p), &cfg);
        assert_eq!(err, Err(ControllerError::EpochMismatch { state: 3, policy: 0 }));
    }

    #[test]
    fn single_benign_request() {
        let s = spec();
        let r = run_session(&s, &reqs(&["get"]), &ControllerConfig::default()).unwrap();
        assert_eq!(r.consultations, 1);
        assert_eq!(r.final_policy.allow_set(), &syscall_set(["read", "write", "sigaltstack"]));
        let rec = &r.latency_records[0];
        assert_eq!(rec.attempts, 2);
        // violation at index 0: base 1; restart 50; oracle 1 + 2*1.5; restart 50
        assert_eq!(rec.latency_ms, 1.0 + 50.0 + 4.0 + 50.0);
    }

    #[test]
    fn exploit_is_alerted_and_not_learned() {
        let s = spec();
        let r = run_session(&s, &reqs(&["get", "smash", "get"]), &ControllerConfig::default()).unwrap();
        assert_eq!(r.alerts.len(), 1);
        assert_eq!(r.alerts[0].request, "smash");
        assert!(!r.final_policy.allows("execve"));
        assert_eq!(r.latency_records[1].outcome, RequestOutcome::RejectedMalicious);
        assert_eq!(r.exploit_sourced_updates().count(), 0);
    }

    #[test]
    fn deny_list_blocks_logic_exploit() {
        let s = spec();
        let open = run_session(&s, &reqs(&["get", "logic"]), &ControllerConfig::default()).unwrap();
        assert!(open.final_policy.allows("mount"));
        assert_eq!(open.exploit_sourced_updates().count(), 1);
        let cfg = ControllerConfig { deny: syscall_set(["mount"]), ..Default::default() };
        let closed = run_session(&s, &reqs(&["get", "logic"]), &cfg).unwrap();
        assert!(!closed.final_policy.allows("mount"));
        assert_eq!(closed.alerts.len(), 1);
        assert_eq!(closed.exploit_sourced_updates().count(), 0);
    }

    #[test]
    fn pretrain_and_replay() {
        let s = spec();
        let cfg = ControllerConfig::default();
        let (p, log) = pretrain(&s, &[], &cfg).unwrap();
        assert_eq!(p, SyscallPolicy::new(BTreeSet::new()));
        assert!(log.is_empty());
        assert_eq!(pretrain(&s, &["smash".into()], &cfg), Err(ControllerError::ExploitInPretrainSet("smash".into())));
        let cfg = ControllerConfig { pretrain_requests: vec!["get".into(), "put".into()], ..Default::default() };
        let r = run_session(&s, &reqs(&["put", "get"]), &cfg).unwrap();
        assert_eq!(r.consultations, 0);
        assert!(r.policy_log.iter().all(|e| e.source == PolicySource::Pretrain));
        assert_eq!(SyscallPolicy::new(BTreeSet::new()).replay(&r.policy_log).unwrap(), r.final_policy);
    }

    #[test]
    fn watchdog_mode_keeps_oracle_serving() {
        let s = spec();
        let cfg = ControllerConfig { oracle_mode: OracleMode::UntilWatchdog, watchdog_ms: 100.0, ..Default::default() };
        let mut keys = vec!["get"; 15];
        keys.push("put");
        let r = run_session(&s, &reqs(&keys), &cfg).unwrap();
        // oracle serves from t=51 at 4ms per request until the 100ms watchdog
        assert_eq!(r.consultations, 2);
        assert!(r.transitions.iter().any(|t| t.event.contains("watchdog")));
        assert_eq!(r.final_policy.allow_set(), &syscall_set(["read", "write", "openat", "sigaltstack"]));
        assert!(r.exhausted.is_empty());
    }

    #[test]
    fn slow_oracle_exhausts_retries() {
        let s = spec();
        let cfg = ControllerConfig { watchdog_ms: 52.0, max_attempts: 4, ..Default::default() };
        let r = run_session(&s, &reqs(&["get"]), &cfg).unwrap();
        assert_eq!(r.exhausted, vec![0]);
        assert!(r.latency_records.is_empty());
        assert_eq!(r.policy_log.len(), 0);
    }

    #[test]
    fn shutdown_halts() {
        let s = spec();
        let cfg = ControllerConfig::default();
        let mut session = Session::new(&s, &cfg, SyscallPolicy::new(BTreeSet::new()));
        session.shutdown().unwrap();
        assert!(matches!(session.state(), ControllerState::Halted { .. }));
        let req = Request { logical_id: 0, key: "get".into() };
        assert_eq!(session.attempt(&req), Err(ControllerError::Halted));
    }

    #[test]
    fn fixed_deployments() {
        let s = spec();
        let w = reqs(&["get", "put", "smash"]);
        let un = run_fixed(&s, &w, Deployment::Unhardened);
        let hard = run_fixed(&s, &w, Deployment::Hardened);
        assert!(un.alerts.is_empty());
        assert_eq!(hard.alerts.len(), 1);
        assert_eq!(un.latency_records[0].latency_ms, 2.0);
        assert_eq!(hard.latency_records[0].latency_ms, 4.0);
    }
}
