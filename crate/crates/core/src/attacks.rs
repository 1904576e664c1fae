//! The four attack categories, run against a live session.
//!
//! A category is the pair (can the oracle detect the exploit?, does the
//! exploit need a syscall the benign policy lacks?). Each exploit request in
//! a scenario is classified against the policy learned from all benign
//! handlers, then replayed inside a benign workload.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::catalog::SyscallId;
use crate::controller::{pretrain, run_session, ControllerConfig, ControllerError, Replica, SessionResult};
use crate::policy::SyscallPolicy;
use crate::sim::{ExploitKind, RequestKey, ServiceSpec};
use crate::workload::{generate_workload, uniform_benign_mix, Request};

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("scenario has no exploit of category {0}")]
    MissingCategory(AttackCategory),
    #[error("scenario has no benign handlers")]
    NoBenignTraffic,
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum AttackCategory {
    /// Detectable exploit that needs a new syscall.
    Cat1,
    /// Detectable exploit that stays inside the allow-list.
    Cat2,
    /// Undetectable exploit that stays inside the allow-list.
    Cat3,
    /// Undetectable exploit that needs a new syscall.
    Cat4,
}

impl AttackCategory {
    pub const ALL: [AttackCategory; 4] = [Self::Cat1, Self::Cat2, Self::Cat3, Self::Cat4];

    pub fn of(kind: ExploitKind, needs_new_syscall: bool) -> Self {
        match (kind, needs_new_syscall) {
            (ExploitKind::OracleDetectable, true) => Self::Cat1,
            (ExploitKind::OracleDetectable, false) => Self::Cat2,
            (ExploitKind::OracleUndetectable, false) => Self::Cat3,
            (ExploitKind::OracleUndetectable, true) => Self::Cat4,
        }
    }
}

impl fmt::Display for AttackCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match self {
            Self::Cat1 => 1,
            Self::Cat2 => 2,
            Self::Cat3 => 3,
            Self::Cat4 => 4,
        };
        write!(f, "cat{n}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Alert raised, nothing learned from the exploit.
    Blocked,
    /// No alert, but the exploit only ran already-allowed syscalls.
    Confined,
    /// The exploit got its syscalls added to the policy.
    Weakness,
    Unexpected,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Blocked => "blocked",
            Verdict::Confined => "confined",
            Verdict::Weakness => "WEAKNESS",
            Verdict::Unexpected => "UNEXPECTED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRun {
    pub category: AttackCategory,
    pub key: RequestKey,
    pub with_deny_list: bool,
    pub alerts: usize,
    pub exploit_updates: usize,
    pub policy_growth: usize,
    /// Every syscall the exploit request ran in production was allowed at the time.
    pub confined: bool,
    pub verdict: Verdict,
}

impl fmt::Display for CategoryRun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<12} deny-list={:<3} {}, {} alert{}, {} policy update{} from exploit, growth {}",
            self.category,
            self.key,
            if self.with_deny_list { "yes" } else { "no" },
            self.verdict,
            self.alerts,
            if self.alerts == 1 { "" } else { "s" },
            self.exploit_updates,
            if self.exploit_updates == 1 { "" } else { "s" },
            self.policy_growth,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub runs: Vec<CategoryRun>,
}

impl AttackReport {
    pub fn get(&self, category: AttackCategory, with_deny_list: bool) -> Option<&CategoryRun> {
        self.runs.iter().find(|r| r.category == category && r.with_deny_list == with_deny_list)
    }

    pub fn to_text(&self) -> String {
        self.runs.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Groups exploit handlers by category relative to `benign_policy`.
pub fn classify(spec: &ServiceSpec, benign_policy: &SyscallPolicy) -> BTreeMap<AttackCategory, Vec<RequestKey>> {
    let mut out: BTreeMap<AttackCategory, Vec<RequestKey>> = BTreeMap::new();
    for (key, h) in &spec.handlers {
        let Some(x) = &h.exploit else { continue };
        let needs_new = x.injected.iter().any(|s| !benign_policy.allows(s.as_str()));
        out.entry(AttackCategory::of(x.kind, needs_new)).or_default().push(key.clone());
    }
    out
}

fn policy_at_epoch(result: &SessionResult, deny: &BTreeSet<SyscallId>, epoch: u64) -> SyscallPolicy {
    let prefix: Vec<_> = result.policy_log.iter().filter(|e| e.epoch <= epoch).cloned().collect();
    SyscallPolicy::new(deny.clone()).replay(&prefix).expect("session log replays")
}

/// Runs the first exploit of each category inside seeded benign traffic.
///
/// Category 4 runs twice: once with `base_deny` as given and once with the
/// exploit's new syscalls added to the deny-list. A base deny-list that
/// already covers them makes both runs come out blocked.
pub fn run_attack_scenarios(
    spec: &ServiceSpec,
    seed: u64,
    base_deny: &BTreeSet<SyscallId>,
) -> Result<AttackReport, AttackError> {
    let benign = spec.benign_keys();
    if benign.is_empty() {
        return Err(AttackError::NoBenignTraffic);
    }
    let base_cfg = ControllerConfig { deny: base_deny.clone(), ..Default::default() };
    let (benign_policy, _) = pretrain(spec, &benign, &base_cfg)?;
    let classes = classify(spec, &benign_policy);

    let mut runs = Vec::new();
    for category in AttackCategory::ALL {
        let key = classes
            .get(&category)
            .and_then(|v| v.first())
            .ok_or(AttackError::MissingCategory(category))?;
        let variants: &[bool] = if category == AttackCategory::Cat4 { &[false, true] } else { &[false] };
        for &with_deny in variants {
            let mut deny = base_deny.clone();
            if with_deny {
                let injected = &spec.handlers[key].exploit.as_ref().expect("exploit handler").injected;
                deny.extend(injected.iter().filter(|s| !benign_policy.allows(s.as_str())).cloned());
            }
            let cfg = ControllerConfig { deny: deny.clone(), pretrain_requests: benign.clone(), ..Default::default() };
            runs.push(run_category(spec, seed, category, key, with_deny, &cfg)?);
        }
    }
    Ok(AttackReport { runs })
}

fn run_category(
    spec: &ServiceSpec,
    seed: u64,
    category: AttackCategory,
    key: &RequestKey,
    with_deny_list: bool,
    cfg: &ControllerConfig,
) -> Result<CategoryRun, AttackError> {
    let mut workload = generate_workload(8, seed, &uniform_benign_mix(spec)).expect("benign mix is non-empty");
    workload.insert(4, Request { logical_id: 0, key: key.clone() });
    for (i, r) in workload.iter_mut().enumerate() {
        r.logical_id = i as u64;
    }
    let exploit_id = 4;

    let (start, _) = pretrain(spec, &cfg.pretrain_requests, cfg)?;
    let result = run_session(spec, &workload, cfg)?;
    let alerts = result.alerts.iter().filter(|a| a.logical_id == exploit_id).count();
    let exploit_updates = result.exploit_sourced_updates().count();
    let policy_growth = result.final_policy.len() - start.len();
    let confined = result
        .runs
        .iter()
        .filter(|r| r.logical_id == exploit_id && r.replica == Replica::Production)
        .all(|r| {
            let p = policy_at_epoch(&result, &cfg.deny, r.epoch);
            r.executed.iter().all(|s| p.allows(s.as_str()))
        });

    let verdict = match category {
        AttackCategory::Cat2 | AttackCategory::Cat3 if alerts == 0 && policy_growth == 0 && confined => Verdict::Confined,
        AttackCategory::Cat1 | AttackCategory::Cat4 if alerts == 1 && exploit_updates == 0 => Verdict::Blocked,
        AttackCategory::Cat4 if exploit_updates >= 1 => Verdict::Weakness,
        _ => Verdict::Unexpected,
    };
    Ok(CategoryRun {
        category,
        key: key.clone(),
        with_deny_list,
        alerts,
        exploit_updates,
        policy_growth,
        confined,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::syscall_set;
    use crate::sim::{CostModel, ExploitSpec, RequestBehavior};

    fn ids(names: &[&str]) -> Vec<SyscallId> {
        names.iter().map(|n| SyscallId::new(*n).unwrap()).collect()
    }

    fn exploit(kind: ExploitKind, injected: &[&str]) -> RequestBehavior {
        RequestBehavior {
            trace: ids(&["read", "write"]),
            response: "200".into(),
            exploit: Some(ExploitSpec { kind, corruption_index: 1, injected: ids(injected) }),
        }
    }

    fn spec(with_cat4: bool) -> ServiceSpec {
        let mut handlers = BTreeMap::new();
        handlers.insert("get".to_string(), RequestBehavior::benign(ids(&["read", "write"]), "200"));
        handlers.insert("put".to_string(), RequestBehavior::benign(ids(&["read", "openat", "write"]), "201"));
        handlers.insert("c1".to_string(), exploit(ExploitKind::OracleDetectable, &["execve"]));
        handlers.insert("c2".to_string(), exploit(ExploitKind::OracleDetectable, &["openat"]));
        handlers.insert("c3".to_string(), exploit(ExploitKind::OracleUndetectable, &["write"]));
        if with_cat4 {
            handlers.insert("c4".to_string(), exploit(ExploitKind::OracleUndetectable, &["mount"]));
        }
        ServiceSpec {
            name: "svc".into(),
            static_universe: syscall_set(["read", "write", "openat"]),
            oracle_extra: syscall_set(["sigaltstack"]),
            cost_model: CostModel { base_request_ms: 1.0, production_per_syscall_ms: 0.5, oracle_slowdown_factor: 3.0, restart_ms: 50.0 },
            handlers,
        }
    }

    #[test]
    fn four_categories() {
        let r = run_attack_scenarios(&spec(true), 3, &BTreeSet::new()).unwrap();
        assert_eq!(r.get(AttackCategory::Cat1, false).unwrap().verdict, Verdict::Blocked);
        assert_eq!(r.get(AttackCategory::Cat2, false).unwrap().verdict, Verdict::Confined);
        assert_eq!(r.get(AttackCategory::Cat3, false).unwrap().verdict, Verdict::Confined);
        assert_eq!(r.get(AttackCategory::Cat4, false).unwrap().verdict, Verdict::Weakness);
        assert_eq!(r.get(AttackCategory::Cat4, true).unwrap().verdict, Verdict::Blocked);
        assert!(r.to_text().contains("cat1 c1"));
    }

    #[test]
    fn missing_category() {
        assert_eq!(
            run_attack_scenarios(&spec(false), 3, &BTreeSet::new()),
            Err(AttackError::MissingCategory(AttackCategory::Cat4))
        );
    }
}
