//! The syscall allow-list and its lifecycle.
//!
//! A [`SyscallPolicy`] is a value: it never changes while a container runs
//! under it. Learning produces a new policy with the next epoch, which only
//! takes effect at the next container start. The deny set is fixed at
//! construction and can never be allowed.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{syscall_set, Column, PolicyComparisonTable, SyscallId};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("denied syscalls may never be allowed: {}", join(.names))]
    DeniedSyscall { names: Vec<SyscallId> },
    #[error("allow and deny sets overlap on: {}", join(.0))]
    Overlap(Vec<SyscallId>),
    #[error("policy log parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("policy log replay failed at entry {index}: {msg}")]
    Replay { index: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
}

fn join(names: &[SyscallId]) -> String {
    names.iter().map(SyscallId::as_str).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySource {
    Oracle,
    Pretrain,
}

/// One learned extension of the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogEntry {
    pub epoch: u64,
    pub added: Vec<SyscallId>,
    pub source: PolicySource,
    pub timestamp_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct SyscallPolicy {
    allow: BTreeSet<SyscallId>,
    deny: BTreeSet<SyscallId>,
    epoch: u64,
}

#[derive(Deserialize)]
struct RawPolicy {
    allow: BTreeSet<SyscallId>,
    #[serde(default)]
    deny: BTreeSet<SyscallId>,
    #[serde(default)]
    epoch: u64,
}

impl TryFrom<RawPolicy> for SyscallPolicy {
    type Error = PolicyError;
    fn try_from(raw: RawPolicy) -> Result<Self, Self::Error> {
        Self::from_parts(raw.epoch, raw.allow, raw.deny)
    }
}

impl SyscallPolicy {
    /// Empty allow-list at epoch 0.
    pub fn new(deny: BTreeSet<SyscallId>) -> Self {
        Self { allow: BTreeSet::new(), deny, epoch: 0 }
    }

    pub fn from_parts(
        epoch: u64,
        allow: BTreeSet<SyscallId>,
        deny: BTreeSet<SyscallId>,
    ) -> Result<Self, PolicyError> {
        let overlap: Vec<_> = allow.intersection(&deny).cloned().collect();
        if !overlap.is_empty() {
            return Err(PolicyError::Overlap(overlap));
        }
        Ok(Self { allow, deny, epoch })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn allow_set(&self) -> &BTreeSet<SyscallId> {
        &self.allow
    }

    pub fn deny_set(&self) -> &BTreeSet<SyscallId> {
        &self.deny
    }

    /// Size metric used in comparisons; the deny set does not count.
    pub fn len(&self) -> usize {
        self.allow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allow.is_empty()
    }

    pub fn allows(&self, s: &str) -> bool {
        self.allow.contains(s)
    }

    pub fn denies(&self, s: &str) -> bool {
        self.deny.contains(s)
    }

    /// Adds `new` to the allow-list.
    ///
    /// Returns the unchanged policy and no log entry when nothing in `new` is
    /// actually new. Fails without change if any requested name is denied.
    pub fn extend(
        &self,
        new: &BTreeSet<SyscallId>,
        source: PolicySource,
        timestamp_ms: f64,
    ) -> Result<(SyscallPolicy, Option<PolicyLogEntry>), PolicyError> {
        let denied: Vec<_> = new.intersection(&self.deny).cloned().collect();
        if !denied.is_empty() {
            return Err(PolicyError::DeniedSyscall { names: denied });
        }
        let added: Vec<SyscallId> = new.difference(&self.allow).cloned().collect();
        if added.is_empty() {
            return Ok((self.clone(), None));
        }
        let mut next = self.clone();
        next.allow.extend(added.iter().cloned());
        next.epoch += 1;
        let entry = PolicyLogEntry { epoch: next.epoch, added, source, timestamp_ms };
        Ok((next, Some(entry)))
    }

    /// Applies logged extensions in order, checking they are consistent.
    pub fn replay(&self, log: &[PolicyLogEntry]) -> Result<SyscallPolicy, PolicyError> {
        let mut p = self.clone();
        for (index, entry) in log.iter().enumerate() {
            let fail = |msg: String| PolicyError::Replay { index, msg };
            if entry.epoch != p.epoch + 1 {
                return Err(fail(format!("epoch {} does not follow {}", entry.epoch, p.epoch)));
            }
            if entry.added.is_empty() {
                return Err(fail("entry adds nothing".into()));
            }
            if let Some(s) = entry.added.iter().find(|s| p.allow.contains(*s)) {
                return Err(fail(format!("{s} is already allowed")));
            }
            let set: BTreeSet<_> = entry.added.iter().cloned().collect();
            let (next, _) = p
                .extend(&set, entry.source, entry.timestamp_ms)
                .map_err(|e| fail(e.to_string()))?;
            p = next;
        }
        Ok(p)
    }
}

/// Three-way partition of two allow-lists.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PolicyDiff {
    pub only_a: BTreeSet<SyscallId>,
    pub only_b: BTreeSet<SyscallId>,
    pub both: BTreeSet<SyscallId>,
}

impl PolicyDiff {
    pub fn of_sets(a: &BTreeSet<SyscallId>, b: &BTreeSet<SyscallId>) -> Self {
        Self {
            only_a: a.difference(b).cloned().collect(),
            only_b: b.difference(a).cloned().collect(),
            both: a.intersection(b).cloned().collect(),
        }
    }
}

pub fn diff(a: &SyscallPolicy, b: &SyscallPolicy) -> PolicyDiff {
    PolicyDiff::of_sets(&a.allow, &b.allow)
}

impl fmt::Display for PolicyDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} only in A, {} only in B, {} in both", self.only_a.len(), self.only_b.len(), self.both.len())?;
        for s in &self.only_a {
            writeln!(f, "- {s}")?;
        }
        for s in &self.only_b {
            writeln!(f, "+ {s}")?;
        }
        Ok(())
    }
}

/// What the kernel does to a syscall outside the allow-list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DefaultAction {
    #[default]
    KillProcess,
    Errno,
}

impl DefaultAction {
    pub fn as_scmp(self) -> &'static str {
        match self {
            DefaultAction::KillProcess => "SCMP_ACT_KILL_PROCESS",
            DefaultAction::Errno => "SCMP_ACT_ERRNO",
        }
    }
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SeccompProfile<'a> {
    default_action: &'static str,
    architectures: [&'static str; 1],
    syscalls: Vec<SeccompRule<'a>>,
}

#[derive(Serialize)]
struct SeccompRule<'a> {
    names: Vec<&'a str>,
    action: &'static str,
}

/// Renders the OCI runtime seccomp profile for `p` (single line, no newline).
pub fn export_seccomp(p: &SyscallPolicy, default_action: DefaultAction) -> Vec<u8> {
    let syscalls = if p.allow.is_empty() {
        Vec::new()
    } else {
        vec![SeccompRule {
            names: p.allow.iter().map(SyscallId::as_str).collect(),
            action: "SCMP_ACT_ALLOW",
        }]
    };
    let profile = SeccompProfile {
        default_action: default_action.as_scmp(),
        architectures: ["SCMP_ARCH_X86_64"],
        syscalls,
    };
    serde_json::to_vec(&profile).expect("profile serializes")
}

pub fn log_to_jsonl(log: &[PolicyLogEntry]) -> String {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e).expect("log entry serializes"));
        out.push('\n');
    }
    out
}

pub fn log_from_jsonl(text: &str) -> Result<Vec<PolicyLogEntry>, PolicyError> {
    let mut log: Vec<PolicyLogEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: PolicyLogEntry =
            serde_json::from_str(line).map_err(|e| PolicyError::Parse { line: i + 1, msg: e.to_string() })?;
        if entry.added.is_empty() {
            return Err(PolicyError::Parse { line: i + 1, msg: "empty added list".into() });
        }
        log.push(entry);
    }
    Ok(log)
}

pub fn save_log(path: impl AsRef<Path>, log: &[PolicyLogEntry]) -> Result<(), PolicyError> {
    let mut f = std::fs::File::create(path).map_err(|e| PolicyError::Io(e.to_string()))?;
    f.write_all(log_to_jsonl(log).as_bytes()).map_err(|e| PolicyError::Io(e.to_string()))
}

pub fn load_log(path: impl AsRef<Path>) -> Result<Vec<PolicyLogEntry>, PolicyError> {
    let text = std::fs::read_to_string(path).map_err(|e| PolicyError::Io(e.to_string()))?;
    log_from_jsonl(&text)
}

/// Syscalls the stock Docker/Podman seccomp profile blocks outright.
const CONTAINER_DEFAULT_BLOCKED: &[&str] = &[
    "acct",
    "add_key",
    "bpf",
    "clock_adjtime",
    "clock_settime",
    "create_module",
    "delete_module",
    "finit_module",
    "get_kernel_syms",
    "get_mempolicy",
    "init_module",
    "ioperm",
    "iopl",
    "kcmp",
    "kexec_file_load",
    "kexec_load",
    "keyctl",
    "lookup_dcookie",
    "mbind",
    "mount",
    "move_pages",
    "name_to_handle_at",
    "nfsservctl",
    "open_by_handle_at",
    "perf_event_open",
    "pivot_root",
    "process_vm_readv",
    "process_vm_writev",
    "ptrace",
    "query_module",
    "quotactl",
    "reboot",
    "request_key",
    "set_mempolicy",
    "setns",
    "settimeofday",
    "stime",
    "swapoff",
    "swapon",
    "sysfs",
    "umount",
    "umount2",
    "unshare",
    "uselib",
    "userfaultfd",
    "ustat",
    "vm86",
    "vm86old",
];

/// Deny-list modelled on the default container filter: everything the
/// comparison table marks as absent from the Podman profile, plus the
/// syscalls that profile is documented to block.
pub fn podman_deny_preset(table: &PolicyComparisonTable) -> BTreeSet<SyscallId> {
    let podman = table.column_policy(Column::PodmanDefault);
    let mut deny: BTreeSet<SyscallId> = table.universe().difference(&podman).cloned().collect();
    deny.extend(syscall_set(CONTAINER_DEFAULT_BLOCKED.iter().copied()));
    deny
}
