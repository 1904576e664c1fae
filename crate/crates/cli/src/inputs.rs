//! Loading scenarios, fixtures and policies from the command line.

use std::path::Path;

use timeloops::catalog::{load_fixture, shipped_fixture};
use timeloops::policy::log_from_jsonl;
use timeloops::{PolicyComparisonTable, Scenario, ServiceSpec, SyscallPolicy};

use crate::commands::CliError;

pub fn fixture(path: Option<&Path>) -> Result<PolicyComparisonTable, CliError> {
    match path {
        Some(p) => load_fixture(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display()))),
        None => Ok(shipped_fixture()),
    }
}

pub fn service(path: &Path, name: Option<&str>) -> Result<ServiceSpec, CliError> {
    let scenario = Scenario::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    scenario.service(name).cloned().map_err(|e| CliError::Usage(e.to_string()))
}

/// Reads a policy from `@column`, a policy log, a session report or a bare
/// policy JSON.
pub fn policy(arg: &str, fixture_path: Option<&Path>) -> Result<SyscallPolicy, CliError> {
    if let Some(column) = arg.strip_prefix('@') {
        let table = fixture(fixture_path)?;
        let allow = table.column_policy_by_id(column).map_err(|e| CliError::Usage(e.to_string()))?;
        return SyscallPolicy::from_parts(0, allow, Default::default()).map_err(|e| CliError::Input(e.to_string()));
    }
    let text = std::fs::read_to_string(arg).map_err(|e| CliError::Input(format!("{arg}: {e}")))?;
    let bad = |e: &dyn std::fmt::Display| CliError::Input(format!("{arg}: {e}"));
    let value: Option<serde_json::Value> = serde_json::from_str(&text).ok();
    match value {
        Some(serde_json::Value::Object(mut map)) if map.contains_key("final_policy") => {
            let p = map.remove("final_policy").expect("checked");
            serde_json::from_value(p).map_err(|e| bad(&e))
        }
        Some(v @ serde_json::Value::Object(_)) if v.get("allow").is_some() => {
            serde_json::from_value(v).map_err(|e| bad(&e))
        }
        _ => {
            let log = log_from_jsonl(&text).map_err(|e| bad(&e))?;
            SyscallPolicy::new(Default::default()).replay(&log).map_err(|e| bad(&e))
        }
    }
}
