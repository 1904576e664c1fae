use std::collections::BTreeSet;
use std::fs;
use std::io::Write;

use thiserror::Error;
use timeloops::analysis::{compare_pair, verify_paper_claims, ComparisonReport};
use timeloops::attacks::{run_attack_scenarios, AttackError};
use timeloops::controller::{run_fixed, Deployment};
use timeloops::policy::{self, log_to_jsonl, podman_deny_preset, DefaultAction};
use timeloops::workload::{
    cumulative_csv, generate_workload, latency_csv, parse_mix, summarize, uniform_benign_mix,
};
use timeloops::{run_session, ControllerConfig, OracleMode, ServiceSpec, SyscallId};

use crate::inputs;
use crate::{AttackArgs, DenyPreset, DiffArgs, ExportArgs, Mode, OracleModeArg, SimulateArgs, VerifyArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Output(String),
    #[error("one or more claims failed")]
    ClaimsFailed,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) | CliError::Output(_) => 2,
            CliError::ClaimsFailed => 3,
        }
    }
}

fn deny_set(preset: DenyPreset, fixture: Option<&std::path::Path>) -> Result<BTreeSet<SyscallId>, CliError> {
    Ok(match preset {
        DenyPreset::None => BTreeSet::new(),
        DenyPreset::Podman => podman_deny_preset(&inputs::fixture(fixture)?),
    })
}

fn check_keys<'a>(spec: &ServiceSpec, keys: impl IntoIterator<Item = &'a String>, flag: &str) -> Result<(), CliError> {
    for k in keys {
        if spec.handler(k).is_none() {
            return Err(CliError::Usage(format!("{flag}: service {:?} has no handler {k:?}", spec.name)));
        }
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let spec = inputs::service(&args.scenario, args.service.as_deref())?;
    let mix = match &args.mix {
        Some(m) => parse_mix(m).map_err(|e| CliError::Usage(format!("--mix: {e}")))?,
        None => uniform_benign_mix(&spec),
    };
    check_keys(&spec, mix.keys(), "--mix")?;
    check_keys(&spec, &args.pretrain, "--pretrain")?;
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let workload = generate_workload(args.n, args.seed, &mix).map_err(|e| CliError::Usage(format!("--mix: {e}")))?;
    let config = ControllerConfig {
        oracle_mode: match args.oracle_mode {
            OracleModeArg::Single => OracleMode::SingleRequest,
            OracleModeArg::Watchdog => OracleMode::UntilWatchdog,
        },
        watchdog_ms: args.watchdog_ms,
        deny: deny_set(args.deny_preset, args.fixture.as_deref())?,
        pretrain_requests: args.pretrain.clone(),
        ..Default::default()
    };
    let result = match args.mode {
        Mode::Timeloops => run_session(&spec, &workload, &config).map_err(|e| CliError::Usage(e.to_string()))?,
        Mode::Unhardened => run_fixed(&spec, &workload, Deployment::Unhardened),
        Mode::Hardened => run_fixed(&spec, &workload, Deployment::Hardened),
    };

    let out = &args.out;
    let write = |name: &str, bytes: &[u8]| {
        fs::write(out.join(name), bytes).map_err(|e| CliError::Output(format!("{}: {e}", out.join(name).display())))
    };
    fs::create_dir_all(out).map_err(|e| CliError::Output(format!("{}: {e}", out.display())))?;
    write("latency.csv", latency_csv(&result.latency_records).as_bytes())?;
    write("cumulative.csv", cumulative_csv(&result.latency_records).as_bytes())?;
    write("session.json", result.to_json().as_bytes())?;
    write("policy.log", log_to_jsonl(&result.policy_log).as_bytes())?;
    write("profile.json", &policy::export_seccomp(&result.final_policy, DefaultAction::KillProcess))?;

    let stats = summarize(&result.latency_records).expect("workload is non-empty");
    println!(
        "{} requests: mean {:.3} ms, p50 {:.3} ms, p99 {:.3} ms, max {:.3} ms",
        stats.count, stats.mean, stats.p50, stats.p99, stats.max
    );
    println!(
        "policy: {} syscalls at epoch {}; {} oracle consultations, {} alerts",
        result.final_policy.len(),
        result.final_policy.epoch(),
        result.consultations,
        result.alerts.len()
    );
    if !result.exhausted.is_empty() {
        println!("{} requests ran out of retries", result.exhausted.len());
    }
    Ok(())
}

pub fn diff(args: &DiffArgs) -> Result<(), CliError> {
    let a = inputs::policy(&args.a, args.fixture.as_deref())?;
    let b = inputs::policy(&args.b, args.fixture.as_deref())?;
    let table = inputs::fixture(args.fixture.as_deref())?;
    let report = ComparisonReport {
        entries: vec![compare_pair(&args.a, a.allow_set(), &args.b, b.allow_set(), Some(&table))],
    };
    print!("{}", if args.json { report.to_json() } else { report.to_text() });
    Ok(())
}

pub fn export_seccomp(args: &ExportArgs) -> Result<(), CliError> {
    let p = inputs::policy(&args.policy, args.fixture.as_deref())?;
    let action = if args.errno { DefaultAction::Errno } else { DefaultAction::KillProcess };
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(&policy::export_seccomp(&p, action))
        .and_then(|_| stdout.flush())
        .map_err(|e| CliError::Output(e.to_string()))
}

pub fn verify_paper(args: &VerifyArgs) -> Result<(), CliError> {
    let report = verify_paper_claims(&inputs::fixture(args.fixture.as_deref())?);
    print!("{}", if args.json { report.to_json() } else { report.to_text() });
    if report.all_pass() {
        Ok(())
    } else {
        Err(CliError::ClaimsFailed)
    }
}

pub fn attack_scenarios(args: &AttackArgs) -> Result<(), CliError> {
    let spec = inputs::service(&args.scenario, args.service.as_deref())?;
    let deny = deny_set(args.deny_preset, args.fixture.as_deref())?;
    let report = run_attack_scenarios(&spec, args.seed, &deny).map_err(|e| match e {
        AttackError::MissingCategory(_) | AttackError::NoBenignTraffic => CliError::Input(e.to_string()),
        AttackError::Controller(e) => CliError::Usage(e.to_string()),
    })?;
    print!("{}", report.to_text());
    Ok(())
}
