//! Browser bindings for the interactive demo in `www/`.
//!
//! Every export takes and returns JSON strings so the page needs no glue
//! beyond what `wasm-bindgen` generates. The plain Rust functions are public
//! too and are what the tests exercise.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use timeloops::analysis::compare_pair;
use timeloops::attacks::{run_attack_scenarios, AttackReport};
use timeloops::catalog::shipped_fixture;
use timeloops::controller::{run_fixed, Deployment};
use timeloops::policy::podman_deny_preset;
use timeloops::workload::{generate_workload, steady_state_p50, summarize, uniform_benign_mix};
use timeloops::{run_session, ControllerConfig, Scenario, ServiceSpec};

const REFERENCE: &str = include_str!("../../core/scenarios/reference.json");
const ATTACKS: &str = include_str!("../../core/scenarios/attacks.json");

fn service(text: &str) -> ServiceSpec {
    Scenario::parse(text).expect("bundled scenario is valid").services.remove(0)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct CurveParams {
    pub n: usize,
    pub seed: u64,
    pub slowdown: f64,
    pub restart_ms: f64,
    pub pretrain: bool,
}

impl Default for CurveParams {
    fn default() -> Self {
        Self { n: 300, seed: 1, slowdown: 3.0, restart_ms: 50.0, pretrain: false }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Series {
    pub mode: &'static str,
    pub latency: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Curves {
    pub series: Vec<Series>,
    pub consultations: usize,
    pub policy_size: usize,
    pub steady_p50: f64,
    /// First index where cumulative timeloops time drops below hardened.
    pub crossover: Option<usize>,
}

/// Per-request and cumulative latency for the three deployment modes on the
/// bundled web-server scenario.
pub fn latency_curves(params: &CurveParams) -> Result<Curves, String> {
    let mut spec = service(REFERENCE);
    spec.cost_model.oracle_slowdown_factor = params.slowdown;
    spec.cost_model.restart_ms = params.restart_ms;
    spec.validate().map_err(|e| e.to_string())?;
    if params.n == 0 || params.n > 20_000 {
        return Err("n must be between 1 and 20000".into());
    }
    let workload = generate_workload(params.n, params.seed, &uniform_benign_mix(&spec)).map_err(|e| e.to_string())?;
    let config = ControllerConfig {
        pretrain_requests: if params.pretrain { spec.benign_keys() } else { Vec::new() },
        ..Default::default()
    };
    let tl = run_session(&spec, &workload, &config).map_err(|e| e.to_string())?;
    let un = run_fixed(&spec, &workload, Deployment::Unhardened);
    let hd = run_fixed(&spec, &workload, Deployment::Hardened);

    let series = [("timeloops", &tl), ("unhardened", &un), ("hardened", &hd)]
        .into_iter()
        .map(|(mode, r)| {
            let s = summarize(&r.latency_records).expect("workload is non-empty");
            Series {
                mode,
                latency: r.latency_records.iter().map(|x| x.latency_ms).collect(),
                cumulative: s.cumulative,
                mean: s.mean,
                p50: s.p50,
                p99: s.p99,
            }
        })
        .collect::<Vec<_>>();
    let crossover = series[0].cumulative.iter().zip(&series[2].cumulative).position(|(t, h)| t < h);
    Ok(Curves {
        consultations: tl.consultations,
        policy_size: tl.final_policy.len(),
        steady_p50: steady_state_p50(&tl.latency_records).unwrap_or(0.0),
        crossover,
        series,
    })
}

/// Text diff of two comparison-table columns, e.g. `nginx-sysfilter`.
pub fn compare_columns_text(a: &str, b: &str) -> Result<String, String> {
    let table = shipped_fixture();
    let pa = table.column_policy_by_id(a).map_err(|e| e.to_string())?;
    let pb = table.column_policy_by_id(b).map_err(|e| e.to_string())?;
    let entry = compare_pair(a, &pa, b, &pb, Some(&table));
    Ok(timeloops::analysis::ComparisonReport { entries: vec![entry] }.to_text())
}

/// Runs the four exploit categories on the bundled attack scenario.
pub fn attack_report(seed: u64, podman_deny: bool) -> Result<AttackReport, String> {
    let deny = if podman_deny { podman_deny_preset(&shipped_fixture()) } else { Default::default() };
    run_attack_scenarios(&service(ATTACKS), seed, &deny).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = latencyCurves)]
pub fn latency_curves_js(params_json: &str) -> Result<String, JsError> {
    let params: CurveParams = serde_json::from_str(params_json)?;
    let curves = latency_curves(&params).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&curves)?)
}

#[wasm_bindgen(js_name = compareColumns)]
pub fn compare_columns_js(a: &str, b: &str) -> Result<String, JsError> {
    compare_columns_text(a, b).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = attackCategories)]
pub fn attack_categories_js(seed: u64, podman_deny: bool) -> Result<String, JsError> {
    let report = attack_report(seed, podman_deny).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&report)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_have_crossover() {
        let c = latency_curves(&CurveParams::default()).unwrap();
        assert_eq!(c.series.len(), 3);
        assert!(c.series.iter().all(|s| s.latency.len() == 300));
        assert!(c.crossover.is_some());
        assert!(c.series[0].mean < c.series[2].mean);
    }

    #[test]
    fn pretraining_removes_consultations() {
        let c = latency_curves(&CurveParams { pretrain: true, ..Default::default() }).unwrap();
        assert_eq!(c.consultations, 0);
    }

    #[test]
    fn bad_params() {
        assert!(latency_curves(&CurveParams { slowdown: 0.5, ..Default::default() }).is_err());
        assert!(latency_curves(&CurveParams { n: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn columns() {
        let text = compare_columns_text("nginx-sysfilter", "nginx-timeloops").unwrap();
        assert!(text.contains("40 only in A, 7 only in B"));
        assert!(compare_columns_text("nginx-sysfilter", "nope").is_err());
    }

    #[test]
    fn attacks() {
        let r = attack_report(0, false).unwrap();
        assert_eq!(r.runs.len(), 5);
    }
}
