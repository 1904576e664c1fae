//! Retrying client, workload generation and end-to-end latency accounting.
//!
//! Latency of a logical request runs from its first attempt to the response
//! that finally satisfies it, however many retries that took.

use std::collections::BTreeMap;
use std::fmt;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{RequestKey, ServiceSpec};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub logical_id: u64,
    pub key: RequestKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestOutcome {
    Served,
    RejectedMalicious,
}

impl fmt::Display for RequestOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestOutcome::Served => "served",
            RequestOutcome::RejectedMalicious => "rejected_malicious",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub logical_id: u64,
    pub key: RequestKey,
    pub attempts: u32,
    pub first_attempt_ms: f64,
    pub completion_ms: f64,
    pub latency_ms: f64,
    pub outcome: RequestOutcome,
}

/// What happened to one attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttemptResult {
    /// A response came back.
    Served,
    /// The connection dropped (the serving container was killed); retry.
    Dropped,
    /// The input was flagged as an exploit at `at_ms`; retrying is pointless.
    Rejected { at_ms: f64 },
}

/// Anything that can serve attempts on a shared virtual timeline.
pub trait RequestTarget {
    type Error;

    fn now_ms(&self) -> f64;

    fn attempt(&mut self, request: &Request) -> Result<AttemptResult, Self::Error>;
}

#[derive(Debug, Error, PartialEq)]
pub enum RetryError<E> {
    #[error("request {logical_id} not served after {attempts} attempts")]
    AttemptsExhausted { logical_id: u64, attempts: u32, first_attempt_ms: f64, last_ms: f64 },
    #[error("max_attempts must be at least 1")]
    ZeroAttempts,
    #[error(transparent)]
    Target(E),
}

/// Reissues `request` unchanged after every dropped attempt.
pub fn send_with_retry<T: RequestTarget>(
    request: &Request,
    target: &mut T,
    max_attempts: u32,
) -> Result<LatencyRecord, RetryError<T::Error>> {
    if max_attempts == 0 {
        return Err(RetryError::ZeroAttempts);
    }
    let first_attempt_ms = target.now_ms();
    let record = |attempts, completion_ms: f64, outcome| LatencyRecord {
        logical_id: request.logical_id,
        key: request.key.clone(),
        attempts,
        first_attempt_ms,
        completion_ms,
        latency_ms: completion_ms - first_attempt_ms,
        outcome,
    };
    for attempt in 1..=max_attempts {
        match target.attempt(request).map_err(RetryError::Target)? {
            AttemptResult::Served => return Ok(record(attempt, target.now_ms(), RequestOutcome::Served)),
            AttemptResult::Rejected { at_ms } => return Ok(record(attempt, at_ms, RequestOutcome::RejectedMalicious)),
            AttemptResult::Dropped => {}
        }
    }
    Err(RetryError::AttemptsExhausted {
        logical_id: request.logical_id,
        attempts: max_attempts,
        first_attempt_ms,
        last_ms: target.now_ms(),
    })
}

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("request mix has no positive weight")]
    EmptyMix,
    #[error("invalid weight {weight} for {key:?}")]
    BadWeight { key: String, weight: f64 },
    #[error("cannot parse mix entry {0:?} (expected key=weight)")]
    BadMixSyntax(String),
    #[error("no latency records to summarize")]
    EmptyRecords,
}

/// Parses `key=weight[,key=weight...]`.
pub fn parse_mix(text: &str) -> Result<BTreeMap<RequestKey, f64>, WorkloadError> {
    let mut mix = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, w) = part.split_once('=').ok_or_else(|| WorkloadError::BadMixSyntax(part.to_string()))?;
        let weight: f64 = w.trim().parse().map_err(|_| WorkloadError::BadMixSyntax(part.to_string()))?;
        mix.insert(k.trim().to_string(), weight);
    }
    Ok(mix)
}

/// Equal weight on every benign handler.
pub fn uniform_benign_mix(spec: &ServiceSpec) -> BTreeMap<RequestKey, f64> {
    spec.benign_keys().into_iter().map(|k| (k, 1.0)).collect()
}

/// Draws `n` requests by seeded weighted sampling; ids are `0..n`.
pub fn generate_workload(
    n: usize,
    seed: u64,
    mix: &BTreeMap<RequestKey, f64>,
) -> Result<Vec<Request>, WorkloadError> {
    for (key, &weight) in mix {
        if !weight.is_finite() || weight < 0.0 {
            return Err(WorkloadError::BadWeight { key: key.clone(), weight });
        }
    }
    if !mix.values().any(|w| *w > 0.0) {
        return Err(WorkloadError::EmptyMix);
    }
    let keys: Vec<&RequestKey> = mix.keys().collect();
    let dist = WeightedIndex::new(mix.values().copied()).map_err(|_| WorkloadError::EmptyMix)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| Request { logical_id: i as u64, key: keys[dist.sample(&mut rng)].clone() })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
    /// Running sum of latencies in request order.
    pub cumulative: Vec<f64>,
}

/// Percentile by linear interpolation between order statistics at rank
/// `q * (n - 1)`. `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn summarize(records: &[LatencyRecord]) -> Result<LatencyStats, WorkloadError> {
    summarize_latencies(&records.iter().map(|r| r.latency_ms).collect::<Vec<_>>())
}

pub fn summarize_latencies(latencies: &[f64]) -> Result<LatencyStats, WorkloadError> {
    if latencies.is_empty() {
        return Err(WorkloadError::EmptyRecords);
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cumulative = latencies
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect::<Vec<_>>();
    Ok(LatencyStats {
        count: latencies.len(),
        mean: cumulative[cumulative.len() - 1] / latencies.len() as f64,
        p50: percentile(&sorted, 0.5),
        p99: percentile(&sorted, 0.99),
        max: sorted[sorted.len() - 1],
        cumulative,
    })
}

/// Median latency over the second half of the run, after learning has
/// settled.
pub fn steady_state_p50(records: &[LatencyRecord]) -> Option<f64> {
    let tail = &records[records.len() / 2..];
    let mut lat: Vec<f64> = tail.iter().map(|r| r.latency_ms).collect();
    if lat.is_empty() {
        return None;
    }
    lat.sort_by(f64::total_cmp);
    Some(percentile(&lat, 0.5))
}

pub const LATENCY_CSV_HEADER: &str = "logical_id,key,attempts,first_attempt_ms,completion_ms,latency_ms,outcome";

/// Latency CSV, one row per logical request ordered by id.
pub fn latency_csv(records: &[LatencyRecord]) -> String {
    let mut sorted: Vec<&LatencyRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.logical_id);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LATENCY_CSV_HEADER.split(',')).unwrap();
    for r in sorted {
        w.write_record([
            r.logical_id.to_string(),
            r.key.clone(),
            r.attempts.to_string(),
            r.first_attempt_ms.to_string(),
            r.completion_ms.to_string(),
            r.latency_ms.to_string(),
            r.outcome.to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Cumulative latency series, `index,logical_id,cumulative_ms`.
pub fn cumulative_csv(records: &[LatencyRecord]) -> String {
    let mut out = String::from("index,logical_id,cumulative_ms\n");
    let mut acc = 0.0;
    for (i, r) in records.iter().enumerate() {
        acc += r.latency_ms;
        out.push_str(&format!("{i},{},{acc}\n", r.logical_id));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Serves after a fixed number of drops, 1ms per attempt.
    struct Flaky {
        now: f64,
        drops_left: u32,
        reject: bool,
        seen: Vec<Request>,
    }

    impl RequestTarget for Flaky {
        type Error = String;
        fn now_ms(&self) -> f64 {
            self.now
        }
        fn attempt(&mut self, request: &Request) -> Result<AttemptResult, String> {
            self.seen.push(request.clone());
            self.now += 1.0;
            if self.drops_left > 0 {
                self.drops_left -= 1;
                return Ok(AttemptResult::Dropped);
            }
            if self.reject {
                return Ok(AttemptResult::Rejected { at_ms: self.now - 0.5 });
            }
            Ok(AttemptResult::Served)
        }
    }

    fn req() -> Request {
        Request { logical_id: 7, key: "get".into() }
    }

    #[test]
    fn retries_until_served() {
        let mut t = Flaky { now: 10.0, drops_left: 2, reject: false, seen: vec![] };
        let r = send_with_retry(&req(), &mut t, 16).unwrap();
        assert_eq!(r.attempts, 3);
        assert_eq!(r.first_attempt_ms, 10.0);
        assert_eq!(r.latency_ms, 3.0);
        assert_eq!(r.outcome, RequestOutcome::Served);
        assert!(t.seen.iter().all(|s| *s == req()));
    }

    #[test]
    fn rejection_stops_retries() {
        let mut t = Flaky { now: 0.0, drops_left: 1, reject: true, seen: vec![] };
        let r = send_with_retry(&req(), &mut t, 16).unwrap();
        assert_eq!(r.outcome, RequestOutcome::RejectedMalicious);
        assert_eq!(r.attempts, 2);
        assert_eq!(r.completion_ms, 1.5);
    }

    #[test]
    fn exhaustion_is_an_error() {
        let mut t = Flaky { now: 0.0, drops_left: 100, reject: false, seen: vec![] };
        let err = send_with_retry(&req(), &mut t, 4).unwrap_err();
        assert!(matches!(err, RetryError::AttemptsExhausted { attempts: 4, .. }));
        assert_eq!(send_with_retry(&req(), &mut t, 0).unwrap_err(), RetryError::ZeroAttempts);
    }

    #[test]
    fn workload_generation() {
        let mix = parse_mix("a=1").unwrap();
        assert!(generate_workload(0, 1, &mix).unwrap().is_empty());
        let w = generate_workload(5, 1, &mix).unwrap();
        assert_eq!(w.iter().map(|r| r.logical_id).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(w.iter().all(|r| r.key == "a"));
        let mix = parse_mix("a=1, b=3,c=0").unwrap();
        assert_eq!(generate_workload(50, 9, &mix).unwrap(), generate_workload(50, 9, &mix).unwrap());
        assert!(generate_workload(50, 9, &mix).unwrap().iter().all(|r| r.key != "c"));
        assert_eq!(generate_workload(1, 0, &parse_mix("a=0").unwrap()), Err(WorkloadError::EmptyMix));
        assert_eq!(generate_workload(1, 0, &BTreeMap::new()), Err(WorkloadError::EmptyMix));
        assert!(matches!(generate_workload(1, 0, &parse_mix("a=-1").unwrap()), Err(WorkloadError::BadWeight { .. })));
        assert!(parse_mix("a:1").is_err());
    }

    #[test]
    fn weight_fidelity() {
        let mix = parse_mix("a=1,b=3").unwrap();
        for seed in 0..5 {
            let w = generate_workload(20_000, seed, &mix).unwrap();
            let frac_b = w.iter().filter(|r| r.key == "b").count() as f64 / w.len() as f64;
            assert!((frac_b - 0.75).abs() < 0.02, "seed {seed}: {frac_b}");
        }
    }

    #[test]
    fn stats() {
        let s = summarize_latencies(&[5.0]).unwrap();
        assert_eq!((s.mean, s.p50, s.p99, s.max), (5.0, 5.0, 5.0, 5.0));
        assert_eq!(s.cumulative, vec![5.0]);
        let s = summarize_latencies(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.p50, 2.5);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.max, 4.0);
        assert!((s.p99 - 3.97).abs() < 1e-12);
        assert_eq!(s.cumulative, vec![4.0, 5.0, 8.0, 10.0]);
        assert_eq!(summarize(&[]), Err(WorkloadError::EmptyRecords));
    }

    #[test]
    fn csv_layout() {
        let rec = |id, lat| LatencyRecord {
            logical_id: id,
            key: "get".into(),
            attempts: 1,
            first_attempt_ms: 0.0,
            completion_ms: lat,
            latency_ms: lat,
            outcome: RequestOutcome::Served,
        };
        let csv = latency_csv(&[rec(1, 2.5), rec(0, 1.0)]);
        assert_eq!(
            csv,
            "logical_id,key,attempts,first_attempt_ms,completion_ms,latency_ms,outcome\n\
             0,get,1,0,1,1,served\n1,get,1,0,2.5,2.5,served\n"
        );
        assert_eq!(cumulative_csv(&[rec(0, 1.0), rec(1, 2.5)]), "index,logical_id,cumulative_ms\n0,0,1\n1,1,3.5\n");
    }
}
