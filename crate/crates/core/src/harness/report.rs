//! Sample files and summary statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{Mode, WorkloadOp};
use super::HarnessError;
use crate::time::SimDuration;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatencySample {
    pub scenario: String,
    pub mode: Mode,
    pub operation: WorkloadOp,
    pub request_index: usize,
    pub rtt: SimDuration,
}

impl LatencySample {
    pub fn rtt_ms(&self) -> f64 {
        self.rtt.as_millis_f64()
    }
}

/// Milliseconds with six decimals, computed from integer nanoseconds so the
/// text never depends on float formatting.
pub fn format_ms(d: SimDuration) -> String {
    let ns = d.as_nanos();
    format!("{}.{:06}", ns / 1_000_000, ns % 1_000_000)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub scenario: String,
    pub mode: Mode,
    pub operation: WorkloadOp,
    pub n: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

fn group_key(s: &LatencySample) -> (String, Mode, WorkloadOp) {
    (s.scenario.clone(), s.mode, s.operation)
}

/// One summary per (scenario, mode, operation), in key order.
pub fn summarize(samples: &[LatencySample]) -> Vec<Summary> {
    let mut groups: BTreeMap<(String, Mode, WorkloadOp), Vec<u64>> = BTreeMap::new();
    for s in samples {
        groups
            .entry(group_key(s))
            .or_default()
            .push(s.rtt.as_nanos());
    }
    groups
        .into_iter()
        .map(|((scenario, mode, operation), mut ns)| {
            ns.sort_unstable();
            let n = ns.len();
            let ms = |v: u64| v as f64 / 1e6;
            let total: u128 = ns.iter().map(|&v| v as u128).sum();
            let median = if n % 2 == 1 {
                ms(ns[n / 2])
            } else {
                (ms(ns[n / 2 - 1]) + ms(ns[n / 2])) / 2.0
            };
            let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
            Summary {
                scenario,
                mode,
                operation,
                n,
                mean_ms: total as f64 / n as f64 / 1e6,
                median_ms: median,
                p95_ms: ms(ns[rank - 1]),
                min_ms: ms(ns[0]),
                max_ms: ms(ns[n - 1]),
            }
        })
        .collect()
}

pub fn write_samples_csv(samples: &[LatencySample]) -> String {
    let mut out = String::from("scenario,mode,operation,request_index,rtt_ms\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.scenario,
            s.mode.as_str(),
            s.operation.as_str(),
            s.request_index,
            format_ms(s.rtt)
        );
    }
    out
}

pub fn write_summary(summaries: &[Summary]) -> String {
    let mut out = String::new();
    for s in summaries {
        let _ = writeln!(
            out,
            "{} {} {}: n={} mean={:.6} median={:.6} p95={:.6} min={:.6} max={:.6}",
            s.scenario,
            s.mode.as_str(),
            s.operation.as_str(),
            s.n,
            s.mean_ms,
            s.median_ms,
            s.p95_ms,
            s.min_ms,
            s.max_ms
        );
    }
    out
}

/// Writes `samples.csv` and `summary.txt` into `dir`, creating it if needed.
pub fn emit_results(samples: &[LatencySample], dir: &Path) -> Result<Vec<Summary>, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::ConfigInvalid("no samples to write".into()));
    }
    fs::create_dir_all(dir)?;
    let summaries = summarize(samples);
    fs::write(dir.join("samples.csv"), write_samples_csv(samples))?;
    fs::write(dir.join("summary.txt"), write_summary(&summaries))?;
    Ok(summaries)
}
