//! Latency aggregation and policy comparison.
//!
//! End-to-end latency is completion minus arrival; TTFT is first token minus
//! arrival. Percentiles use the nearest-rank rule (no interpolation), so
//! aggregates are reproducible bit-for-bit from the stored timelines.

use crate::engine::{Rejection, RequestTimeline};
use crate::error::{Result, SimError};
use crate::scheduler::Policy;
use serde::{Deserialize, Serialize};

/// Mean / median / p99 of one latency series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub mean: f64,
    pub median: f64,
    pub p99: f64,
}

/// Aggregates over completed requests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub e2e_latency: StatSummary,
    pub ttft: StatSummary,
}

/// Result of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub policy: Policy,
    pub seed: u64,
    pub unit_mode: bool,
    pub horizon: Option<f64>,
    /// Fingerprint of the input trace; comparisons require equal digests.
    pub trace_digest: u64,
    pub n_requests: usize,
    pub completed: usize,
    pub rejected: Vec<Rejection>,
    pub timelines: Vec<RequestTimeline>,
    /// Absent when no request completed.
    pub aggregates: Option<Aggregates>,
    /// Completed requests per unit time over min(horizon, last completion).
    pub throughput: Option<f64>,
}

/// Nearest-rank percentile of a sorted sample: the value at rank
/// `ceil(p/100 * n)` (1-based).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn summarize(values: &mut [f64]) -> StatSummary {
    values.sort_by(|a, b| a.total_cmp(b));
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    StatSummary {
        mean,
        median: nearest_rank(values, 50.0),
        p99: nearest_rank(values, 99.0),
    }
}

/// Aggregate completed timelines. Returns `None` for an empty input rather
/// than zeros.
pub fn aggregate(timelines: &[RequestTimeline]) -> Option<Aggregates> {
    let mut e2e = Vec::new();
    let mut ttft = Vec::new();
    for t in timelines {
        if let Some(c) = t.completion {
            e2e.push(c - t.arrival);
            ttft.push(t.first_token.unwrap_or(c) - t.arrival);
        }
    }
    if e2e.is_empty() {
        return None;
    }
    Some(Aggregates {
        e2e_latency: summarize(&mut e2e),
        ttft: summarize(&mut ttft),
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn build_report(
    policy: Policy,
    seed: u64,
    unit_mode: bool,
    horizon: Option<f64>,
    trace_digest: u64,
    n_requests: usize,
    timelines: Vec<RequestTimeline>,
    rejected: Vec<Rejection>,
) -> SimReport {
    let completed = timelines.iter().filter(|t| t.completion.is_some()).count();
    let aggregates = aggregate(&timelines);
    let last_completion = timelines
        .iter()
        .filter_map(|t| t.completion)
        .fold(f64::NEG_INFINITY, f64::max);
    let throughput = if completed > 0 {
        let span = match horizon {
            Some(h) => h.min(last_completion),
            None => last_completion,
        };
        (span > 0.0).then(|| completed as f64 / span)
    } else {
        None
    };
    SimReport {
        schema_version: 1,
        policy,
        seed,
        unit_mode,
        horizon,
        trace_digest,
        n_requests,
        completed,
        rejected,
        timelines,
        aggregates,
        throughput,
    }
}

impl SimReport {
    /// Recompute aggregates from the raw timelines and verify they match the
    /// stored ones exactly.
    pub fn self_check(&self) -> Result<()> {
        let fresh = aggregate(&self.timelines);
        if fresh != self.aggregates {
            return Err(SimError::Invalid {
                what: "report",
                reason: "stored aggregates do not match recomputation from timelines".into(),
            });
        }
        Ok(())
    }

    pub fn mean_e2e(&self) -> Option<f64> {
        self.aggregates.map(|a| a.e2e_latency.mean)
    }

    pub fn mean_ttft(&self) -> Option<f64> {
        self.aggregates.map(|a| a.ttft.mean)
    }

    pub fn p99_e2e(&self) -> Option<f64> {
        self.aggregates.map(|a| a.e2e_latency.p99)
    }
}

/// One row of a policy comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: Policy,
    pub mean_e2e: f64,
    pub p99_e2e: f64,
    pub mean_ttft: f64,
    pub p99_ttft: f64,
    pub throughput: f64,
    /// Percent deltas vs the baseline row (negative is better for latency).
    pub mean_e2e_delta_pct: f64,
    pub p99_e2e_delta_pct: f64,
    pub mean_ttft_delta_pct: f64,
}

/// A rendered comparison across policies on one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub baseline: Policy,
    pub rows: Vec<ComparisonRow>,
}

fn pct_delta(value: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (value - base) / base * 100.0
    }
}

/// Compare reports sharing one trace. Rows come out in the canonical order
/// FCFS, SJF, SJF-total, LAMPS; deltas are relative to `baseline` (which
/// must be among the reports).
pub fn compare(reports: &[SimReport], baseline: Policy) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(SimError::Invalid {
            what: "comparison",
            reason: "no reports given".into(),
        });
    }
    let digest = reports[0].trace_digest;
    for r in reports {
        if r.trace_digest != digest {
            return Err(SimError::TraceMismatch(format!(
                "report for {} has digest {:#x}, expected {:#x}",
                r.policy, r.trace_digest, digest
            )));
        }
        r.self_check()?;
    }
    let base = reports
        .iter()
        .find(|r| r.policy == baseline)
        .ok_or_else(|| SimError::Invalid {
            what: "comparison",
            reason: format!("baseline policy {baseline} not among the reports"),
        })?;
    let base_agg = base.aggregates.ok_or_else(|| SimError::Invalid {
        what: "comparison",
        reason: "baseline report has no completed requests".into(),
    })?;

    let mut rows = Vec::new();
    for policy in Policy::ALL {
        for r in reports.iter().filter(|r| r.policy == policy) {
            let Some(agg) = r.aggregates else { continue };
            rows.push(ComparisonRow {
                policy,
                mean_e2e: agg.e2e_latency.mean,
                p99_e2e: agg.e2e_latency.p99,
                mean_ttft: agg.ttft.mean,
                p99_ttft: agg.ttft.p99,
                throughput: r.throughput.unwrap_or(0.0),
                mean_e2e_delta_pct: pct_delta(agg.e2e_latency.mean, base_agg.e2e_latency.mean),
                p99_e2e_delta_pct: pct_delta(agg.e2e_latency.p99, base_agg.e2e_latency.p99),
                mean_ttft_delta_pct: pct_delta(agg.ttft.mean, base_agg.ttft.mean),
            });
        }
    }
    Ok(ComparisonTable { baseline, rows })
}

impl std::fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10}",
            "policy", "mean e2e", "p99 e2e", "mean ttft", "p99 ttft", "throughput", "d-mean%"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>+10.2}",
                r.policy.to_string(),
                r.mean_e2e,
                r.p99_e2e,
                r.mean_ttft,
                r.p99_ttft,
                r.throughput,
                r.mean_e2e_delta_pct,
            )?;
        }
        write!(f, "baseline: {}", self.baseline)
    }
}
