//! Trace ingestion, synthetic workload generation, and length/duration
//! predictors.
//!
//! Trace files are line-delimited JSON, one request per line, with a
//! `schema_version` field guarding compatibility. Synthetic traces are built
//! from per-class API statistics (mean/std of call duration and calls per
//! request): Poisson arrivals, truncated-normal API counts and durations, and
//! uniformly distributed decode stretch lengths.

use crate::error::{Result, SimError};
use crate::model::{ApiCallSpec, ApiType, RequestSpec, Segment};
use crate::strategy::Prediction;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Supported trace schema version.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

fn default_schema_version() -> u32 {
    TRACE_SCHEMA_VERSION
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRecord {
    #[serde(default = "default_schema_version")]
    schema_version: u32,
    #[serde(flatten)]
    request: RequestSpec,
}

/// Load a line-delimited trace, validating every record. Records are
/// returned sorted by arrival time.
pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<RequestSpec>> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| SimError::TraceParse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if record.schema_version != TRACE_SCHEMA_VERSION {
            return Err(SimError::TraceParse {
                line: lineno,
                reason: format!(
                    "unsupported schema_version {} (expected {TRACE_SCHEMA_VERSION})",
                    record.schema_version
                ),
            });
        }
        record.request.validate().map_err(|e| SimError::TraceParse {
            line: lineno,
            reason: e.to_string(),
        })?;
        out.push(record.request);
    }
    out.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time).then(a.id.cmp(&b.id)));
    Ok(out)
}

/// Write a trace as line-delimited JSON.
pub fn save_trace(path: impl AsRef<Path>, trace: &[RequestSpec]) -> Result<()> {
    let mut file = std::fs::File::create(path.as_ref())?;
    for request in trace {
        let record = TraceRecord {
            schema_version: TRACE_SCHEMA_VERSION,
            request: request.clone(),
        };
        let line = serde_json::to_string(&record).expect("trace record serializes");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// FNV-1a fingerprint of a trace, used to refuse cross-trace comparisons.
pub fn trace_digest(trace: &[RequestSpec]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for r in trace {
        eat(&r.id.to_le_bytes());
        eat(&r.arrival_time.to_bits().to_le_bytes());
        eat(&r.prompt_len.to_le_bytes());
        eat(&r.final_decode_len.to_le_bytes());
        for s in &r.segments {
            eat(&s.decode_len.to_le_bytes());
            eat(&s.api.duration.to_bits().to_le_bytes());
            eat(&s.api.response_len.to_le_bytes());
        }
    }
    hash
}

/// Per-class API statistics: (mean, std) of call duration in seconds and of
/// calls per request, plus the constant response length assumed for the
/// class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiClassStats {
    pub api_type: ApiType,
    pub duration_mean: f64,
    pub duration_std: f64,
    pub count_mean: f64,
    pub count_std: f64,
    #[serde(default = "default_response_len")]
    pub response_len: u64,
}

fn default_response_len() -> u64 {
    8
}

impl ApiClassStats {
    pub fn new(api_type: ApiType, duration: (f64, f64), count: (f64, f64)) -> Self {
        Self {
            api_type,
            duration_mean: duration.0,
            duration_std: duration.1,
            count_mean: count.0,
            count_std: count.1,
            response_len: default_response_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("duration_mean", self.duration_mean),
            ("duration_std", self.duration_std),
            ("count_mean", self.count_mean),
            ("count_std", self.count_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::Invalid {
                    what: "api class stats",
                    reason: format!("{name} must be finite and >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// The six measured interception API classes: duration (mean, std) seconds
/// and calls per request (mean, std).
pub fn intercept_classes() -> Vec<ApiClassStats> {
    vec![
        ApiClassStats::new(ApiType::Math, (9e-5, 6e-5), (3.75, 1.3)),
        ApiClassStats::new(ApiType::Qa, (0.69, 0.17), (2.52, 1.73)),
        ApiClassStats::new(ApiType::Ve, (0.09, 0.014), (28.18, 15.2)),
        ApiClassStats::new(ApiType::Chatbot, (28.6, 15.6), (4.45, 1.96)),
        ApiClassStats::new(ApiType::Image, (20.03, 7.8), (6.91, 3.93)),
        ApiClassStats::new(ApiType::Tts, (17.24, 7.6), (6.91, 3.93)),
    ]
}

/// Tool-use dataset aggregate statistics (one pooled class).
pub fn toolbench_classes() -> Vec<ApiClassStats> {
    vec![ApiClassStats::new(ApiType::Generic, (1.72, 3.33), (2.45, 1.81))]
}

/// Tunables for the synthetic generator beyond the published statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    /// Inclusive range of decode-segment lengths.
    pub decode_len_range: (u64, u64),
    /// Inclusive range of prompt lengths.
    pub prompt_len_range: (u64, u64),
    /// Cap on API calls per request (keeps pathological draws bounded).
    pub max_api_calls: u64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            decode_len_range: (1, 200),
            prompt_len_range: (8, 64),
            max_api_calls: 16,
        }
    }
}

/// Generate `n` requests with Poisson arrivals at `arrival_rate` requests per
/// time unit. Each request draws one API class (uniformly), an API count from
/// the class's truncated normal, and per-call durations likewise; decode
/// stretches are uniform over the configured range. Negative normal draws
/// clamp to zero, which biases means slightly upward; the statistical tests
/// account for that.
pub fn generate_synthetic(
    classes: &[ApiClassStats],
    n: usize,
    arrival_rate: f64,
    seed: u64,
) -> Result<Vec<RequestSpec>> {
    generate_synthetic_with(classes, n, arrival_rate, seed, &SynthesisOptions::default())
}

/// [`generate_synthetic`] with explicit options.
pub fn generate_synthetic_with(
    classes: &[ApiClassStats],
    n: usize,
    arrival_rate: f64,
    seed: u64,
    opts: &SynthesisOptions,
) -> Result<Vec<RequestSpec>> {
    if classes.is_empty() {
        return Err(SimError::Invalid {
            what: "synthetic workload",
            reason: "at least one API class is required".into(),
        });
    }
    if !arrival_rate.is_finite() || arrival_rate <= 0.0 {
        return Err(SimError::Invalid {
            what: "synthetic workload",
            reason: format!("arrival_rate must be > 0, got {arrival_rate}"),
        });
    }
    for c in classes {
        c.validate()?;
    }
    let (dec_lo, dec_hi) = opts.decode_len_range;
    let (pr_lo, pr_hi) = opts.prompt_len_range;
    if dec_lo < 1 || dec_hi < dec_lo || pr_lo < 1 || pr_hi < pr_lo {
        return Err(SimError::Invalid {
            what: "synthetic workload",
            reason: "length ranges must satisfy 1 <= lo <= hi".into(),
        });
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let inter_arrival = Exp::new(arrival_rate).expect("rate > 0");
    let mut clock = 0.0;
    let mut out = Vec::with_capacity(n);
    for id in 0..n as u64 {
        clock += inter_arrival.sample(&mut rng);
        let class = &classes[rng.gen_range(0..classes.len())];
        let n_calls = truncated_normal(&mut rng, class.count_mean, class.count_std)
            .round()
            .max(0.0) as u64;
        let n_calls = n_calls.min(opts.max_api_calls);
        let mut segments = Vec::with_capacity(n_calls as usize);
        for _ in 0..n_calls {
            let duration = truncated_normal(&mut rng, class.duration_mean, class.duration_std);
            segments.push(Segment {
                decode_len: rng.gen_range(dec_lo..=dec_hi),
                api: ApiCallSpec {
                    api_type: class.api_type,
                    duration,
                    response_len: class.response_len,
                },
                pinned_strategy: None,
            });
        }
        let req = RequestSpec {
            id,
            arrival_time: clock,
            prompt_len: rng.gen_range(pr_lo..=pr_hi),
            segments,
            final_decode_len: rng.gen_range(dec_lo..=dec_hi),
        };
        debug_assert!(req.validate().is_ok());
        out.push(req);
    }
    Ok(out)
}

fn truncated_normal(rng: &mut StdRng, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean.max(0.0);
    }
    let normal = Normal::new(mean, std).expect("std >= 0");
    normal.sample(rng).max(0.0)
}

/// Length/duration predictor variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PredictorKind {
    /// Returns true values unchanged.
    Oracle,
    /// Replaces the pre-API length with its bin midpoint (classifier-style
    /// binned lengths: `n_bins` bins of `bin_width` tokens each).
    Binned { bin_width: u64, n_bins: u64 },
    /// Adds Gaussian error with std `p * value` to every field of the inner
    /// predictor's output, clamping at zero.
    Noisy { p: f64, inner: Box<PredictorKind> },
}

impl PredictorKind {
    /// The classifier setup used for length prediction: 50 bins of 10 tokens.
    pub fn default_binned() -> Self {
        PredictorKind::Binned {
            bin_width: 10,
            n_bins: 50,
        }
    }

    /// Gaussian-noise injection over the oracle.
    pub fn noisy(p: f64) -> Self {
        PredictorKind::Noisy {
            p,
            inner: Box::new(PredictorKind::Oracle),
        }
    }
}

/// Apply a predictor to the true next-segment values.
pub fn predict(kind: &PredictorKind, truth: &Prediction, rng: &mut StdRng) -> Prediction {
    match kind {
        PredictorKind::Oracle => *truth,
        PredictorKind::Binned { bin_width, n_bins } => {
            let mut p = *truth;
            p.pre_api_len = bin_midpoint(truth.pre_api_len, *bin_width, *n_bins);
            p
        }
        PredictorKind::Noisy { p, inner } => {
            let base = predict(inner, truth, rng);
            Prediction {
                pre_api_len: noisy_field(base.pre_api_len, *p, rng),
                api_duration: noisy_field(base.api_duration, *p, rng),
                api_response_len: noisy_field(base.api_response_len, *p, rng),
                total_remaining_len: noisy_field(base.total_remaining_len, *p, rng),
            }
        }
    }
}

fn bin_midpoint(len: f64, bin_width: u64, n_bins: u64) -> f64 {
    let width = bin_width.max(1);
    let bin = ((len / width as f64).floor() as u64).min(n_bins.saturating_sub(1));
    (bin * width) as f64 + width as f64 / 2.0
}

fn noisy_field(value: f64, p: f64, rng: &mut StdRng) -> f64 {
    let std = p * value;
    if std <= 0.0 {
        return value;
    }
    let normal = Normal::new(0.0, std).expect("std > 0");
    (value + normal.sample(rng)).max(0.0)
}

/// The three-request reference trace used across docs and golden tests:
/// all arrive at t=0, total lengths 6/2/3 (prompt included), API durations
/// 2/7/1, handling pinned to Preserve/Discard/Swap. Under a memory budget of
/// 6 units and a single decode slot in unit mode it exercises every strategy
/// and all four policies disagree on the schedule.
pub fn reference_trace() -> Vec<RequestSpec> {
    let seg = |decode_len, duration, strategy| Segment {
        decode_len,
        api: ApiCallSpec {
            api_type: ApiType::Generic,
            duration,
            response_len: 0,
        },
        pinned_strategy: Some(strategy),
    };
    vec![
        RequestSpec {
            id: 1,
            arrival_time: 0.0,
            prompt_len: 1,
            segments: vec![seg(4, 2.0, crate::strategy::Strategy::Preserve)],
            final_decode_len: 1,
        },
        RequestSpec {
            id: 2,
            arrival_time: 0.0,
            prompt_len: 1,
            segments: vec![seg(0, 7.0, crate::strategy::Strategy::Discard)],
            final_decode_len: 1,
        },
        RequestSpec {
            id: 3,
            arrival_time: 0.0,
            prompt_len: 1,
            segments: vec![seg(1, 1.0, crate::strategy::Strategy::Swap)],
            final_decode_len: 1,
        },
    ]
}
