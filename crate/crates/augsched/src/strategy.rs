//! Handling-strategy prediction and the memory-over-time rank score.
//!
//! Before a request is scheduled, the three candidate wastes (Preserve /
//! Discard / Swap) are evaluated from its *predicted* pre-API length and API
//! characteristics; the argmin becomes the request's handling strategy. The
//! same decision then feeds the rank score: the area under the request's
//! predicted memory-over-time curve for its remaining lifetime. Lower area
//! means higher scheduling priority.

use crate::cost::{
    decode_ramp_area, t_fwd, waste_discard, waste_preserve, waste_swap, CostModel,
};
use crate::error::{Result, SimError};
use crate::model::{ApiCallSpec, RequestSpec};
use serde::{Deserialize, Serialize};

/// Memory handling strategy during an API call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Keep the KV cache resident for the whole call.
    Preserve,
    /// Free it immediately and recompute from scratch on return.
    Discard,
    /// Move it to host memory and restore it on return.
    Swap,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Preserve => f.write_str("preserve"),
            Strategy::Discard => f.write_str("discard"),
            Strategy::Swap => f.write_str("swap"),
        }
    }
}

/// Predicted properties of a request's next segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Decode tokens before the next API call.
    pub pre_api_len: f64,
    /// Duration of the next API call.
    pub api_duration: f64,
    /// Tokens the API response will append.
    pub api_response_len: f64,
    /// Total remaining output tokens (all segments and responses).
    pub total_remaining_len: f64,
}

impl Prediction {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pre_api_len", self.pre_api_len),
            ("api_duration", self.api_duration),
            ("api_response_len", self.api_response_len),
            ("total_remaining_len", self.total_remaining_len),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::domain(format!(
                    "prediction field {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Exact prediction for one segment of a request, given how many output
    /// tokens were already produced.
    pub fn exact(req: &RequestSpec, completed_segments: usize, emitted_output: u64) -> Self {
        let (decode_len, api) = segment_parts(req, completed_segments);
        let remaining = req.total_output_len().saturating_sub(emitted_output);
        Self {
            pre_api_len: decode_len as f64,
            api_duration: api.map(|a| a.duration).unwrap_or(0.0),
            api_response_len: api.map(|a| a.response_len as f64).unwrap_or(0.0),
            total_remaining_len: remaining as f64,
        }
    }
}

/// Estimated batch context at decision time: `c_other` is the co-resident
/// context stalled by a discard recomputation, `c_batch` the total batch
/// context stalled by a swap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchContextEstimate {
    pub c_other: u64,
    pub c_batch: u64,
}

impl BatchContextEstimate {
    pub fn new(c_other: u64, c_batch: u64) -> Result<Self> {
        if c_batch < c_other {
            return Err(SimError::domain(format!(
                "c_batch ({c_batch}) must be >= c_other ({c_other})"
            )));
        }
        Ok(Self { c_other, c_batch })
    }

    /// Trivial estimate: the request alone in the batch.
    pub fn solo(c_i: u64) -> Self {
        Self {
            c_other: 0,
            c_batch: c_i,
        }
    }

    /// Load-profile estimate: assume device memory runs full, so a forward
    /// stall affects `capacity - c_i` other tokens and a swap stalls the whole
    /// capacity. This is what the engine uses under load.
    pub fn full_memory(capacity_tokens: u64, c_i: u64) -> Self {
        Self {
            c_other: capacity_tokens.saturating_sub(c_i),
            c_batch: capacity_tokens.max(c_i),
        }
    }
}

/// Chosen strategy plus the three evaluated wastes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandlingDecision {
    pub strategy: Strategy,
    pub waste_preserve: f64,
    pub waste_discard: f64,
    pub waste_swap: f64,
}

impl HandlingDecision {
    /// Waste of the chosen strategy.
    pub fn chosen_waste(&self) -> f64 {
        match self.strategy {
            Strategy::Preserve => self.waste_preserve,
            Strategy::Discard => self.waste_discard,
            Strategy::Swap => self.waste_swap,
        }
    }

    /// Same wastes with the strategy overridden (pinned fixtures).
    pub fn with_strategy(self, strategy: Strategy) -> Self {
        Self { strategy, ..self }
    }
}

/// Pick the handling strategy minimizing predicted memory waste for the next
/// API call. `c_i = prompt_len + pre_api_len`. Ties resolve in the order
/// Preserve, Discard, Swap.
pub fn choose_strategy(
    pred: &Prediction,
    prompt_len: u64,
    est: BatchContextEstimate,
    cm: &CostModel,
) -> Result<HandlingDecision> {
    pred.validate()?;
    let c_i = prompt_len + pred.pre_api_len.round() as u64;
    let wp = waste_preserve(pred.api_duration, c_i, cm.mem_per_token)?;
    let wd = waste_discard(c_i, est.c_other, cm.mem_per_token, cm)?;
    let ws = waste_swap(c_i, est.c_batch.max(c_i), cm.mem_per_token, cm)?;

    let mut strategy = Strategy::Preserve;
    let mut best = wp;
    if wd < best {
        strategy = Strategy::Discard;
        best = wd;
    }
    if ws < best {
        strategy = Strategy::Swap;
    }
    Ok(HandlingDecision {
        strategy,
        waste_preserve: wp,
        waste_discard: wd,
        waste_swap: ws,
    })
}

/// Area under the predicted memory-over-time curve for the remainder of a
/// request, starting from a base context of `base_ctx` tokens:
///
/// * pre-API decode ramp from `base_ctx` over `pre_api_len` tokens,
/// * the API phase, costed as the chosen strategy's waste (Preserve holds the
///   context, Discard is free during the call but pays the recompute stall,
///   Swap pays both transfers),
/// * post-API decode ramp from `base_ctx + pre_api_len + response_len` over
///   the remaining predicted tokens.
///
/// Lower score = higher priority.
pub fn score_segment(
    base_ctx: u64,
    pred: &Prediction,
    decision: &HandlingDecision,
    has_api: bool,
    cm: &CostModel,
) -> f64 {
    let pre = pred.pre_api_len.round() as u64;
    let resp = pred.api_response_len.round() as u64;
    let total = pred.total_remaining_len.round() as u64;

    let pre_ramp = decode_ramp_area(base_ctx, pre, cm);
    if !has_api {
        // No API left: the whole remainder is one decode ramp.
        return decode_ramp_area(base_ctx, total, cm);
    }

    let api_area = decision.chosen_waste();
    let post_base = base_ctx + pre + resp;
    let post_len = total.saturating_sub(pre + resp);
    let post_ramp = decode_ramp_area(post_base, post_len, cm);

    pre_ramp + api_area + post_ramp
}

/// Rank score for a freshly arrived request: area under its predicted
/// memory-over-time curve, including the prompt held during prefill.
pub fn memory_time_score(
    req: &RequestSpec,
    pred: &Prediction,
    decision: &HandlingDecision,
    cm: &CostModel,
) -> f64 {
    let prefill_area =
        req.prompt_len as f64 * cm.mem_per_token * t_fwd(req.prompt_len, cm);
    prefill_area + score_segment(req.prompt_len, pred, decision, !req.segments.is_empty(), cm)
}

fn segment_parts(req: &RequestSpec, completed_segments: usize) -> (u64, Option<&ApiCallSpec>) {
    if completed_segments < req.segments.len() {
        let seg = &req.segments[completed_segments];
        (seg.decode_len, Some(&seg.api))
    } else {
        (req.final_decode_len, None)
    }
}

/// The next unprocessed segment of a request, or `(final_decode_len, None)`
/// once every API call is done.
pub fn segment_for_next_api(
    req: &RequestSpec,
    completed_segments: usize,
) -> Result<(u64, Option<&ApiCallSpec>)> {
    if completed_segments > req.segments.len() {
        return Err(SimError::domain(format!(
            "completed_segments {completed_segments} out of range for request {} with {} segments",
            req.id,
            req.segments.len()
        )));
    }
    Ok(segment_parts(req, completed_segments))
}
