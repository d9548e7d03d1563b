//! Domain types shared by every module: requests, API calls, memory state.
//!
//! Times are `f64` simulation units (seconds in physical mode, abstract
//! integer units in unit mode); lengths are token counts.

use crate::error::{Result, SimError};
use crate::strategy::Strategy;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Request identifier.
pub type RequestId = u64;

/// API class labels with published duration statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApiType {
    Math,
    Qa,
    Ve,
    Chatbot,
    Image,
    Tts,
    Generic,
}

impl std::fmt::Display for ApiType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ApiType::Math => "math",
            ApiType::Qa => "qa",
            ApiType::Ve => "ve",
            ApiType::Chatbot => "chatbot",
            ApiType::Image => "image",
            ApiType::Tts => "tts",
            ApiType::Generic => "generic",
        };
        f.write_str(s)
    }
}

/// One external API call: its class, wall-clock duration, and the number of
/// tokens the response appends to the request context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiCallSpec {
    pub api_type: ApiType,
    /// Duration of the call in time units (the interception interval).
    pub duration: f64,
    /// Tokens appended to the context when the API returns.
    pub response_len: u64,
}

impl ApiCallSpec {
    pub fn new(api_type: ApiType, duration: f64, response_len: u64) -> Result<Self> {
        if !duration.is_finite() || duration < 0.0 {
            return Err(SimError::domain(format!(
                "api duration must be finite and >= 0, got {duration}"
            )));
        }
        Ok(Self {
            api_type,
            duration,
            response_len,
        })
    }
}

/// A decode stretch ending in one API call.
///
/// `pinned_strategy` overrides the predicted handling strategy for this
/// segment; trace fixtures use it to fix the Preserve/Discard/Swap action
/// independent of the cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub decode_len: u64,
    pub api: ApiCallSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_strategy: Option<Strategy>,
}

/// An arriving request: prompt, ordered API segments, and the final decode
/// stretch after the last API call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub id: RequestId,
    pub arrival_time: f64,
    pub prompt_len: u64,
    pub segments: Vec<Segment>,
    pub final_decode_len: u64,
}

impl RequestSpec {
    /// Validate the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if !self.arrival_time.is_finite() || self.arrival_time < 0.0 {
            return Err(SimError::Invalid {
                what: "request",
                reason: format!("id {}: arrival_time must be finite and >= 0", self.id),
            });
        }
        if self.prompt_len == 0 {
            return Err(SimError::Invalid {
                what: "request",
                reason: format!("id {}: prompt_len must be >= 1", self.id),
            });
        }
        if self.segments.is_empty() && self.final_decode_len == 0 {
            return Err(SimError::Invalid {
                what: "request",
                reason: format!(
                    "id {}: needs at least one API segment or a nonzero final decode",
                    self.id
                ),
            });
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if !seg.api.duration.is_finite() || seg.api.duration < 0.0 {
                return Err(SimError::Invalid {
                    what: "request",
                    reason: format!("id {}: segment {i} has negative api duration", self.id),
                });
            }
        }
        Ok(())
    }

    /// Total output tokens: decoded tokens plus appended API responses.
    pub fn total_output_len(&self) -> u64 {
        let decoded: u64 = self.segments.iter().map(|s| s.decode_len).sum();
        let responses: u64 = self.segments.iter().map(|s| s.api.response_len).sum();
        decoded + responses + self.final_decode_len
    }

    /// Context size (tokens) once the request has fully completed.
    pub fn final_context_len(&self) -> u64 {
        self.prompt_len + self.total_output_len()
    }

    /// Sum of all declared API durations.
    pub fn total_api_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.api.duration).sum()
    }
}

/// Device-memory bookkeeping: which requests hold context tokens on the
/// device, which are swapped out to the host.
///
/// Single-owner state, mutated only by the engine. The capacity invariant
/// (`resident tokens * mem_per_token <= capacity`) is asserted after every
/// mutation via [`MemoryState::check`].
#[derive(Debug, Clone)]
pub struct MemoryState {
    /// Capacity in memory units.
    pub capacity: f64,
    /// Memory units per context token.
    pub mem_per_token: f64,
    resident: BTreeMap<RequestId, u64>,
    swapped: BTreeMap<RequestId, u64>,
}

impl MemoryState {
    pub fn new(capacity: f64, mem_per_token: f64) -> Self {
        Self {
            capacity,
            mem_per_token,
            resident: BTreeMap::new(),
            swapped: BTreeMap::new(),
        }
    }

    /// Memory units currently in use on the device.
    pub fn used(&self) -> f64 {
        // + 0.0 normalizes the empty sum's negative zero for clean logs.
        self.resident.values().map(|&t| t as f64).sum::<f64>() * self.mem_per_token + 0.0
    }

    /// Free memory units.
    pub fn free(&self) -> f64 {
        self.capacity - self.used()
    }

    /// Resident context tokens for a request (0 when absent or swapped).
    pub fn resident_tokens(&self, id: RequestId) -> u64 {
        self.resident.get(&id).copied().unwrap_or(0)
    }

    /// Swapped-out context tokens for a request.
    pub fn swapped_tokens(&self, id: RequestId) -> u64 {
        self.swapped.get(&id).copied().unwrap_or(0)
    }

    /// Total resident tokens across all requests.
    pub fn resident_total_tokens(&self) -> u64 {
        self.resident.values().sum()
    }

    /// Place or update a request's resident context.
    pub fn set_resident(&mut self, id: RequestId, tokens: u64) {
        debug_assert!(
            !self.swapped.contains_key(&id),
            "request {id} is swapped; swap it in before mutating resident context"
        );
        if tokens == 0 {
            self.resident.remove(&id);
        } else {
            self.resident.insert(id, tokens);
        }
    }

    /// Grow a request's resident context by `delta` tokens.
    pub fn grow_resident(&mut self, id: RequestId, delta: u64) {
        let cur = self.resident_tokens(id);
        self.set_resident(id, cur + delta);
    }

    /// Drop a request's device memory entirely (discard or completion).
    pub fn release(&mut self, id: RequestId) {
        self.resident.remove(&id);
    }

    /// Move a request's context from device to host.
    pub fn swap_out(&mut self, id: RequestId) {
        if let Some(tokens) = self.resident.remove(&id) {
            self.swapped.insert(id, tokens);
        }
    }

    /// Restore a swapped-out context to the device.
    pub fn swap_in(&mut self, id: RequestId) {
        if let Some(tokens) = self.swapped.remove(&id) {
            self.resident.insert(id, tokens);
        }
    }

    /// Forget a swapped-out context (request finished or was discarded).
    pub fn drop_swapped(&mut self, id: RequestId) {
        self.swapped.remove(&id);
    }

    /// Assert the capacity invariant and the resident/swapped exclusivity.
    pub fn check(&self) -> Result<()> {
        let used = self.used();
        if used > self.capacity + 1e-9 {
            return Err(SimError::Invalid {
                what: "memory state",
                reason: format!("resident {used} exceeds capacity {}", self.capacity),
            });
        }
        for id in self.resident.keys() {
            if self.swapped.contains_key(id) {
                return Err(SimError::Invalid {
                    what: "memory state",
                    reason: format!("request {id} is both resident and swapped"),
                });
            }
        }
        Ok(())
    }
}
