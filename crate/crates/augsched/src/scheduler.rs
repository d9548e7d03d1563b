//! Queue management: per-iteration ranking, batch formation under a memory
//! budget, and starvation prevention, for the memory-over-time policy and the
//! FCFS / SJF / SJF-by-total-length baselines.
//!
//! Admission works on *claims*: a candidate claims the peak context it will
//! hold through the end of its current segment (it releases memory only at an
//! API boundary or at completion). The batch former admits candidates in rank
//! order while the sum of admitted claims plus all other resident context
//! stays within the budget. This is what lets a request run during another's
//! Preserve call exactly when it will get out of the way in time.

use crate::error::{Result, SimError};
use crate::model::RequestId;
use crate::strategy::Strategy;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Scheduling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// First come, first served; never preempts.
    Fcfs,
    /// Shortest remaining work first (tokens still to compute); preempts at
    /// iteration boundaries.
    Sjf,
    /// Shortest remaining work plus API time first; preempts at iteration
    /// boundaries.
    SjfTotal,
    /// Ascending memory-over-time score; never preempts mid-segment.
    Lamps,
}

impl Policy {
    /// Whether a higher-priority waiting request may displace a running one
    /// at an iteration boundary.
    pub fn preemptive(self) -> bool {
        matches!(self, Policy::Sjf | Policy::SjfTotal)
    }

    /// Canonical comparison-table order.
    pub const ALL: [Policy; 4] = [Policy::Fcfs, Policy::Sjf, Policy::SjfTotal, Policy::Lamps];
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Fcfs => f.write_str("fcfs"),
            Policy::Sjf => f.write_str("sjf"),
            Policy::SjfTotal => f.write_str("sjf-total"),
            Policy::Lamps => f.write_str("lamps"),
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcfs" => Ok(Policy::Fcfs),
            "sjf" => Ok(Policy::Sjf),
            "sjf-total" | "sjftotal" | "sjf_total" => Ok(Policy::SjfTotal),
            "lamps" => Ok(Policy::Lamps),
            other => Err(SimError::Invalid {
                what: "policy",
                reason: format!("unknown policy {other:?}"),
            }),
        }
    }
}

/// Disabled starvation threshold sentinel.
pub const STARVATION_DISABLED: u64 = u64::MAX;

/// Scheduler knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub policy: Policy,
    /// Iterations a request may be bypassed before it is force-prioritized.
    pub starvation_threshold: u64,
    /// Iterations between rank-score refreshes (LAMPS only).
    pub score_update_interval: u64,
    /// Cap on the summed context claims of one batch.
    pub max_batch_tokens: u64,
    /// Device memory budget in memory units.
    pub memory_budget: f64,
    /// Cap on concurrently executing requests (decode slots).
    pub max_batch_requests: usize,
}

impl SchedulerConfig {
    pub fn new(policy: Policy, memory_budget: f64) -> Self {
        Self {
            policy,
            starvation_threshold: 100,
            score_update_interval: 1,
            max_batch_tokens: u64::MAX,
            memory_budget,
            max_batch_requests: usize::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.starvation_threshold == 0 {
            return Err(SimError::Invalid {
                what: "scheduler config",
                reason: "starvation_threshold must be >= 1".into(),
            });
        }
        if self.score_update_interval == 0 {
            return Err(SimError::Invalid {
                what: "scheduler config",
                reason: "score_update_interval must be >= 1".into(),
            });
        }
        if !self.memory_budget.is_finite() || self.memory_budget <= 0.0 {
            return Err(SimError::Invalid {
                what: "scheduler config",
                reason: format!("memory_budget must be > 0, got {}", self.memory_budget),
            });
        }
        if self.max_batch_requests == 0 {
            return Err(SimError::Invalid {
                what: "scheduler config",
                reason: "max_batch_requests must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// A waiting-queue entry: cached rank state plus the starvation counter.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub id: RequestId,
    pub arrival: f64,
    /// Policy rank key (memory-over-time score, remaining work, or arrival).
    pub key: f64,
    /// Iterations since the key was last computed (LAMPS caching).
    pub score_age: u64,
    /// Iterations this entry has been bypassed since it was last scheduled.
    pub starvation_cnt: u64,
    /// Force-prioritized until completion.
    pub starving: bool,
}

impl QueueEntry {
    pub fn new(id: RequestId, arrival: f64, key: f64) -> Self {
        Self {
            id,
            arrival,
            key,
            score_age: 0,
            starvation_cnt: 0,
            starving: false,
        }
    }
}

/// Sort entries into scheduling order: starving entries ahead of everything,
/// both groups internally by ascending key, ties by arrival then id.
pub fn rank_entries(entries: &mut [QueueEntry]) {
    entries.sort_by(|a, b| {
        b.starving
            .cmp(&a.starving)
            .then(a.key.total_cmp(&b.key))
            .then(a.arrival.total_cmp(&b.arrival))
            .then(a.id.cmp(&b.id))
    });
}

/// Flip entries whose counter reached the threshold into the starving state.
/// The counter resets; the starving flag is sticky until completion.
pub fn mark_starving(entries: &mut [QueueEntry], threshold: u64) {
    if threshold == STARVATION_DISABLED {
        return;
    }
    for e in entries.iter_mut() {
        if !e.starving && e.starvation_cnt >= threshold {
            e.starving = true;
            e.starvation_cnt = 0;
        }
    }
}

/// One admission candidate, in rank order.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub id: RequestId,
    /// Peak context tokens held through the end of its current segment.
    pub claim_tokens: u64,
    /// Context tokens this request already holds on the device.
    pub held_tokens: u64,
    /// Already in the running batch (only preemptive policies may drop it).
    pub running: bool,
    /// Force-prioritized: if it cannot be admitted, nothing ranked below it
    /// is admitted either, so memory drains toward it.
    pub starving: bool,
}

/// Result of one batch-formation pass.
#[derive(Debug, Clone, Default)]
pub struct BatchPlan {
    pub admitted: Vec<RequestId>,
    pub deferred: Vec<RequestId>,
    /// Candidates whose claim alone can never fit the budget.
    pub infeasible: Vec<RequestId>,
}

/// Greedily admit ranked candidates while slots, the token cap, and the
/// memory budget allow. `pinned` are batch members that must stay (phase
/// work in flight, or any running member under a non-preemptive policy);
/// `resident_other_tokens` is context held by requests that are neither
/// pinned nor candidates (API holders mid-swap-out, etc.).
pub fn form_batch(
    ranked: &[Candidate],
    pinned: &[Candidate],
    resident_other_tokens: u64,
    cfg: &SchedulerConfig,
    mem_per_token: f64,
) -> BatchPlan {
    let budget_tokens = cfg.memory_budget / mem_per_token;

    let mut plan = BatchPlan::default();
    let mut slots = pinned.len();
    let mut batch_tokens: u64 = pinned.iter().map(|c| c.claim_tokens).sum();
    // Memory accounting: every held token stays resident whether or not its
    // owner is admitted; admission additionally reserves claim - held.
    let resident_tokens: f64 = resident_other_tokens as f64
        + pinned.iter().map(|c| c.held_tokens as f64).sum::<f64>()
        + ranked.iter().map(|c| c.held_tokens as f64).sum::<f64>();
    let mut reserved_extra: f64 = pinned
        .iter()
        .map(|c| c.claim_tokens.saturating_sub(c.held_tokens) as f64)
        .sum();

    let mut blocked = false;
    for cand in ranked {
        if cand.claim_tokens as f64 > budget_tokens + 1e-9
            || cand.claim_tokens > cfg.max_batch_tokens
        {
            plan.infeasible.push(cand.id);
            continue;
        }
        let extra = cand.claim_tokens.saturating_sub(cand.held_tokens) as f64;
        let fits = !blocked
            && slots < cfg.max_batch_requests
            && batch_tokens.saturating_add(cand.claim_tokens) <= cfg.max_batch_tokens
            && resident_tokens + reserved_extra + extra <= budget_tokens + 1e-9;
        if fits {
            plan.admitted.push(cand.id);
            slots += 1;
            batch_tokens += cand.claim_tokens;
            reserved_extra += extra;
        } else {
            // An unfit starving entry holds its place: nothing below it is
            // admitted, so running work drains and memory frees toward it.
            // Non-starving entries are bypassed on a fit basis.
            if cand.starving {
                blocked = true;
            }
            plan.deferred.push(cand.id);
        }
    }
    plan
}

/// The three strategy-keyed API wait sets.
#[derive(Debug, Clone, Default)]
pub struct ApiWaitQueues {
    preserve: BTreeMap<RequestId, f64>,
    discard: BTreeMap<RequestId, f64>,
    swap: BTreeMap<RequestId, f64>,
}

impl ApiWaitQueues {
    pub fn put(&mut self, strategy: Strategy, id: RequestId, api_finish: f64) {
        self.queue_mut(strategy).insert(id, api_finish);
    }

    pub fn remove(&mut self, strategy: Strategy, id: RequestId) -> Option<f64> {
        self.queue_mut(strategy).remove(&id)
    }

    pub fn contains(&self, strategy: Strategy, id: RequestId) -> bool {
        self.queue(strategy).contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.preserve.len() + self.discard.len() + self.swap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn queue(&self, strategy: Strategy) -> &BTreeMap<RequestId, f64> {
        match strategy {
            Strategy::Preserve => &self.preserve,
            Strategy::Discard => &self.discard,
            Strategy::Swap => &self.swap,
        }
    }

    fn queue_mut(&mut self, strategy: Strategy) -> &mut BTreeMap<RequestId, f64> {
        match strategy {
            Strategy::Preserve => &mut self.preserve,
            Strategy::Discard => &mut self.discard,
            Strategy::Swap => &mut self.swap,
        }
    }
}
