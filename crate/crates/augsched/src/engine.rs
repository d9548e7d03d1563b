//! Deterministic discrete-event engine.
//!
//! The engine advances in decode iterations: at every iteration boundary it
//! processes due events (arrivals, API completions, swap-outs), re-ranks the
//! waiting queue, re-forms the running batch under the memory budget, and
//! executes the next iteration. Stretches with no scheduling activity are
//! fast-forwarded in closed form, so runtime scales with events rather than
//! tokens; `step_iteration` forces single-iteration stepping and must produce
//! the identical event log.
//!
//! Identical `(trace, config, seed)` always yields a bit-identical report and
//! event log: all internal state lives in ordered containers and every heap
//! tie is broken by `(time, kind, request id, sequence)`.

use crate::cost::{decode_time, t_fwd, t_swap, waste_discard, waste_swap, CostModel};
use crate::error::{Result, SimError};
use crate::metrics::{self, SimReport};
use crate::model::{MemoryState, RequestId, RequestSpec};
use crate::scheduler::{
    form_batch, mark_starving, rank_entries, ApiWaitQueues, Candidate, Policy, QueueEntry,
    SchedulerConfig, STARVATION_DISABLED,
};
use crate::strategy::{
    choose_strategy, score_segment, segment_for_next_api, BatchContextEstimate, HandlingDecision,
    Prediction, Strategy,
};
use crate::workload::{predict, trace_digest, PredictorKind};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

/// Event kinds, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    IterationComplete,
    ApiFinish,
    SwapOutDone,
    SwapInDone,
    RecomputeDone,
}

/// One line of the structured event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub request_id: RequestId,
    /// Device memory units in use after the event.
    pub mem_in_use: f64,
}

/// Per-request record of what happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTimeline {
    pub id: RequestId,
    pub arrival: f64,
    pub first_token: Option<f64>,
    pub completion: Option<f64>,
    pub tokens_emitted: u64,
    pub strategy_history: Vec<HandlingDecision>,
}

/// Full engine configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub cost: CostModel,
    pub sched: SchedulerConfig,
    pub predictor: PredictorKind,
    pub seed: u64,
    /// Stop simulating at this time; unfinished requests stay incomplete.
    pub horizon: Option<f64>,
    /// Record the per-event log (time, kind, request, memory-in-use).
    pub collect_events: bool,
}

impl EngineConfig {
    pub fn new(cost: CostModel, sched: SchedulerConfig) -> Self {
        Self {
            cost,
            sched,
            predictor: PredictorKind::Oracle,
            seed: 0,
            horizon: None,
            collect_events: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cost.validate()?;
        self.sched.validate()?;
        if let Some(h) = self.horizon {
            if !h.is_finite() || h <= 0.0 {
                return Err(SimError::Invalid {
                    what: "engine config",
                    reason: format!("horizon must be > 0, got {h}"),
                });
            }
        }
        Ok(())
    }
}

/// Work a waiting request performs once admitted.
#[derive(Debug, Clone, Copy, PartialEq)]
enum PendingWork {
    /// Fresh request: prefill the prompt.
    Prefill,
    /// Context already materialized (preserve return or preemption).
    Resume,
    /// Discarded context: rebuild it from scratch.
    Recompute,
    /// Swapped context: transfer it back to the device.
    SwapIn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Waiting(PendingWork),
    Prefill { remaining: f64, end: f64 },
    Recompute { remaining: f64, end: f64 },
    SwapIn { remaining: f64, end: f64 },
    Decoding,
    InApi { swap_out_pending: bool, return_pending: bool },
    Done,
}

#[derive(Debug, Clone)]
struct ReqState {
    spec: RequestSpec,
    arrival: f64,
    completed_segments: usize,
    /// Decode tokens finished within the current segment.
    decoded_in_segment: u64,
    /// Decode tokens the current segment needs.
    seg_decode_target: u64,
    /// Context tokens at the end of the current segment (admission claim).
    seg_end_ctx: u64,
    /// Materialized context tokens (resident or swapped out).
    ctx: u64,
    /// Response tokens to append when decoding resumes.
    pending_resp: u64,
    emitted: u64,
    phase: Phase,
    prediction: Prediction,
    decision: Option<HandlingDecision>,
    api_finish: Option<f64>,
    score: f64,
    score_age: u64,
    starvation_cnt: u64,
    starving: bool,
    first_token: Option<f64>,
    completion: Option<f64>,
    strategy_history: Vec<HandlingDecision>,
}

impl ReqState {
    fn in_batch(&self) -> bool {
        matches!(
            self.phase,
            Phase::Prefill { .. } | Phase::Recompute { .. } | Phase::SwapIn { .. } | Phase::Decoding
        )
    }

    fn on_final_segment(&self) -> bool {
        self.completed_segments >= self.spec.segments.len()
    }

    /// Decode tokens still to produce across the whole request.
    fn remaining_decode(&self) -> u64 {
        let current = self.seg_decode_target - self.decoded_in_segment;
        let future: u64 = self
            .spec
            .segments
            .iter()
            .skip(self.completed_segments + 1)
            .map(|s| s.decode_len)
            .sum();
        let final_part = if self.on_final_segment() {
            0
        } else {
            self.spec.final_decode_len
        };
        current + future + final_part
    }

    /// API time still ahead (segments not yet fired).
    fn remaining_api_duration(&self) -> f64 {
        self.spec
            .segments
            .iter()
            .skip(self.completed_segments)
            .map(|s| s.api.duration)
            .sum()
    }

    /// Tokens of forward work pending before decoding can resume.
    fn pending_work_tokens(&self, cm: &CostModel) -> f64 {
        match self.phase {
            Phase::Waiting(PendingWork::Prefill) => self.spec.prompt_len as f64,
            Phase::Waiting(PendingWork::Recompute) => (self.ctx + self.pending_resp) as f64,
            Phase::Waiting(PendingWork::SwapIn) => t_swap(self.ctx, cm) / cm.iter_time,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapTime(f64);

impl Eq for HeapTime {}
impl Ord for HeapTime {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
impl PartialOrd for HeapTime {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

type HeapKey = std::cmp::Reverse<(HeapTime, u8, RequestId, u64)>;

fn kind_rank(kind: EventKind) -> u8 {
    match kind {
        EventKind::Arrival => 0,
        EventKind::IterationComplete => 1,
        EventKind::ApiFinish => 2,
        EventKind::SwapOutDone => 3,
        EventKind::SwapInDone => 4,
        EventKind::RecomputeDone => 5,
    }
}

fn rank_kind(rank: u8) -> EventKind {
    match rank {
        0 => EventKind::Arrival,
        1 => EventKind::IterationComplete,
        2 => EventKind::ApiFinish,
        3 => EventKind::SwapOutDone,
        4 => EventKind::SwapInDone,
        _ => EventKind::RecomputeDone,
    }
}

/// Why a request was rejected at arrival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: RequestId,
    pub reason: String,
}

/// The simulation engine. Single-owner, single-threaded; run one instance
/// per scenario and merge reports afterwards.
pub struct Engine {
    cfg: EngineConfig,
    clock: f64,
    heap: BinaryHeap<HeapKey>,
    seq: u64,
    states: BTreeMap<RequestId, ReqState>,
    waiting: BTreeSet<RequestId>,
    batch: BTreeSet<RequestId>,
    api_wait: ApiWaitQueues,
    mem: MemoryState,
    rng: StdRng,
    events: Vec<EventRecord>,
    rejected: Vec<Rejection>,
    trace_digest: u64,
    n_requests: usize,
    active: usize,
    max_resident_seen: f64,
    evictions: u64,
}

impl Engine {
    pub fn new(trace: &[RequestSpec], cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        for w in trace.windows(2) {
            if w[1].arrival_time < w[0].arrival_time {
                return Err(SimError::Invalid {
                    what: "trace",
                    reason: "requests must be sorted by arrival_time".into(),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for r in trace {
            r.validate()?;
            if !seen.insert(r.id) {
                return Err(SimError::Invalid {
                    what: "trace",
                    reason: format!("duplicate request id {}", r.id),
                });
            }
        }

        let mem = MemoryState::new(cfg.sched.memory_budget, cfg.cost.mem_per_token);
        let rng = StdRng::seed_from_u64(cfg.seed);
        let digest = trace_digest(trace);
        let mut engine = Self {
            clock: 0.0,
            heap: BinaryHeap::new(),
            seq: 0,
            states: BTreeMap::new(),
            waiting: BTreeSet::new(),
            batch: BTreeSet::new(),
            api_wait: ApiWaitQueues::default(),
            mem,
            rng,
            events: Vec::new(),
            rejected: Vec::new(),
            trace_digest: digest,
            n_requests: trace.len(),
            active: 0,
            max_resident_seen: 0.0,
            evictions: 0,
            cfg,
        };
        for r in trace {
            engine.push_event(r.arrival_time, EventKind::Arrival, r.id);
            let mut st = ReqState {
                arrival: r.arrival_time,
                spec: r.clone(),
                completed_segments: 0,
                decoded_in_segment: 0,
                seg_decode_target: 0,
                seg_end_ctx: 0,
                ctx: r.prompt_len,
                pending_resp: 0,
                emitted: 0,
                phase: Phase::Waiting(PendingWork::Prefill),
                prediction: Prediction {
                    pre_api_len: 0.0,
                    api_duration: 0.0,
                    api_response_len: 0.0,
                    total_remaining_len: 0.0,
                },
                decision: None,
                api_finish: None,
                score: 0.0,
                score_age: 0,
                starvation_cnt: 0,
                starving: false,
                first_token: None,
                completion: None,
                strategy_history: Vec::new(),
            };
            st.phase = Phase::Done; // flipped to Waiting on arrival
            engine.states.insert(r.id, st);
        }
        Ok(engine)
    }

    /// Highest device memory use observed at any event.
    pub fn max_resident_seen(&self) -> f64 {
        self.max_resident_seen
    }

    /// How many held contexts were discarded to break memory wedges.
    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    /// The collected event log (empty unless `collect_events` was set).
    pub fn event_log(&self) -> &[EventRecord] {
        &self.events
    }

    /// Serialize the event log as line-delimited JSON.
    pub fn event_log_lines(&self) -> String {
        let mut out = String::new();
        for rec in &self.events {
            out.push_str(&serde_json::to_string(rec).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    fn push_event(&mut self, time: f64, kind: EventKind, id: RequestId) {
        let key = (HeapTime(time), kind_rank(kind), id, self.seq);
        self.seq += 1;
        self.heap.push(std::cmp::Reverse(key));
    }

    fn next_event_time(&self) -> Option<f64> {
        self.heap.peek().map(|std::cmp::Reverse((t, _, _, _))| t.0)
    }

    fn log(&mut self, time: f64, kind: EventKind, id: RequestId) {
        self.max_resident_seen = self.max_resident_seen.max(self.mem.used());
        if self.cfg.collect_events {
            self.events.push(EventRecord {
                time,
                kind,
                request_id: id,
                mem_in_use: self.mem.used(),
            });
        }
    }

    fn capacity_tokens(&self) -> u64 {
        (self.cfg.sched.memory_budget / self.cfg.cost.mem_per_token).floor() as u64
    }

    fn estimate_for(&self, c_i: u64) -> BatchContextEstimate {
        BatchContextEstimate::full_memory(self.capacity_tokens(), c_i)
    }

    /// Rank score of a request's current segment: the area already committed
    /// before decoding resumes (prefill, recompute stall, or the swap-in
    /// transfer) plus the segment's own memory-over-time curve.
    fn segment_score(
        &self,
        id: RequestId,
        pending: PendingWork,
        prediction: &Prediction,
        decision: Option<&HandlingDecision>,
    ) -> f64 {
        let st = &self.states[&id];
        let cm = &self.cfg.cost;
        let m = cm.mem_per_token;
        let base_ctx = st.ctx + st.pending_resp;
        let pending_area = match pending {
            PendingWork::Recompute => {
                waste_discard(base_ctx, self.estimate_for(base_ctx).c_other, m, cm).unwrap_or(0.0)
            }
            PendingWork::SwapIn => {
                waste_swap(st.ctx, self.estimate_for(st.ctx).c_batch, m, cm).unwrap_or(0.0) / 2.0
            }
            PendingWork::Prefill => {
                st.spec.prompt_len as f64 * m * t_fwd(st.spec.prompt_len, cm)
            }
            PendingWork::Resume => 0.0,
        };
        let dummy = HandlingDecision {
            strategy: Strategy::Preserve,
            waste_preserve: 0.0,
            waste_discard: 0.0,
            waste_swap: 0.0,
        };
        pending_area
            + score_segment(
                base_ctx,
                prediction,
                decision.unwrap_or(&dummy),
                !st.on_final_segment(),
                cm,
            )
    }

    /// Initialize the current segment's prediction, decision, and score for a
    /// request that just arrived or just returned from an API call.
    fn start_segment(&mut self, id: RequestId, pending: PendingWork) -> Result<()> {
        let (truth, base_ctx, has_api, pinned) = {
            let st = self.states.get(&id).expect("state exists");
            let truth = Prediction::exact(&st.spec, st.completed_segments, st.emitted);
            let base_ctx = st.ctx + st.pending_resp;
            let (_, api) = segment_for_next_api(&st.spec, st.completed_segments)?;
            let pinned = if api.is_some() {
                st.spec.segments[st.completed_segments].pinned_strategy
            } else {
                None
            };
            (truth, base_ctx, api.is_some(), pinned)
        };
        let predicted = predict(&self.cfg.predictor, &truth, &mut self.rng);
        let c_i = base_ctx + predicted.pre_api_len.round() as u64;
        let est = self.estimate_for(c_i);
        let decision = if has_api {
            let mut d = choose_strategy(&predicted, base_ctx, est, &self.cfg.cost)?;
            if let Some(p) = pinned {
                d = d.with_strategy(p);
            }
            Some(d)
        } else {
            None
        };

        let score = self.segment_score(id, pending, &predicted, decision.as_ref());

        let st = self.states.get_mut(&id).expect("state exists");
        let (decode_len, _) = segment_for_next_api(&st.spec, st.completed_segments)?;
        st.seg_decode_target = decode_len;
        st.decoded_in_segment = 0;
        st.seg_end_ctx = st.ctx + st.pending_resp + decode_len;
        st.prediction = predicted;
        st.decision = decision;
        st.score = score;
        st.score_age = 0;
        st.phase = Phase::Waiting(pending);
        Ok(())
    }

    fn handle_arrival(&mut self, id: RequestId) -> Result<()> {
        let (final_ctx, feasible) = {
            let st = self.states.get(&id).expect("state exists");
            let final_ctx = st.spec.final_context_len();
            let fits_mem =
                final_ctx as f64 * self.cfg.cost.mem_per_token <= self.cfg.sched.memory_budget + 1e-9;
            let fits_batch = final_ctx <= self.cfg.sched.max_batch_tokens;
            (final_ctx, fits_mem && fits_batch)
        };
        if !feasible {
            self.rejected.push(Rejection {
                id,
                reason: format!(
                    "context of {final_ctx} tokens can never fit the memory budget or batch cap"
                ),
            });
            self.states.remove(&id);
            return Ok(());
        }
        self.active += 1;
        self.start_segment(id, PendingWork::Prefill)?;
        self.waiting.insert(id);
        self.log(self.clock, EventKind::Arrival, id);
        Ok(())
    }

    /// A running request hit its API trigger: route its context per the
    /// decided strategy and park it in the matching wait queue.
    fn on_api_encounter(&mut self, id: RequestId) -> Result<()> {
        let now = self.clock;
        let (decision, ctx, duration) = {
            let st = self.states.get(&id).expect("state exists");
            let seg = &st.spec.segments[st.completed_segments];
            let d = st.decision.expect("API segment has a decision");
            (d, st.ctx, seg.api.duration)
        };
        let swap_time = t_swap(ctx, &self.cfg.cost);
        let (api_finish, swap_out_pending) = match decision.strategy {
            Strategy::Preserve => (now + duration, false),
            Strategy::Discard => {
                self.mem.release(id);
                (now + duration, false)
            }
            Strategy::Swap => {
                if swap_time > 0.0 {
                    self.push_event(now + swap_time, EventKind::SwapOutDone, id);
                    (now + swap_time + duration, true)
                } else {
                    self.mem.swap_out(id);
                    self.log(now, EventKind::SwapOutDone, id);
                    (now + duration, false)
                }
            }
        };
        self.mem.check()?;

        let st = self.states.get_mut(&id).expect("state exists");
        st.strategy_history.push(decision);
        st.starvation_cnt = 0;
        st.api_finish = Some(api_finish);
        st.phase = Phase::InApi {
            swap_out_pending,
            return_pending: false,
        };
        self.batch.remove(&id);
        self.api_wait.put(decision.strategy, id, api_finish);
        self.push_event(api_finish, EventKind::ApiFinish, id);
        Ok(())
    }

    /// An API call finished: append its response bookkeeping and requeue the
    /// request as a fresh segment.
    fn on_api_return(&mut self, id: RequestId) -> Result<()> {
        let (strategy, response_len) = {
            let st = self.states.get_mut(&id).expect("state exists");
            if let Phase::InApi {
                swap_out_pending, ..
            } = st.phase
            {
                if swap_out_pending {
                    // The outbound transfer has not finished; complete the
                    // return when SwapOutDone fires.
                    st.phase = Phase::InApi {
                        swap_out_pending: true,
                        return_pending: true,
                    };
                    return Ok(());
                }
            }
            let seg = &st.spec.segments[st.completed_segments];
            let strategy = st.strategy_history.last().expect("history").strategy;
            (strategy, seg.api.response_len)
        };
        self.api_wait.remove(strategy, id);
        self.log(self.clock, EventKind::ApiFinish, id);

        let pending = match strategy {
            Strategy::Preserve => PendingWork::Resume,
            Strategy::Discard => PendingWork::Recompute,
            Strategy::Swap => PendingWork::SwapIn,
        };
        {
            let st = self.states.get_mut(&id).expect("state exists");
            st.completed_segments += 1;
            st.pending_resp = response_len;
            st.api_finish = None;
        }
        self.start_segment(id, pending)?;
        self.waiting.insert(id);
        Ok(())
    }

    fn handle_swap_out_done(&mut self, id: RequestId) -> Result<()> {
        let return_pending = {
            let st = self.states.get_mut(&id).expect("state exists");
            match st.phase {
                Phase::InApi {
                    return_pending, ..
                } => {
                    st.phase = Phase::InApi {
                        swap_out_pending: false,
                        return_pending: false,
                    };
                    return_pending
                }
                _ => false,
            }
        };
        self.mem.swap_out(id);
        self.mem.check()?;
        self.log(self.clock, EventKind::SwapOutDone, id);
        if return_pending {
            self.on_api_return(id)?;
        }
        Ok(())
    }

    /// Append pending response tokens and mark first output if needed.
    fn append_response(&mut self, id: RequestId, now: f64) {
        let st = self.states.get_mut(&id).expect("state exists");
        if st.pending_resp > 0 {
            st.ctx += st.pending_resp;
            st.emitted += st.pending_resp;
            if st.first_token.is_none() {
                st.first_token = Some(now);
            }
            let ctx = st.ctx;
            st.pending_resp = 0;
            self.mem.set_resident(id, ctx);
        }
    }

    /// Admit one waiting request into the batch.
    fn admit(&mut self, id: RequestId) -> Result<()> {
        let now = self.clock;
        let pending = match self.states.get(&id).expect("state exists").phase {
            Phase::Waiting(p) => p,
            _ => unreachable!("admitting a non-waiting request"),
        };
        self.waiting.remove(&id);
        self.batch.insert(id);
        {
            let st = self.states.get_mut(&id).expect("state exists");
            st.starvation_cnt = 0;
        }
        match pending {
            PendingWork::Prefill => {
                let (prompt, dur) = {
                    let st = self.states.get(&id).expect("state exists");
                    (st.spec.prompt_len, t_fwd(st.spec.prompt_len, &self.cfg.cost))
                };
                self.mem.set_resident(id, prompt);
                let st = self.states.get_mut(&id).expect("state exists");
                st.phase = Phase::Prefill {
                    remaining: dur,
                    end: now + dur,
                };
            }
            PendingWork::Resume => {
                self.append_response(id, now);
                let st = self.states.get_mut(&id).expect("state exists");
                let ctx = st.ctx;
                st.phase = Phase::Decoding;
                self.mem.set_resident(id, ctx);
            }
            PendingWork::Recompute => {
                self.append_response(id, now);
                let (ctx, dur) = {
                    let st = self.states.get(&id).expect("state exists");
                    (st.ctx, t_fwd(st.ctx, &self.cfg.cost))
                };
                self.mem.set_resident(id, ctx);
                let st = self.states.get_mut(&id).expect("state exists");
                st.phase = Phase::Recompute {
                    remaining: dur,
                    end: now + dur,
                };
            }
            PendingWork::SwapIn => {
                let dur = {
                    let st = self.states.get(&id).expect("state exists");
                    t_swap(st.ctx, &self.cfg.cost)
                };
                self.mem.swap_in(id);
                let st = self.states.get_mut(&id).expect("state exists");
                st.phase = Phase::SwapIn {
                    remaining: dur,
                    end: now + dur,
                };
            }
        }
        self.mem.check()
    }

    /// Resolve zero-remaining phases and completed segments at the current
    /// clock. Returns true if anything changed.
    fn resolve_ready(&mut self) -> Result<bool> {
        let mut changed = false;
        let ids: Vec<RequestId> = self.batch.iter().copied().collect();
        for id in ids {
            let phase = self.states.get(&id).expect("state exists").phase;
            match phase {
                Phase::Prefill { remaining, .. } if remaining <= 1e-9 => {
                    let st = self.states.get_mut(&id).expect("state exists");
                    st.phase = Phase::Decoding;
                    changed = true;
                }
                Phase::Recompute { remaining, .. } if remaining <= 1e-9 => {
                    let st = self.states.get_mut(&id).expect("state exists");
                    st.phase = Phase::Decoding;
                    self.log(self.clock, EventKind::RecomputeDone, id);
                    changed = true;
                }
                Phase::SwapIn { remaining, .. } if remaining <= 1e-9 => {
                    {
                        let st = self.states.get_mut(&id).expect("state exists");
                        st.phase = Phase::Decoding;
                    }
                    self.append_response(id, self.clock);
                    self.mem.check()?;
                    self.log(self.clock, EventKind::SwapInDone, id);
                    changed = true;
                }
                _ => {}
            }
            // A decoding member whose segment needs no more tokens moves on
            // immediately (zero-length decode stretch or just-finished run).
            let st = self.states.get(&id).expect("state exists");
            if matches!(st.phase, Phase::Decoding) && st.decoded_in_segment >= st.seg_decode_target
            {
                if st.on_final_segment() {
                    self.complete_request(id)?;
                } else {
                    self.on_api_encounter(id)?;
                }
                changed = true;
            }
        }
        Ok(changed)
    }

    fn complete_request(&mut self, id: RequestId) -> Result<()> {
        let now = self.clock;
        self.mem.release(id);
        self.mem.drop_swapped(id);
        self.batch.remove(&id);
        self.waiting.remove(&id);
        let st = self.states.get_mut(&id).expect("state exists");
        st.phase = Phase::Done;
        st.completion = Some(now);
        debug_assert_eq!(st.emitted, st.spec.total_output_len());
        debug_assert!(st.first_token.unwrap_or(now) >= st.arrival);
        self.active -= 1;
        self.mem.check()
    }

    /// Rank key under the configured policy.
    fn rank_key(&self, st: &ReqState) -> f64 {
        match self.cfg.sched.policy {
            Policy::Fcfs => st.arrival,
            Policy::Sjf => st.remaining_decode() as f64 + st.pending_work_tokens(&self.cfg.cost),
            Policy::SjfTotal => {
                st.remaining_decode() as f64
                    + st.pending_work_tokens(&self.cfg.cost)
                    + st.remaining_api_duration() / self.cfg.cost.iter_time
            }
            Policy::Lamps => st.score,
        }
    }

    /// One ranking + batch-formation pass at the current clock.
    /// Returns true if membership changed.
    fn scheduling_pass(&mut self) -> Result<bool> {
        let policy = self.cfg.sched.policy;

        // Refresh stale scores (LAMPS caching).
        if policy == Policy::Lamps {
            let stale: Vec<RequestId> = self
                .waiting
                .iter()
                .copied()
                .filter(|id| {
                    let st = &self.states[id];
                    st.score_age >= self.cfg.sched.score_update_interval
                })
                .collect();
            for id in stale {
                let st = &self.states[&id];
                let pending = match st.phase {
                    Phase::Waiting(p) => p,
                    _ => continue,
                };
                // Re-derive the score from the same segment inputs; only the
                // age resets.
                let prediction = st.prediction;
                let score = self.segment_score(id, pending, &prediction, st.decision.as_ref());
                let st = self.states.get_mut(&id).expect("state exists");
                st.score = score;
                st.score_age = 0;
            }
        }

        // Build and rank queue entries for waiting requests.
        let mut entries: Vec<QueueEntry> = self
            .waiting
            .iter()
            .map(|id| {
                let st = &self.states[id];
                let mut e = QueueEntry::new(*id, st.arrival, self.rank_key(st));
                e.starvation_cnt = st.starvation_cnt;
                e.starving = st.starving;
                e
            })
            .collect();
        mark_starving(&mut entries, self.cfg.sched.starvation_threshold);
        for e in &entries {
            let st = self.states.get_mut(&e.id).expect("state exists");
            st.starving = e.starving;
            st.starvation_cnt = e.starvation_cnt;
        }
        rank_entries(&mut entries);

        // Preemptive policies rank running decoders alongside the queue;
        // phase work and non-preemptive members are pinned.
        let mut contested: Vec<QueueEntry> = Vec::new();
        let mut pinned_ids: Vec<RequestId> = Vec::new();
        for id in &self.batch {
            let st = &self.states[id];
            if policy.preemptive() && matches!(st.phase, Phase::Decoding) {
                let mut e = QueueEntry::new(*id, st.arrival, self.rank_key(st));
                e.starving = st.starving;
                contested.push(e);
            } else {
                pinned_ids.push(*id);
            }
        }
        let ranked_entries: Vec<QueueEntry> = if contested.is_empty() {
            entries
        } else {
            let mut all = entries;
            all.extend(contested);
            rank_entries(&mut all);
            all
        };

        let to_candidate = |id: RequestId, states: &BTreeMap<RequestId, ReqState>,
                            mem: &MemoryState, starving: bool| {
            let st = &states[&id];
            Candidate {
                id,
                claim_tokens: st.seg_end_ctx,
                held_tokens: mem.resident_tokens(id),
                running: st.in_batch(),
                starving,
            }
        };
        let ranked: Vec<Candidate> = ranked_entries
            .iter()
            .map(|e| to_candidate(e.id, &self.states, &self.mem, e.starving))
            .collect();
        let pinned: Vec<Candidate> = pinned_ids
            .iter()
            .map(|id| to_candidate(*id, &self.states, &self.mem, false))
            .collect();

        // Context held by requests outside the contest: API holders
        // (preserve or swap-out in flight).
        let contenders: BTreeSet<RequestId> = ranked
            .iter()
            .map(|c| c.id)
            .chain(pinned.iter().map(|c| c.id))
            .collect();
        let resident_other: u64 = self
            .states
            .iter()
            .filter(|(id, _)| !contenders.contains(id))
            .map(|(id, _)| self.mem.resident_tokens(*id))
            .sum();

        let plan = form_batch(
            &ranked,
            &pinned,
            resident_other,
            &self.cfg.sched,
            self.cfg.cost.mem_per_token,
        );

        let admitted: BTreeSet<RequestId> = plan.admitted.iter().copied().collect();
        let mut changed = false;
        // Preempt running decoders that lost their slot.
        let losers: Vec<RequestId> = self
            .batch
            .iter()
            .copied()
            .filter(|id| {
                let st = &self.states[id];
                policy.preemptive()
                    && matches!(st.phase, Phase::Decoding)
                    && !admitted.contains(id)
            })
            .collect();
        for id in losers {
            let st = self.states.get_mut(&id).expect("state exists");
            st.phase = Phase::Waiting(PendingWork::Resume);
            self.batch.remove(&id);
            self.waiting.insert(id);
            changed = true;
        }
        // Admit newcomers.
        for id in &plan.admitted {
            if self.waiting.contains(id) {
                self.admit(*id)?;
                changed = true;
            }
        }
        debug_assert!(
            plan.infeasible.is_empty(),
            "infeasible requests are rejected at arrival"
        );
        Ok(changed)
    }

    /// Break a stall where waiting holders block each other with no event in
    /// sight: discard the lowest-priority holder's context so memory drains.
    fn evict_for_progress(&mut self) -> Result<bool> {
        let mut holders: Vec<QueueEntry> = self
            .waiting
            .iter()
            .filter(|id| self.mem.resident_tokens(**id) > 0 || self.mem.swapped_tokens(**id) > 0)
            .map(|id| {
                let st = &self.states[id];
                let mut e = QueueEntry::new(*id, st.arrival, self.rank_key(st));
                e.starving = st.starving;
                e
            })
            .collect();
        if holders.is_empty() {
            return Ok(false);
        }
        rank_entries(&mut holders);
        let victim = holders.last().expect("non-empty").id;
        self.mem.release(victim);
        self.mem.drop_swapped(victim);
        let st = self.states.get_mut(&victim).expect("state exists");
        st.phase = Phase::Waiting(PendingWork::Recompute);
        self.evictions += 1;
        Ok(true)
    }

    fn process_due_events(&mut self) -> Result<bool> {
        let mut any = false;
        while let Some(std::cmp::Reverse((t, rank, id, _))) = self.heap.peek().copied() {
            if t.0 > self.clock + 1e-9 {
                break;
            }
            self.heap.pop();
            any = true;
            match rank_kind(rank) {
                EventKind::Arrival => self.handle_arrival(id)?,
                EventKind::ApiFinish => self.on_api_return(id)?,
                EventKind::SwapOutDone => self.handle_swap_out_done(id)?,
                _ => {}
            }
        }
        Ok(any)
    }

    /// Iterations until the next scheduling-relevant moment, given a batch
    /// whose slowest decoder sits at `ctx_max` context tokens.
    fn iterations_until_next_decision(&self, ctx_max: u64) -> u64 {
        let cm = &self.cfg.cost;
        let mut k = u64::MAX;

        for id in &self.batch {
            let st = &self.states[id];
            if matches!(st.phase, Phase::Decoding) {
                k = k.min(st.seg_decode_target - st.decoded_in_segment);
            }
        }
        // Phase completions and heap events land at absolute times; find the
        // first iteration boundary at or past each.
        let mut time_marks: Vec<f64> = Vec::new();
        for id in &self.batch {
            match self.states[id].phase {
                Phase::Prefill { end, .. }
                | Phase::Recompute { end, .. }
                | Phase::SwapIn { end, .. } => time_marks.push(end),
                _ => {}
            }
        }
        if let Some(t) = self.next_event_time() {
            time_marks.push(t);
        }
        if let Some(h) = self.cfg.horizon {
            time_marks.push(h);
        }
        for mark in time_marks {
            if mark <= self.clock + 1e-9 {
                k = 1;
                continue;
            }
            let span = mark - self.clock;
            // Smallest k with decode_time(ctx_max, k) >= span.
            let mut lo = 1u64;
            let mut hi = 1u64;
            while decode_time(ctx_max, hi, cm) + 1e-12 < span {
                hi = hi.saturating_mul(2);
                if hi >= k {
                    hi = k.max(1);
                    break;
                }
            }
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                if decode_time(ctx_max, mid, cm) + 1e-12 < span {
                    lo = mid + 1;
                } else {
                    hi = mid;
                }
            }
            k = k.min(lo);
        }
        // Starvation threshold crossings wake the scheduler.
        if self.cfg.sched.starvation_threshold != STARVATION_DISABLED {
            for id in &self.waiting {
                let st = &self.states[id];
                if !st.starving {
                    let left = self
                        .cfg
                        .sched
                        .starvation_threshold
                        .saturating_sub(st.starvation_cnt)
                        .max(1);
                    k = k.min(left);
                }
            }
        }
        k.max(1)
    }

    /// Execute up to `k_cap` iterations (or jump the clock when the batch is
    /// idle). Returns false when the simulation cannot advance further.
    fn advance(&mut self, k_cap: u64) -> Result<bool> {
        let cm = self.cfg.cost.clone();
        let decoders: Vec<RequestId> = self
            .batch
            .iter()
            .copied()
            .filter(|id| matches!(self.states[id].phase, Phase::Decoding))
            .collect();

        if decoders.is_empty() {
            // No tokens to produce: jump to the next phase end or event.
            let mut t_next = f64::INFINITY;
            for id in &self.batch {
                match self.states[id].phase {
                    Phase::Prefill { end, .. }
                    | Phase::Recompute { end, .. }
                    | Phase::SwapIn { end, .. } => t_next = t_next.min(end),
                    _ => {}
                }
            }
            if let Some(t) = self.next_event_time() {
                t_next = t_next.min(t);
            }
            if !t_next.is_finite() {
                return Ok(false);
            }
            self.set_clock(t_next);
            self.update_phase_remaining();
            return Ok(true);
        }

        let ctx_max = decoders
            .iter()
            .map(|id| self.states[id].ctx)
            .max()
            .expect("non-empty");
        let k = self.iterations_until_next_decision(ctx_max).min(k_cap).max(1);
        let t0 = self.clock;
        let elapsed = decode_time(ctx_max, k, &cm);
        self.set_clock(t0 + elapsed);

        for id in &decoders {
            {
                let st = self.states.get_mut(id).expect("state exists");
                st.decoded_in_segment += k;
                st.ctx += k;
                st.emitted += k;
                if st.first_token.is_none() {
                    st.first_token = Some(t0 + decode_time(ctx_max, 1, &cm));
                }
            }
            self.mem.grow_resident(*id, k);
            if self.cfg.collect_events {
                for j in 1..=k {
                    let t_j = t0 + decode_time(ctx_max, j, &cm);
                    self.events.push(EventRecord {
                        time: t_j,
                        kind: EventKind::IterationComplete,
                        request_id: *id,
                        mem_in_use: f64::NAN, // patched below
                    });
                }
            }
        }
        // Event-log memory snapshots: tokens land one per iteration across
        // the batch, so recompute memory per logged instant in time order.
        if self.cfg.collect_events {
            self.patch_iteration_log(t0, k, ctx_max, &decoders, &cm);
        }
        self.mem.check()?;
        self.max_resident_seen = self.max_resident_seen.max(self.mem.used());

        // Charge the wait to everyone left in the queue.
        let waiting: Vec<RequestId> = self.waiting.iter().copied().collect();
        for id in waiting {
            let st = self.states.get_mut(&id).expect("state exists");
            st.starvation_cnt = st.starvation_cnt.saturating_add(k);
            st.score_age = st.score_age.saturating_add(k);
        }
        self.update_phase_remaining();
        Ok(true)
    }

    /// Rewrite the NaN placeholders for a fast-forwarded run with the memory
    /// in use at each logged iteration, in deterministic (time, id) order.
    fn patch_iteration_log(
        &mut self,
        t0: f64,
        k: u64,
        ctx_max: u64,
        decoders: &[RequestId],
        cm: &CostModel,
    ) {
        let n = decoders.len();
        let total = (k as usize) * n;
        let start = self.events.len() - total;
        self.events[start..].sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then(kind_rank(a.kind).cmp(&kind_rank(b.kind)))
                .then(a.request_id.cmp(&b.request_id))
        });
        // Memory grows by one token per decoder per iteration; at boundary j
        // all decoders have j extra tokens.
        let base_used = self.mem.used() - (k as f64) * (n as f64) * cm.mem_per_token;
        for rec in &mut self.events[start..] {
            // Which iteration does this record belong to?
            let mut j = 1u64;
            while j < k && decode_time(ctx_max, j, cm) + 1e-12 < rec.time - t0 {
                j += 1;
            }
            rec.mem_in_use = base_used + (j as f64) * (n as f64) * cm.mem_per_token;
        }
    }

    fn set_clock(&mut self, t: f64) {
        debug_assert!(t >= self.clock - 1e-9, "clock must not go backwards");
        self.clock = t;
    }

    fn update_phase_remaining(&mut self) {
        let now = self.clock;
        let ids: Vec<RequestId> = self.batch.iter().copied().collect();
        for id in ids {
            let st = self.states.get_mut(&id).expect("state exists");
            match &mut st.phase {
                Phase::Prefill { remaining, end }
                | Phase::Recompute { remaining, end }
                | Phase::SwapIn { remaining, end } => {
                    *remaining = (*end - now).max(0.0);
                }
                _ => {}
            }
        }
    }

    fn horizon_reached(&self) -> bool {
        self.cfg.horizon.is_some_and(|h| self.clock >= h - 1e-9)
    }

    fn finished(&self) -> bool {
        self.active == 0 && self.heap.is_empty()
    }

    /// Settle all activity at the current instant: due events, ready
    /// transitions, and batch formation, iterated to a fixed point.
    fn settle(&mut self) -> Result<()> {
        loop {
            let mut changed = self.process_due_events()?;
            changed |= self.resolve_ready()?;
            changed |= self.scheduling_pass()?;
            if !changed {
                break;
            }
        }
        Ok(())
    }

    /// Waiting context-holders can wedge each other: the batch is idle,
    /// nothing fits, and only arrivals (which free nothing) are pending. An
    /// in-flight API call may still free memory on its own, so the engine
    /// waits for those; otherwise somebody's cache has to go.
    fn wedged(&self) -> bool {
        self.batch.is_empty()
            && !self.waiting.is_empty()
            && !self
                .states
                .values()
                .any(|st| matches!(st.phase, Phase::InApi { .. }))
    }

    /// Advance one decision step (uses fast-forward internally).
    fn tick(&mut self, k_cap: u64) -> Result<bool> {
        self.settle()?;
        if self.finished() || self.horizon_reached() {
            return Ok(false);
        }
        if self.wedged() && self.evict_for_progress()? {
            return Ok(true);
        }
        if !self.advance(k_cap)? {
            // Nothing runnable and no events: break holder gridlock.
            if self.evict_for_progress()? {
                return Ok(true);
            }
            return Ok(false);
        }
        Ok(true)
    }

    /// Execute a single batch iteration (or one clock jump). Exposed for
    /// golden tests; `run` must produce identical results.
    pub fn step_iteration(&mut self) -> Result<bool> {
        self.tick(1)
    }

    /// Run to completion (or the horizon) and produce the report.
    pub fn run(&mut self) -> Result<SimReport> {
        while self.tick(u64::MAX)? {}
        self.settle()?;
        self.build_report()
    }

    fn build_report(&self) -> Result<SimReport> {
        let mut timelines: Vec<RequestTimeline> = Vec::new();
        for (id, st) in &self.states {
            timelines.push(RequestTimeline {
                id: *id,
                arrival: st.arrival,
                first_token: st.first_token,
                completion: st.completion,
                tokens_emitted: st.emitted,
                strategy_history: st.strategy_history.clone(),
            });
        }
        for t in &timelines {
            if let (Some(ft), Some(c)) = (t.first_token, t.completion) {
                if !(t.arrival <= ft && ft <= c) {
                    return Err(SimError::Invalid {
                        what: "timeline",
                        reason: format!("request {}: arrival/first-token/completion out of order", t.id),
                    });
                }
            }
        }
        Ok(metrics::build_report(
            self.cfg.sched.policy,
            self.cfg.seed,
            self.cfg.cost.unit_mode,
            self.cfg.horizon,
            self.trace_digest,
            self.n_requests,
            timelines,
            self.rejected.clone(),
        ))
    }
}

/// Convenience wrapper: build an engine, run it, return the report.
pub fn run(trace: &[RequestSpec], cfg: &EngineConfig) -> Result<SimReport> {
    Engine::new(trace, cfg.clone())?.run()
}

/// Latency of a request running alone on an empty server, assuming its
/// context is preserved through every API call.
pub fn isolated_latency(req: &RequestSpec, cm: &CostModel) -> f64 {
    let mut t = t_fwd(req.prompt_len, cm);
    let mut ctx = req.prompt_len;
    for seg in &req.segments {
        t += decode_time(ctx, seg.decode_len, cm);
        ctx += seg.decode_len;
        t += seg.api.duration;
        ctx += seg.api.response_len;
    }
    t + decode_time(ctx, req.final_decode_len, cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ApiCallSpec, ApiType, Segment};

    fn no_api(id: u64, arrival: f64, len: u64) -> RequestSpec {
        RequestSpec {
            id,
            arrival_time: arrival,
            prompt_len: 1,
            segments: vec![],
            final_decode_len: len,
        }
    }

    fn unit_cfg(policy: Policy, budget: f64) -> EngineConfig {
        let mut sched = SchedulerConfig::new(policy, budget);
        sched.max_batch_requests = 1;
        EngineConfig::new(CostModel::unit(), sched)
    }

    #[test]
    fn empty_trace_empty_report() {
        let cfg = unit_cfg(Policy::Fcfs, 10.0);
        let report = run(&[], &cfg).unwrap();
        assert_eq!(report.n_requests, 0);
        assert!(report.timelines.is_empty());
        assert!(report.aggregates.is_none());
    }

    #[test]
    fn single_request_no_api_unit_mode() {
        // Prompt 1 (prefill 1 unit) + 5 decode tokens: completes at 6,
        // first token at 2.
        let cfg = unit_cfg(Policy::Fcfs, 10.0);
        let report = run(&[no_api(1, 0.0, 5)], &cfg).unwrap();
        let t = &report.timelines[0];
        assert_eq!(t.completion, Some(6.0));
        assert_eq!(t.first_token, Some(2.0));
        assert_eq!(t.tokens_emitted, 5);
    }

    #[test]
    fn infeasible_request_rejected_not_dropped() {
        let cfg = unit_cfg(Policy::Fcfs, 4.0);
        let trace = vec![no_api(1, 0.0, 10), no_api(2, 0.0, 2)];
        let report = run(&trace, &cfg).unwrap();
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].id, 1);
        // The feasible request still completes.
        assert_eq!(report.timelines.len(), 1);
        assert!(report.timelines[0].completion.is_some());
    }

    #[test]
    fn fcfs_completion_order_matches_arrival() {
        let cfg = unit_cfg(Policy::Fcfs, 1000.0);
        let trace: Vec<RequestSpec> = (0..6).map(|i| no_api(i, i as f64 * 0.5, 3 + i)).collect();
        let report = run(&trace, &cfg).unwrap();
        let mut completions: Vec<(u64, f64)> = report
            .timelines
            .iter()
            .map(|t| (t.id, t.completion.unwrap()))
            .collect();
        completions.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let order: Vec<u64> = completions.iter().map(|c| c.0).collect();
        assert_eq!(order, [0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn batch_of_two_decodes_in_lockstep() {
        let mut cfg = unit_cfg(Policy::Fcfs, 1000.0);
        cfg.sched.max_batch_requests = 2;
        let trace = vec![no_api(1, 0.0, 4), no_api(2, 0.0, 4)];
        let report = run(&trace, &cfg).unwrap();
        // Both prefill together at t=1, decode together, finish together.
        assert_eq!(report.timelines[0].completion, Some(5.0));
        assert_eq!(report.timelines[1].completion, Some(5.0));
    }

    #[test]
    fn api_trigger_routes_to_matching_queue_and_returns() {
        let trace = vec![RequestSpec {
            id: 1,
            arrival_time: 0.0,
            prompt_len: 1,
            segments: vec![Segment {
                decode_len: 2,
                api: ApiCallSpec::new(ApiType::Math, 3.0, 2).unwrap(),
                pinned_strategy: Some(Strategy::Preserve),
            }],
            final_decode_len: 2,
        }];
        trace[0].validate().unwrap();
        let cfg = unit_cfg(Policy::Fcfs, 100.0);
        let report = run(&trace, &cfg).unwrap();
        let t = &report.timelines[0];
        // prefill 1 + decode 2 -> API at 3, returns at 6, +2 tokens -> 8.
        assert_eq!(t.completion, Some(8.0));
        assert_eq!(t.tokens_emitted, 2 + 2 + 2);
        assert_eq!(t.strategy_history.len(), 1);
        assert_eq!(t.strategy_history[0].strategy, Strategy::Preserve);
    }

    #[test]
    fn multi_api_request_runs_segments_in_order() {
        // prefill [0,1), decode [1,3), first call [3,6) preserved, response
        // appended on resume, decode [6,7), second call [7,9) discarded,
        // recompute of 7 tokens [9,16), final decode [16,18).
        let req = RequestSpec {
            id: 1,
            arrival_time: 0.0,
            prompt_len: 1,
            segments: vec![
                Segment {
                    decode_len: 2,
                    api: ApiCallSpec::new(ApiType::Qa, 3.0, 1).unwrap(),
                    pinned_strategy: Some(Strategy::Preserve),
                },
                Segment {
                    decode_len: 1,
                    api: ApiCallSpec::new(ApiType::Image, 2.0, 2).unwrap(),
                    pinned_strategy: Some(Strategy::Discard),
                },
            ],
            final_decode_len: 2,
        };
        let cfg = unit_cfg(Policy::Lamps, 100.0);
        let report = run(&[req], &cfg).unwrap();
        let t = &report.timelines[0];
        assert_eq!(t.first_token, Some(2.0));
        assert_eq!(t.completion, Some(18.0));
        assert_eq!(t.tokens_emitted, 8);
        let strategies: Vec<Strategy> = t.strategy_history.iter().map(|d| d.strategy).collect();
        assert_eq!(strategies, [Strategy::Preserve, Strategy::Discard]);
    }

    #[test]
    fn swap_frees_memory_after_latency() {
        // swap_latency 1: context released one unit after the call starts.
        let mut cost = CostModel::unit();
        cost.swap_latency = 1.0;
        let mut sched = SchedulerConfig::new(Policy::Fcfs, 100.0);
        sched.max_batch_requests = 1;
        let mut cfg = EngineConfig::new(cost, sched);
        cfg.collect_events = true;
        let trace = vec![RequestSpec {
            id: 1,
            arrival_time: 0.0,
            prompt_len: 1,
            segments: vec![Segment {
                decode_len: 2,
                api: ApiCallSpec::new(ApiType::Math, 5.0, 0).unwrap(),
                pinned_strategy: Some(Strategy::Swap),
            }],
            final_decode_len: 1,
        }];
        let mut engine = Engine::new(&trace, cfg).unwrap();
        let report = engine.run().unwrap();
        let swap_out = engine
            .event_log()
            .iter()
            .find(|e| e.kind == EventKind::SwapOutDone)
            .expect("swap-out logged");
        // API hit at t=3 (prefill 1 + decode 2); memory freed at t=4.
        assert_eq!(swap_out.time, 4.0);
        assert_eq!(swap_out.mem_in_use, 0.0);
        // api_finish = 3 + 1 + 5 = 9; swap-in 1 unit; final token at 11.
        assert_eq!(report.timelines[0].completion, Some(11.0));
    }

    #[test]
    fn swap_return_defers_until_memory_frees() {
        // One big preserve-holder fills memory while a swapped request wants
        // back in; the swap-in waits for the hold to end.
        let trace = vec![
            RequestSpec {
                id: 1,
                arrival_time: 0.0,
                prompt_len: 1,
                segments: vec![Segment {
                    decode_len: 1,
                    api: ApiCallSpec::new(ApiType::Math, 20.0, 0).unwrap(),
                    pinned_strategy: Some(Strategy::Swap),
                }],
                final_decode_len: 1,
            },
            RequestSpec {
                id: 2,
                arrival_time: 0.0,
                prompt_len: 1,
                segments: vec![Segment {
                    decode_len: 5,
                    api: ApiCallSpec::new(ApiType::Math, 30.0, 0).unwrap(),
                    pinned_strategy: Some(Strategy::Preserve),
                }],
                final_decode_len: 1,
            },
        ];
        let mut cfg = unit_cfg(Policy::Fcfs, 8.0);
        cfg.sched.max_batch_requests = 2;
        let report = run(&trace, &cfg).unwrap();
        // Request 1: API [2, 22). Request 2 holds 6 from t=6 while in its API
        // [6, 36). On return at 22, request 1 needs 3 tokens peak: 6+3 > 8,
        // so it waits until request 2 completes at 37.
        let t1 = &report.timelines[0];
        let t2 = &report.timelines[1];
        assert_eq!(t2.completion, Some(37.0));
        assert_eq!(t1.completion, Some(38.0));
    }

    #[test]
    fn deterministic_event_logs() {
        let trace: Vec<RequestSpec> = (0..5)
            .map(|i| RequestSpec {
                id: i,
                arrival_time: i as f64,
                prompt_len: 1 + i % 3,
                segments: vec![Segment {
                    decode_len: 3 + i,
                    api: ApiCallSpec::new(ApiType::Qa, 2.0 + i as f64, 1).unwrap(),
                    pinned_strategy: None,
                }],
                final_decode_len: 2,
            })
            .collect();
        let mut cfg = unit_cfg(Policy::Lamps, 40.0);
        cfg.collect_events = true;
        cfg.seed = 7;
        let mut e1 = Engine::new(&trace, cfg.clone()).unwrap();
        let r1 = e1.run().unwrap();
        let mut e2 = Engine::new(&trace, cfg).unwrap();
        let r2 = e2.run().unwrap();
        assert_eq!(e1.event_log_lines(), e2.event_log_lines());
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }

    #[test]
    fn step_iteration_matches_run() {
        let trace: Vec<RequestSpec> = (0..4)
            .map(|i| RequestSpec {
                id: i,
                arrival_time: (i / 2) as f64,
                prompt_len: 1,
                segments: vec![Segment {
                    decode_len: 2 + i,
                    api: ApiCallSpec::new(ApiType::Ve, 3.0, 1).unwrap(),
                    pinned_strategy: None,
                }],
                final_decode_len: 1 + i,
            })
            .collect();
        for policy in Policy::ALL {
            let mut cfg = unit_cfg(policy, 20.0);
            cfg.collect_events = true;
            let mut fast = Engine::new(&trace, cfg.clone()).unwrap();
            let fast_report = fast.run().unwrap();
            let mut slow = Engine::new(&trace, cfg).unwrap();
            while slow.step_iteration().unwrap() {}
            slow.settle().unwrap();
            let slow_report = slow.build_report().unwrap();
            assert_eq!(
                serde_json::to_string(&fast_report).unwrap(),
                serde_json::to_string(&slow_report).unwrap(),
                "policy {policy}"
            );
            assert_eq!(fast.event_log_lines(), slow.event_log_lines(), "policy {policy}");
        }
    }

    #[test]
    fn horizon_cuts_simulation_short() {
        let mut cfg = unit_cfg(Policy::Fcfs, 100.0);
        cfg.horizon = Some(4.0);
        let report = run(&[no_api(1, 0.0, 10)], &cfg).unwrap();
        assert!(report.timelines[0].completion.is_none());
        assert!(report.aggregates.is_none());
    }

    #[test]
    fn isolated_latency_unit_mode() {
        let req = RequestSpec {
            id: 1,
            arrival_time: 0.0,
            prompt_len: 2,
            segments: vec![Segment {
                decode_len: 3,
                api: ApiCallSpec::new(ApiType::Math, 4.0, 1).unwrap(),
                pinned_strategy: None,
            }],
            final_decode_len: 2,
        };
        // prefill 2 + decode 3 + api 4 + decode 2.
        assert_eq!(isolated_latency(&req, &CostModel::unit()), 11.0);
    }
}
