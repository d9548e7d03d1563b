//! Discrete-event scheduling simulator for API-augmented LLM inference serving.
//!
//! An API-augmented request pauses mid-decode to call an external tool (math,
//! retrieval, image generation, another model) and resumes once the response
//! is appended to its context. While the call is in flight the request's KV
//! cache either stays resident (*Preserve*), is dropped and rebuilt on return
//! (*Discard*), or is moved to host memory and restored later (*Swap*). Each
//! choice wastes a different amount of memory×time, and the right schedule
//! depends on which choice each request will make.
//!
//! This crate models that whole pipeline at desk scale:
//!
//! * [`model`] / [`cost`] — domain types, the cost model, and the three
//!   memory-waste formulas for Preserve / Discard / Swap.
//! * [`strategy`] — per-request handling-strategy prediction (argmin of the
//!   three wastes) and the memory-over-time rank score used by the scheduler.
//! * [`scheduler`] — queue management, ranking, batch formation under a memory
//!   budget, starvation prevention, plus FCFS / SJF / SJF-by-total-length
//!   baselines.
//! * [`engine`] — the deterministic discrete-event engine that executes decode
//!   iterations, fires API events, and records per-request timelines.
//! * [`workload`] — trace ingestion, synthetic workload generation from
//!   published API statistics, and the predictor stack (oracle, binned,
//!   Gaussian-noise-injected).
//! * [`metrics`] — latency/TTFT/throughput aggregation and policy comparison.

pub mod cost;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod scheduler;
pub mod strategy;
pub mod workload;

pub use cost::CostModel;
pub use engine::{Engine, EngineConfig, EventKind, RequestTimeline};
pub use error::SimError;
pub use metrics::{compare, ComparisonTable, SimReport};
pub use model::{ApiCallSpec, ApiType, MemoryState, RequestSpec, Segment};
pub use scheduler::{Policy, SchedulerConfig};
pub use strategy::{choose_strategy, memory_time_score, HandlingDecision, Prediction, Strategy};
pub use workload::{generate_synthetic, load_trace, save_trace, ApiClassStats, PredictorKind};
