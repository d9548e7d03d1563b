//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers (run with `--nocapture` to see them).

use augsched::cost::{t_fwd, waste_discard, waste_preserve, waste_swap};
use augsched::engine::{self, isolated_latency, Engine, EngineConfig, EventKind};
use augsched::metrics::SimReport;
use augsched::model::{ApiCallSpec, ApiType, RequestSpec, Segment};
use augsched::scheduler::{Policy, SchedulerConfig, STARVATION_DISABLED};
use augsched::strategy::{choose_strategy, BatchContextEstimate, Prediction, Strategy};
use augsched::workload::{
    generate_synthetic, generate_synthetic_with, predict, reference_trace, ApiClassStats,
    PredictorKind, SynthesisOptions,
};
use augsched::CostModel;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn pass(criterion: u32, name: &str, detail: String) {
    println!("[acceptance] criterion {criterion} ({name}): PASS — {detail}");
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_worked_example_golden() {
    let start = std::time::Instant::now();
    let mut sums = Vec::new();
    for (policy, expected_sum) in [
        (Policy::Fcfs, 35.0),
        (Policy::Sjf, 31.0),
        (Policy::SjfTotal, 33.0),
        (Policy::Lamps, 30.0),
    ] {
        let mut sched = SchedulerConfig::new(policy, 6.0);
        sched.max_batch_requests = 1;
        let cfg = EngineConfig::new(CostModel::unit(), sched);
        let report = engine::run(&reference_trace(), &cfg).unwrap();
        assert_eq!(report.completed, 3, "{policy}");
        let sum: f64 = report
            .timelines
            .iter()
            .map(|t| t.completion.unwrap() - t.arrival)
            .sum();
        // Unit mode keeps every completion an integer, so the sum is exact
        // and the average is exactly expected_sum / 3.
        assert_eq!(sum, expected_sum, "{policy}");
        assert_eq!(report.mean_e2e(), Some(expected_sum / 3.0), "{policy}");
        sums.push(sum);
    }
    pass(
        1,
        "worked example",
        format!(
            "average JCTs 35/3, 31/3, 33/3, 30/3 exact; {:?} in {:?}",
            sums,
            start.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_waste_equation_oracles() {
    let start = std::time::Instant::now();
    // Independent straight-line reimplementation of the three formulas.
    let ref_preserve = |t_int: f64, c_i: f64, m: f64| t_int * c_i * m;
    let ref_discard = |c_i: f64, c_other: f64, m: f64, fwd: f64| fwd * c_i * m + fwd * c_other * m;
    let ref_swap = |swap: f64, c_batch: f64, m: f64| 2.0 * swap * c_batch * m;

    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut checked = 0u32;
    for _ in 0..1000 {
        let unit_mode: bool = rng.gen();
        let mut cm = if unit_mode {
            let mut c = CostModel::unit();
            c.recompute_rate = rng.gen_range(1..6) as f64;
            c.swap_latency = rng.gen_range(0..4) as f64;
            c
        } else {
            CostModel::physical(
                rng.gen_range(0.5..4.0),
                rng.gen_range(1e-7..1e-4),
                rng.gen_range(1e-8..1e-5),
                rng.gen_range(1.0..64.0),
                rng.gen_range(10.0..5000.0),
            )
        };
        cm.mem_per_token = rng.gen_range(0.25..4.0);
        let m = cm.mem_per_token;
        let t_int: f64 = rng.gen_range(0.0..60.0);
        let c_i: u64 = rng.gen_range(0..2000);
        let c_other: u64 = rng.gen_range(0..4000);
        let c_batch: u64 = c_other + c_i;

        let rel = |got: f64, want: f64| {
            if want == 0.0 {
                got.abs()
            } else {
                (got - want).abs() / want.abs()
            }
        };
        let wp = waste_preserve(t_int, c_i, m).unwrap();
        assert!(rel(wp, ref_preserve(t_int, c_i as f64, m)) < 1e-12);
        let fwd_ref = if cm.unit_mode {
            if c_i == 0 { 0.0 } else { (c_i as f64 / cm.recompute_rate).ceil() }
        } else {
            cm.fwd_k1 * (c_i as f64).powi(2) * cm.model_dim
        };
        assert!(rel(t_fwd(c_i, &cm), fwd_ref) < 1e-12);
        let wd = waste_discard(c_i, c_other, m, &cm).unwrap();
        assert!(rel(wd, ref_discard(c_i as f64, c_other as f64, m, fwd_ref)) < 1e-12);
        let swap_ref = if cm.unit_mode {
            cm.swap_latency
        } else {
            c_i as f64 * m / cm.swap_bandwidth
        };
        let ws = waste_swap(c_i, c_batch, m, &cm).unwrap();
        let ws_ref = if c_i == 0 { 0.0 } else { ref_swap(swap_ref, c_batch as f64, m) };
        assert!(rel(ws, ws_ref) < 1e-12);
        checked += 1;
    }
    assert_eq!(checked, 1000);
    pass(
        2,
        "equation oracles",
        format!("1000 random inputs, rel err < 1e-12, {:?}", start.elapsed()),
    );
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_strategy_argmin() {
    let start = std::time::Instant::now();
    let mut rng = StdRng::seed_from_u64(0xa47);
    let mut ties = 0u32;
    for i in 0..10_000 {
        let cm = if rng.gen() {
            let mut c = CostModel::unit();
            c.recompute_rate = rng.gen_range(1..4) as f64;
            c.swap_latency = rng.gen_range(0..3) as f64;
            c
        } else {
            CostModel::physical(
                1.0,
                rng.gen_range(1e-7..1e-4),
                rng.gen_range(1e-8..1e-5),
                rng.gen_range(1.0..64.0),
                rng.gen_range(10.0..5000.0),
            )
        };
        // Every ~10th case forces tie-prone degenerate inputs.
        let (pre, dur, prompt): (u64, f64, u64) = if i % 10 == 0 {
            (0, 0.0, if rng.gen() { 0 } else { rng.gen_range(0..50) })
        } else {
            (rng.gen_range(0..400), rng.gen_range(0.0..50.0), rng.gen_range(1..100))
        };
        let pred = Prediction {
            pre_api_len: pre as f64,
            api_duration: dur,
            api_response_len: rng.gen_range(0..50) as f64,
            total_remaining_len: rng.gen_range(0..800) as f64,
        };
        let cap = rng.gen_range(1..3000);
        let est = BatchContextEstimate::full_memory(cap, prompt + pre);
        let d = choose_strategy(&pred, prompt, est, &cm).unwrap();

        // Brute-force three-way minimum with documented tie order
        // Preserve > Discard > Swap (first listed wins).
        let wastes = [d.waste_preserve, d.waste_discard, d.waste_swap];
        let min = wastes.iter().cloned().fold(f64::INFINITY, f64::min);
        let expected = if d.waste_preserve == min {
            Strategy::Preserve
        } else if d.waste_discard == min {
            Strategy::Discard
        } else {
            Strategy::Swap
        };
        if wastes.iter().filter(|&&w| w == min).count() > 1 {
            ties += 1;
        }
        assert_eq!(d.strategy, expected, "case {i}");
    }
    assert!(ties > 0, "tie cases must be exercised");
    pass(
        3,
        "strategy argmin",
        format!("10000 cases ({ties} ties), {:?}", start.elapsed()),
    );
}

// ---------------------------------------------------------------- criterion 4

fn random_api_trace(n: usize, seed: u64) -> Vec<RequestSpec> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut clock = 0.0_f64;
    (0..n as u64)
        .map(|id| {
            clock += rng.gen_range(0.0..4.0);
            let n_segs = rng.gen_range(0..3);
            let segments = (0..n_segs)
                .map(|_| Segment {
                    decode_len: rng.gen_range(0..12),
                    api: ApiCallSpec::new(
                        ApiType::Generic,
                        rng.gen_range(0.0..20.0_f64).round(),
                        rng.gen_range(0..5),
                    )
                    .unwrap(),
                    pinned_strategy: None,
                })
                .collect();
            RequestSpec {
                id,
                arrival_time: clock.round(),
                prompt_len: rng.gen_range(1..8),
                segments,
                final_decode_len: rng.gen_range(1..15),
            }
        })
        .collect()
}

#[test]
fn criterion_4_noisy_zero_equals_oracle() {
    let start = std::time::Instant::now();
    let mut compared = 0;
    for seed in [1u64, 7, 42, 1234] {
        let trace = random_api_trace(12, seed * 11 + 3);
        for policy in Policy::ALL {
            let mut sched = SchedulerConfig::new(policy, 40.0);
            sched.max_batch_requests = 3;
            let mut cost = CostModel::unit();
            cost.swap_latency = 1.0;
            let mut cfg = EngineConfig::new(cost, sched);
            cfg.collect_events = true;
            cfg.seed = seed;

            let mut oracle_engine = Engine::new(&trace, cfg.clone()).unwrap();
            let oracle_report = oracle_engine.run().unwrap();

            cfg.predictor = PredictorKind::noisy(0.0);
            let mut noisy_engine = Engine::new(&trace, cfg).unwrap();
            let noisy_report = noisy_engine.run().unwrap();

            assert_eq!(
                oracle_engine.event_log_lines(),
                noisy_engine.event_log_lines(),
                "policy {policy}, seed {seed}"
            );
            assert_eq!(
                serde_json::to_string(&oracle_report).unwrap(),
                serde_json::to_string(&noisy_report).unwrap()
            );
            compared += 1;
        }
    }
    pass(
        4,
        "oracle equivalence",
        format!("{compared} trace/policy/seed combos bit-identical, {:?}", start.elapsed()),
    );
}

// ----------------------------------------------------- high-load scenario

fn high_load_classes() -> Vec<ApiClassStats> {
    let mut quick = ApiClassStats::new(ApiType::Math, (0.2, 0.1), (1.2, 0.8));
    quick.response_len = 4;
    let mut slow = ApiClassStats::new(ApiType::Chatbot, (120.0, 40.0), (1.0, 0.7));
    slow.response_len = 8;
    vec![quick, slow]
}

fn high_load_cost() -> CostModel {
    let mut cm = CostModel::unit();
    cm.swap_latency = 2.0;
    cm
}

fn high_load_cfg(policy: Policy, starvation_threshold: u64) -> EngineConfig {
    let mut sched = SchedulerConfig::new(policy, 600.0);
    sched.max_batch_requests = 32;
    sched.starvation_threshold = starvation_threshold;
    EngineConfig::new(high_load_cost(), sched)
}

fn high_load_trace(n: usize, seed: u64) -> Vec<RequestSpec> {
    // Lengths capped so the largest possible context (64 + 4*120 + 3*8)
    // stays inside the 600-token budget: no arrival is rejected.
    let opts = SynthesisOptions {
        decode_len_range: (1, 120),
        prompt_len_range: (8, 64),
        max_api_calls: 3,
    };
    generate_synthetic_with(&high_load_classes(), n, 0.03, seed, &opts).unwrap()
}

fn run_policy(trace: &[RequestSpec], policy: Policy, threshold: u64, seed: u64) -> SimReport {
    let mut cfg = high_load_cfg(policy, threshold);
    cfg.seed = seed;
    engine::run(trace, &cfg).unwrap()
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_directional_gain_over_fcfs() {
    let start = std::time::Instant::now();
    let seeds = [11u64, 22, 33, 44, 55];
    let mut fcfs_e2e = 0.0;
    let mut fcfs_ttft = 0.0;
    let mut lamps_e2e = 0.0;
    let mut lamps_ttft = 0.0;
    let mut queueing_ratio_sum = 0.0;
    for &seed in &seeds {
        let trace = high_load_trace(500, seed);
        let fcfs = run_policy(&trace, Policy::Fcfs, 100, seed);
        let lamps = run_policy(&trace, Policy::Lamps, 100, seed);
        assert_eq!(fcfs.completed, trace.len(), "all requests complete");
        assert_eq!(lamps.completed, trace.len());

        // Load precondition: FCFS mean queueing delay >= 2x mean service.
        let cm = high_load_cost();
        let mean_service: f64 =
            trace.iter().map(|r| isolated_latency(r, &cm)).sum::<f64>() / trace.len() as f64;
        let mean_e2e = fcfs.mean_e2e().unwrap();
        let queueing = mean_e2e - mean_service;
        queueing_ratio_sum += queueing / mean_service;
        assert!(
            queueing >= 2.0 * mean_service,
            "seed {seed}: queueing {queueing:.1} < 2x service {mean_service:.1}"
        );

        fcfs_e2e += fcfs.mean_e2e().unwrap();
        fcfs_ttft += fcfs.mean_ttft().unwrap();
        lamps_e2e += lamps.mean_e2e().unwrap();
        lamps_ttft += lamps.mean_ttft().unwrap();
    }
    let n = seeds.len() as f64;
    let (fe, ft, le, lt) = (fcfs_e2e / n, fcfs_ttft / n, lamps_e2e / n, lamps_ttft / n);
    assert!(le <= fe, "LAMPS mean e2e {le:.1} vs FCFS {fe:.1}");
    assert!(lt <= ft, "LAMPS mean ttft {lt:.1} vs FCFS {ft:.1}");
    pass(
        5,
        "directional gain",
        format!(
            "mean e2e {le:.0} vs {fe:.0} ({:+.1}%), mean ttft {lt:.0} vs {ft:.0} ({:+.1}%), \
             queueing/service {:.1}x, {:?}",
            (le - fe) / fe * 100.0,
            (lt - ft) / ft * 100.0,
            queueing_ratio_sum / n,
            start.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_starvation_prevention_tail() {
    let start = std::time::Instant::now();
    let seeds = [11u64, 22, 33, 44, 55];
    let mut p99_on = 0.0;
    let mut p99_off = 0.0;
    for &seed in &seeds {
        let trace = high_load_trace(500, seed);
        let on = run_policy(&trace, Policy::Lamps, 100, seed);
        let off = run_policy(&trace, Policy::Lamps, STARVATION_DISABLED, seed);
        p99_on += on.p99_e2e().unwrap();
        p99_off += off.p99_e2e().unwrap();
    }
    let n = seeds.len() as f64;
    let (on, off) = (p99_on / n, p99_off / n);
    assert!(
        on <= off,
        "p99 with threshold 100 ({on:.1}) must not exceed disabled ({off:.1})"
    );
    pass(
        6,
        "starvation prevention",
        format!("p99 e2e {on:.0} (threshold 100) vs {off:.0} (disabled), {:?}", start.elapsed()),
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_error_injection_degradation() {
    let start = std::time::Instant::now();
    let ps = [0.0, 0.05, 0.1, 0.3, 0.5];
    let seeds: Vec<u64> = (1..=16).map(|s| s * 7).collect();
    let mut means = Vec::new();
    for &p in &ps {
        let mut total = 0.0;
        for &seed in &seeds {
            let trace = high_load_trace(300, seed);
            let mut cfg = high_load_cfg(Policy::Lamps, 100);
            cfg.seed = seed;
            cfg.predictor = PredictorKind::noisy(p);
            let report = engine::run(&trace, &cfg).unwrap();
            total += report.mean_e2e().unwrap();
        }
        means.push(total / seeds.len() as f64);
    }
    for w in means.windows(2) {
        assert!(
            w[1] >= w[0] * 0.95,
            "mean e2e must be non-decreasing in p within a 5% band: {means:?}"
        );
    }
    pass(
        7,
        "error injection",
        format!("mean e2e over p {ps:?}: {means:?}, {:?}", start.elapsed()),
    );
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_invariant_suite() {
    let start = std::time::Instant::now();
    let mut cases = 0u32;

    // Memory budget + token conservation on random API traces, all policies.
    for seed in 0..125u64 {
        let trace = random_api_trace(10, seed);
        for policy in Policy::ALL {
            let budget = 30.0 + (seed % 5) as f64 * 10.0;
            let mut sched = SchedulerConfig::new(policy, budget);
            sched.max_batch_requests = 1 + (seed as usize % 4);
            let mut cost = CostModel::unit();
            cost.swap_latency = (seed % 3) as f64;
            let mut cfg = EngineConfig::new(cost, sched);
            cfg.seed = seed;
            let mut eng = Engine::new(&trace, cfg).unwrap();
            let report = eng.run().unwrap();
            assert!(
                eng.max_resident_seen() <= budget + 1e-9,
                "seed {seed} {policy}: resident {} > budget {budget}",
                eng.max_resident_seen()
            );
            for t in &report.timelines {
                if t.completion.is_some() {
                    let spec = trace.iter().find(|r| r.id == t.id).unwrap();
                    assert_eq!(t.tokens_emitted, spec.total_output_len(), "seed {seed}");
                }
            }
            // Liveness: finite work, everything completes.
            assert_eq!(report.completed + report.rejected.len(), trace.len());
            cases += 1;
        }
    }

    // Determinism (identical seeds give identical event logs) and causality
    // (no token emitted for a request while its API call is in flight).
    for seed in 0..100u64 {
        let trace = random_api_trace(6, seed + 900);
        let mut sched = SchedulerConfig::new(Policy::Lamps, 50.0);
        sched.max_batch_requests = 2;
        let mut cfg = EngineConfig::new(CostModel::unit(), sched);
        cfg.collect_events = true;
        cfg.seed = seed;
        let mut a = Engine::new(&trace, cfg.clone()).unwrap();
        a.run().unwrap();
        let mut b = Engine::new(&trace, cfg).unwrap();
        b.run().unwrap();
        assert_eq!(a.event_log_lines(), b.event_log_lines(), "seed {seed}");

        for req in &trace {
            let mut finishes: Vec<f64> = a
                .event_log()
                .iter()
                .filter(|e| e.kind == EventKind::ApiFinish && e.request_id == req.id)
                .map(|e| e.time)
                .collect();
            finishes.sort_by(|x, y| x.total_cmp(y));
            for (seg, finish) in req.segments.iter().zip(&finishes) {
                // The call occupied at least (finish - duration, finish).
                let call_start = finish - seg.api.duration;
                let offending = a.event_log().iter().any(|e| {
                    e.kind == EventKind::IterationComplete
                        && e.request_id == req.id
                        && e.time > call_start + 1e-9
                        && e.time < finish - 1e-9
                });
                assert!(!offending, "seed {seed}: token emitted during an API wait");
            }
        }
        cases += 1;
    }

    // SJF <= FCFS mean latency: no APIs, single slot, plentiful memory.
    for seed in 0..400u64 {
        let mut rng = StdRng::seed_from_u64(seed + 5000);
        let n = rng.gen_range(2..12);
        let mut clock = 0.0;
        let trace: Vec<RequestSpec> = (0..n)
            .map(|id| {
                clock += rng.gen_range(0.0..6.0_f64).round();
                RequestSpec {
                    id,
                    arrival_time: clock,
                    prompt_len: rng.gen_range(1..4),
                    segments: vec![],
                    final_decode_len: rng.gen_range(1..30),
                }
            })
            .collect();
        let mean = |policy: Policy| {
            // Pure policies: the classic SJF-optimality claim assumes no
            // starvation boost.
            let mut sched = SchedulerConfig::new(policy, 1e9);
            sched.max_batch_requests = 1;
            sched.starvation_threshold = STARVATION_DISABLED;
            let cfg = EngineConfig::new(CostModel::unit(), sched);
            engine::run(&trace, &cfg).unwrap().mean_e2e().unwrap()
        };
        let sjf = mean(Policy::Sjf);
        let fcfs = mean(Policy::Fcfs);
        assert!(
            sjf <= fcfs + 1e-9,
            "seed {seed}: SJF mean {sjf} > FCFS mean {fcfs}"
        );
        cases += 1;
    }

    assert!(cases >= 1000, "need >= 1000 generated cases, got {cases}");
    pass(
        8,
        "invariant suite",
        format!("{cases} generated cases, {:?}", start.elapsed()),
    );
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_generator_statistics() {
    let start = std::time::Instant::now();
    // Chatbot durations: sample mean within 3 standard errors of 28.6 s
    // over 10k samples. Zero-clamping biases the mean up by ~0.2 s, well
    // inside the band; the seed is frozen for reproducibility.
    let classes = vec![ApiClassStats::new(ApiType::Chatbot, (28.6, 15.6), (1.0, 0.0))];
    let trace = generate_synthetic(&classes, 10_000, 10.0, 20240613).unwrap();
    let durations: Vec<f64> = trace
        .iter()
        .flat_map(|r| r.segments.iter().map(|s| s.api.duration))
        .collect();
    assert!(durations.len() >= 10_000, "need 10k samples, got {}", durations.len());
    let n = durations.len() as f64;
    let mean = durations.iter().sum::<f64>() / n;
    let var = durations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!(
        (mean - 28.6).abs() <= 3.0 * se,
        "sample mean {mean:.3} outside 3 SE ({se:.3}) of 28.6"
    );
    pass(
        9,
        "generator statistics",
        format!(
            "chatbot mean {mean:.3} s vs 28.6 s (|diff| {:.3} <= 3 SE = {:.3}), n={}, {:?}",
            (mean - 28.6).abs(),
            3.0 * se,
            durations.len(),
            start.elapsed()
        ),
    );
}

// A sanity predictor check shared by the engine path: predictions stay
// finite on the high-load trace (guards the acceptance scenarios).
#[test]
fn high_load_scenario_predictions_finite() {
    let mut rng = StdRng::seed_from_u64(1);
    let trace = high_load_trace(50, 3);
    for r in &trace {
        let truth = Prediction::exact(r, 0, 0);
        let noisy = predict(&PredictorKind::noisy(0.5), &truth, &mut rng);
        noisy.validate().unwrap();
    }
}
