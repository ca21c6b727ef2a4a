//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any of criteria 1 to 8 fails.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vspan_core::aggregate;
use vspan_core::analysis::latency_breakdown;
use vspan_core::event::TraceEvent;
use vspan_core::fsm::StateMachineDef;
use vspan_core::reconstruct::{reconstruct, ReconstructorConfig, REDIS_SERVICE};
use vspan_core::sht::{log_ceil, AttributePath, HistoryTree, TreeConfig, Value};
use vspan_core::sim::{scenarios, simulate, Noise, SimOutput, Topology, Workload};
use vspan_core::verify::{analyze_experiment, compare, verify_experiment};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.3}s", d.as_secs_f64())
}

fn simulate_to(dir: &Path, topo: &Topology, wl: &Workload, noise: &Noise) -> SimOutput {
    let out = simulate(topo, wl, noise).expect("simulation");
    out.write_experiment(dir, &BTreeMap::new()).expect("write experiment");
    out
}

/// 1. Each use-case topology, 100 overlapping requests, decoys on.
fn ground_truth_reconstruction() -> Vec<Outcome> {
    scenarios::all()
        .into_iter()
        .map(|(name, topo)| {
            let dir = tempfile::tempdir().unwrap();
            // 0.5ms mean gap against ~2-19ms request latency keeps many requests in flight.
            let wl = Workload::for_topology(&topo, 100, 5e5, 2e5, 7);
            let started = Instant::now();
            simulate_to(dir.path(), &topo, &wl, &Noise::decoys());
            let report = verify_experiment(dir.path(), ReconstructorConfig::default()).unwrap();
            let took = started.elapsed();
            let pass = report.is_exact() && took < Duration::from_secs(5);
            outcome(
                pass,
                format!(
                    "{name}: {}/{} matched, {} roots, {} (limit 5s)",
                    report.matched,
                    report.total,
                    report.reconstructed_roots,
                    secs(took)
                ),
            )
        })
        .collect()
}

/// 2. 1200 requests, Gaussian inter-arrival, end to end.
fn large_workload_scale() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let topo = scenarios::use_case_1();
    let wl = Workload::for_topology(&topo, 1200, 5e6, 1e6, 42);
    let started = Instant::now();
    let out = simulate_to(dir.path(), &topo, &wl, &Noise::decoys());
    let report = verify_experiment(dir.path(), ReconstructorConfig::default()).unwrap();
    let took = started.elapsed();
    outcome(
        report.is_exact() && took < Duration::from_secs(30),
        format!(
            "{}/{} matched over {} events, {} (limit 30s)",
            report.matched,
            report.total,
            out.event_count(),
            secs(took)
        ),
    )
}

/// 3. Use-case-3 breakdown from the fixture timings.
fn use_case_3_breakdown() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let topo = scenarios::use_case_3();
    let wl = Workload::for_topology(&topo, 1, 0.0, 0.0, 1);
    simulate_to(dir.path(), &topo, &wl, &Noise::default());
    let (_, rec) = analyze_experiment(dir.path(), ReconstructorConfig::default()).unwrap();
    let Some(root) = rec.forest.spans.first() else {
        return outcome(false, "no root span reconstructed");
    };
    let b = match latency_breakdown(root) {
        Ok(b) => b,
        Err(e) => return outcome(false, e.to_string()),
    };
    let redis_leaf = b.leaf_times.get("redis:get").copied().unwrap_or(-1);
    let redis_total = b.per_service.get(REDIS_SERVICE).copied().unwrap_or(0);
    let non_redis = (b.total_ns - redis_total) as f64 / b.total_ns as f64;
    outcome(
        redis_leaf == 40_000 && b.total_ns >= 18_000_000 && non_redis >= 0.95,
        format!(
            "redis get leaf {redis_leaf}ns (want 40000), total {}ns (want >= 18000000), non-redis {:.4} (want >= 0.95)",
            b.total_ns, non_redis
        ),
    )
}

/// 4. The worked three-transition example.
fn worked_fsm_example() -> Outcome {
    let def = Arc::new(
        StateMachineDef::builder()
            .states(["s", "k", "w", "n"])
            .actions(["a", "b", "c"])
            .accepting(["n"])
            .initial("s")
            .class("p", |_, e: &char| *e == 'p')
            .class("t", |_, e: &char| *e == 't')
            .class("h", |_, e: &char| *e == 'h')
            .rule("s", "p", "k", "a")
            .rule("k", "t", "w", "b")
            .rule("w", "h", "n", "c")
            .build()
            .unwrap(),
    );
    let (states, actions) = def.run_sequence(&['p', 't', 'h']).unwrap();
    outcome(
        states == ["s", "k", "w", "n"] && actions == ["a", "b", "c"],
        format!("states {} actions {}", states.concat(), actions.concat()),
    )
}

struct TreeRun {
    tree: HistoryTree,
    writes: Vec<(i64, usize, i64)>,
}

fn random_history(intervals: usize, seed: u64) -> TreeRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attrs: Vec<AttributePath> = (0..500)
        .map(|i| AttributePath::new(["requests", &format!("{}", i / 4), ["state", "url", "a2", "a4"][i % 4]]).unwrap())
        .collect();
    let mut tree = HistoryTree::with_config(TreeConfig::default());
    let mut writes = Vec::with_capacity(intervals);
    let mut t = 0;
    for _ in 0..intervals {
        t += rng.random_range(1..1_000);
        let a = rng.random_range(0..attrs.len());
        let v = rng.random_range(0..1_000_000);
        tree.set_attribute(t, &attrs[a], v).unwrap();
        writes.push((t, a, v));
    }
    tree.close_history(t + 1_000).unwrap();
    TreeRun { tree, writes }
}

/// 5. Point queries against a linear scan, depth bound, visit growth.
fn history_tree_oracle() -> Outcome {
    let run = random_history(10_000, 5);
    let attrs: Vec<AttributePath> = (0..500)
        .map(|i| AttributePath::new(["requests", &format!("{}", i / 4), ["state", "url", "a2", "a4"][i % 4]]).unwrap())
        .collect();
    let (_, end) = run.tree.span().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut agree = 0;
    let mut visits = 0;
    for _ in 0..1_000 {
        let t = rng.random_range(0..=end);
        let mut want: HashMap<&AttributePath, Value> = HashMap::new();
        for &(_, a, v) in run.writes.iter().take_while(|w| w.0 <= t) {
            want.insert(&attrs[a], Value::Int(v));
        }
        let (got, stats) = run.tree.query_at_with_stats(t).unwrap();
        visits += stats.nodes_visited;
        if got.len() == want.len() && got.iter().all(|(k, v)| want.get(k) == Some(v)) {
            agree += 1;
        }
    }
    let bound = log_ceil(run.tree.node_count(), TreeConfig::default().fanout) + 1;
    let depth_ok = run.tree.depth() <= bound && run.tree.check_invariants().is_ok();

    let double = random_history(20_000, 7);
    let (_, end2) = double.tree.span().unwrap();
    let mut visits2 = 0;
    for _ in 0..1_000 {
        let t = rng.random_range(0..=end2);
        visits2 += double.tree.query_at_with_stats(t).unwrap().1.nodes_visited;
    }
    let (mean, mean2) = (visits as f64 / 1000.0, visits2 as f64 / 1000.0);
    outcome(
        agree == 1_000 && depth_ok && run.tree.interval_count() == 10_000 && mean2 < 2.0 * mean,
        format!(
            "{agree}/1000 queries agree over {} intervals; depth {} <= {bound} over {} nodes; mean visits {mean:.2} -> {mean2:.2} when doubled (ratio {:.2} < 2)",
            run.tree.interval_count(),
            run.tree.depth(),
            run.tree.node_count(),
            mean2 / mean
        ),
    )
}

/// 6. Randomised multi-file experiments with clock offsets.
fn merge_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut failures = Vec::new();
    for round in 0..50 {
        let (_, topo) = scenarios::all().into_iter().nth(round % 3).unwrap();
        let n = rng.random_range(1..40);
        let wl = Workload::for_topology(&topo, n, rng.random_range(0.0..2e6), rng.random_range(0.0..1e6), rng.random());
        let out = simulate(&topo, &wl, &Noise::decoys()).unwrap();
        let skew: BTreeMap<String, i64> = topo
            .services
            .iter()
            .map(|s| (s.name.clone(), rng.random_range(0..5_000_000)))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        out.write_experiment(dir.path(), &skew).unwrap();
        let merge = || aggregate::merge_streams(aggregate::load_experiment(dir.path()).unwrap()).unwrap();
        let merged = merge();
        let sorted = merged.windows(2).all(|w| w[0].ts <= w[1].ts);
        let mut got: Vec<String> = merged.iter().map(TraceEvent::to_line).collect();
        let mut want: Vec<String> = out.traces.iter().flat_map(|t| t.events.iter().map(TraceEvent::to_line)).collect();
        got.sort();
        want.sort();
        let identical = merge() == merged;
        if !(sorted && got == want && identical) {
            failures.push(format!("round {round}: sorted={sorted} multiset={} rerun={identical}", got == want));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "50/50 experiments sorted, multiset-preserving and identical on rerun".to_string()
        } else {
            failures.join("; ")
        },
    )
}

/// A random merge of the per-request subsequences inside each group of
/// equal timestamps. Decoys keep their own relative order.
fn legal_interleaving(events: &[(Option<usize>, TraceEvent)], rng: &mut ChaCha8Rng) -> Vec<TraceEvent> {
    let mut out = Vec::with_capacity(events.len());
    let mut i = 0;
    while i < events.len() {
        let ts = events[i].1.ts;
        let mut j = i;
        while j < events.len() && events[j].1.ts == ts {
            j += 1;
        }
        let mut queues: BTreeMap<Option<usize>, Vec<&TraceEvent>> = BTreeMap::new();
        for (origin, ev) in &events[i..j] {
            queues.entry(*origin).or_default().push(ev);
        }
        // Draw a slot per event, then deal each queue into its slots in order.
        let mut slots: Vec<Option<usize>> = queues
            .iter()
            .flat_map(|(k, q)| std::iter::repeat_n(*k, q.len()))
            .collect();
        slots.shuffle(rng);
        let mut cursors: BTreeMap<Option<usize>, usize> = BTreeMap::new();
        for k in slots {
            let c = cursors.entry(k).or_default();
            out.push(queues[&k][*c].clone());
            *c += 1;
        }
        i = j;
    }
    out
}

/// 7. Simultaneous arrivals, every legal ordering gives one forest.
fn interleaving_robustness() -> Outcome {
    let topo = scenarios::use_case_1();
    let wl = Workload::for_topology(&topo, 10, 0.0, 0.0, 77);
    let out = simulate(&topo, &wl, &Noise::decoys()).unwrap();
    let events = out.merged_with_origins();
    let tied = events.windows(2).filter(|w| w[0].1.ts == w[1].1.ts && w[0].0 != w[1].0).count();
    let reference = reconstruct(events.iter().map(|(_, e)| e.clone()), ReconstructorConfig::default())
        .unwrap()
        .forest;
    let exact = compare(&reference, &out.ground_truth).is_exact();
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let mut same = 0;
    let mut distinct_orders = std::collections::HashSet::new();
    for _ in 0..100 {
        let order = legal_interleaving(&events, &mut rng);
        distinct_orders.insert(order.iter().map(TraceEvent::to_line).collect::<Vec<_>>().concat());
        let forest = reconstruct(order, ReconstructorConfig::default()).unwrap().forest;
        if forest == reference {
            same += 1;
        }
    }
    outcome(
        same == 100 && exact && tied > 0,
        format!(
            "{same}/100 interleavings ({} distinct, {tied} cross-request ties) give the reference forest; reference matches ground truth: {exact}",
            distinct_orders.len()
        ),
    )
}

fn timed_analysis(dir: &Path) -> (Duration, usize) {
    let started = Instant::now();
    let (merged, rec) = analyze_experiment(dir, ReconstructorConfig::default()).unwrap();
    let took = started.elapsed();
    assert!(rec.orphans.is_empty());
    (took, merged.len())
}

/// 8. Analysis time of 1,000,000 vs 500,000 events.
fn scaling_sanity() -> Outcome {
    let topo = scenarios::use_case_1();
    let per_request = simulate(&topo, &Workload::for_topology(&topo, 1, 0.0, 0.0, 0), &Noise::default())
        .unwrap()
        .event_count();
    let mut results = Vec::new();
    for target in [500_000usize, 1_000_000] {
        let n = target.div_ceil(per_request);
        let dir = tempfile::tempdir().unwrap();
        let wl = Workload::for_topology(&topo, n, 5e5, 2e5, 8);
        simulate_to(dir.path(), &topo, &wl, &Noise::default());
        // Best of two runs damps one-off scheduling noise.
        let (a, events) = timed_analysis(dir.path());
        let (b, _) = timed_analysis(dir.path());
        results.push((a.min(b), events));
    }
    let ratio = results[1].0.as_secs_f64() / results[0].0.as_secs_f64();
    outcome(
        ratio <= 3.0,
        format!(
            "{} events in {}, {} events in {}, ratio {ratio:.2} (limit 3)",
            results[0].1,
            secs(results[0].0),
            results[1].1,
            secs(results[1].0)
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: &str, o: Outcome| {
        if !o.pass {
            failed += 1;
        }
        println!("criterion {id}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    for o in ground_truth_reconstruction() {
        report("1", o);
    }
    report("2", large_workload_scale());
    report("3", use_case_3_breakdown());
    report("4", worked_fsm_example());
    report("5", history_tree_oracle());
    report("6", merge_properties());
    report("7", interleaving_robustness());
    report("8", scaling_sanity());
    println!(
        "criterion 9: NOT REPRODUCIBLE - runtime overhead against an uninstrumented runtime and against the \
         kernel-level baseline needs the patched runtime and live services; it is replaced by criteria 1-8"
    );
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
