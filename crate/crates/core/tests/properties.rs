use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use vspan_core::aggregate;
use vspan_core::analysis::{critical_path, exclusive_times, latency_breakdown, path_weight, Exclusive};
use vspan_core::event::{
    self, AsyncContextPayload, HttpPayload, Payload, RedisCommandPayload, TraceEvent, TraceHeader,
};
use vspan_core::fsm::{MachineRun, StateMachineDef};
use vspan_core::reconstruct::{reconstruct, ReconstructorConfig};
use vspan_core::sht::{AttributePath, HistoryTree, Value};
use vspan_core::sim::{scenarios, simulate, Noise, Workload};
use vspan_core::span::{SpanKind, SpanNode};
use vspan_core::verify::compare;

// ---- events ----

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9/_:.-]{1,12}"
}

fn ipv4() -> impl Strategy<Value = String> {
    (0u8..=255, 0u8..=255, 0u8..=255, 0u8..=255).prop_map(|(a, b, c, d)| format!("{a}.{b}.{c}.{d}"))
}

fn http(status: bool) -> impl Strategy<Value = HttpPayload> {
    (
        "GET|POST|PUT|DELETE",
        "/[a-z0-9/]{0,10}",
        ipv4(),
        1i64..=65535,
        ipv4(),
        1i64..=65535,
        1i64..1 << 40,
        100i64..=599,
    )
        .prop_map(move |(method, url, src_addr, src_port, dst_addr, dst_port, sockid, code)| HttpPayload {
            method,
            url,
            src_addr,
            src_port,
            dst_addr,
            dst_port,
            sockid,
            status: status.then_some(code),
        })
}

fn payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        http(false).prop_map(Payload::ServerRequest),
        http(true).prop_map(Payload::ServerResponse),
        http(false).prop_map(Payload::ClientRequest),
        http(true).prop_map(Payload::ClientResponse),
        (1i64..1 << 50, 0i64..1 << 50, text()).prop_map(|(async_id, ctx_id, kind)| {
            Payload::AsyncContext(AsyncContextPayload { async_id, ctx_id, kind })
        }),
        (text(), "[a-z:0-9]{0,8}", 0i64..1_000_000).prop_map(|(cmd, key, duration_us)| {
            Payload::RedisCommand(RedisCommandPayload { cmd, key, duration_us })
        }),
    ]
}

fn trace_event() -> impl Strategy<Value = TraceEvent> {
    (
        0i64..i64::MAX / 4,
        text(),
        text(),
        payload(),
        prop::collection::btree_map("x_[a-z]{1,6}", any::<i32>(), 0..3),
    )
        .prop_map(|(ts, service, host, payload, extra)| {
            let mut ev = TraceEvent::new(ts, service, host, payload);
            ev.extra = extra.into_iter().map(|(k, v)| (k, serde_json::Value::from(v))).collect();
            ev
        })
}

proptest! {
    #[test]
    fn event_line_round_trip(ev in trace_event()) {
        event::validate_event(&ev).unwrap();
        let line = ev.to_line();
        prop_assert!(!line.contains('\n'));
        let back = event::parse_event_line(&line).unwrap();
        prop_assert_eq!(back, ev);
    }
}

// ---- merge ----

fn stream_set() -> impl Strategy<Value = Vec<(i64, Vec<(i64, i64)>)>> {
    prop::collection::vec(
        (
            -1_000_000i64..1_000_000,
            prop::collection::vec((0i64..1_000_000, 1i64..1000), 0..40),
        ),
        1..6,
    )
}

fn write_streams(dir: &std::path::Path, streams: &[(i64, Vec<(i64, i64)>)]) -> Vec<TraceEvent> {
    let mut adjusted = Vec::new();
    for (i, (offset, raw)) in streams.iter().enumerate() {
        let service = format!("svc{i}");
        let mut ts: Vec<(i64, i64)> = raw.clone();
        ts.sort();
        let events: Vec<TraceEvent> = ts
            .iter()
            .map(|&(t, id)| {
                TraceEvent::new(
                    t,
                    &service,
                    "h",
                    Payload::AsyncContext(AsyncContextPayload {
                        async_id: id,
                        ctx_id: 0,
                        kind: "after".into(),
                    }),
                )
            })
            .collect();
        let file = std::fs::File::create(dir.join(format!("{service}.trace"))).unwrap();
        event::write_trace(file, &TraceHeader::new(&service, "h", *offset), &events).unwrap();
        adjusted.extend(events.into_iter().map(|mut e| {
            e.ts += offset;
            e
        }));
    }
    adjusted
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn merge_is_sorted_and_conserving(streams in stream_set()) {
        let dir = tempfile::tempdir().unwrap();
        let mut expected = write_streams(dir.path(), &streams);
        let merged = aggregate::merge_streams(aggregate::load_experiment(dir.path()).unwrap()).unwrap();
        prop_assert!(merged.windows(2).all(|w| w[0].ts <= w[1].ts));
        let again = aggregate::merge_streams(aggregate::load_experiment(dir.path()).unwrap()).unwrap();
        prop_assert_eq!(&again, &merged);
        let key = |e: &TraceEvent| (e.ts, e.service.clone(), e.to_line());
        let mut got: Vec<_> = merged.iter().map(key).collect();
        let mut want: Vec<_> = expected.iter_mut().map(|e| key(e)).collect();
        got.sort();
        want.sort();
        prop_assert_eq!(got, want);
    }
}

// ---- history tree ----

#[derive(Clone, Debug)]
struct Write {
    t: i64,
    attr: usize,
    value: Option<i64>,
}

fn writes() -> impl Strategy<Value = Vec<Write>> {
    prop::collection::vec((0i64..50, 0usize..6, prop::option::weighted(0.85, 0i64..5)), 0..300).prop_map(|raw| {
        let mut t = 0;
        raw.into_iter()
            .map(|(dt, attr, value)| {
                t += dt;
                Write { t, attr, value }
            })
            .collect()
    })
}

fn attr_path(i: usize) -> AttributePath {
    AttributePath::new(["req", &format!("{}", i / 2), if i.is_multiple_of(2) { "state" } else { "url" }]).unwrap()
}

/// Value of every attribute at `t`: the last write at or before `t`.
fn linear_scan(writes: &[Write], t: i64) -> BTreeMap<AttributePath, Value> {
    let mut out = BTreeMap::new();
    for w in writes.iter().filter(|w| w.t <= t) {
        match w.value {
            Some(v) => out.insert(attr_path(w.attr), Value::Int(v)),
            None => out.remove(&attr_path(w.attr)),
        };
    }
    out
}

proptest! {
    #[test]
    fn history_matches_linear_scan(
        ws in writes(),
        capacity in 2usize..8,
        fanout in 2usize..5,
        extra in 0i64..20,
        extra_probes in prop::collection::vec(0i64..i64::MAX, 20),
    ) {
        let mut tree = HistoryTree::with_config(vspan_core::sht::TreeConfig { node_capacity: capacity, fanout });
        for w in &ws {
            let value = w.value.map(Value::Int).unwrap_or(Value::Null);
            tree.set_attribute(w.t, &attr_path(w.attr), value).unwrap();
        }
        let end = ws.last().map_or(0, |w| w.t) + extra;
        tree.close_history(end).unwrap();
        tree.check_invariants().unwrap();
        let mut probes: Vec<i64> = ws.iter().flat_map(|w| [w.t - 1, w.t, w.t + 1]).collect();
        probes.extend([0, end]);
        probes.extend(extra_probes.iter().map(|p| p % (end + 1)));
        for t in probes.into_iter().filter(|t| (0..=end).contains(t)) {
            prop_assert_eq!(tree.query_at(t).unwrap(), linear_scan(&ws, t), "t = {}", t);
        }
    }
}

// ---- state machine ----

fn pth() -> Arc<StateMachineDef<char>> {
    Arc::new(
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
    )
}

proptest! {
    /// Events that match no rule can be inserted anywhere without changing
    /// the recognised path.
    #[test]
    fn skipping_is_sound(noise in prop::collection::vec(prop::collection::vec("[xyz]", 0..4), 4)) {
        let mut seq = Vec::new();
        for (i, gap) in noise.iter().enumerate() {
            seq.extend(gap.iter().map(|s| s.chars().next().unwrap()));
            if i < 3 {
                seq.push(['p', 't', 'h'][i]);
            }
        }
        let (states, actions) = pth().run_sequence(&seq).unwrap();
        prop_assert_eq!(states, ["s", "k", "w", "n"]);
        prop_assert_eq!(actions, ["a", "b", "c"]);
    }

    /// Positions only move forward in the stream and follow the rule table.
    #[test]
    fn runs_are_monotone(seq in prop::collection::vec(prop::sample::select(vec!['p', 't', 'h', 'x']), 0..40)) {
        let def = pth();
        let mut run = MachineRun::new(def.clone());
        for e in &seq {
            run.step(e).unwrap();
        }
        let pos = run.positions();
        prop_assert!(pos.windows(2).all(|w| w[0].event_index < w[1].event_index));
        // Oracle: greedy scan for p, then t, then h.
        let mut want = 0;
        for e in &seq {
            if want < 3 && *e == ['p', 't', 'h'][want] {
                want += 1;
            }
        }
        prop_assert_eq!(pos.len(), want);
        prop_assert_eq!(run.is_accepting(), want == 3);
        for (i, p) in pos.iter().enumerate() {
            prop_assert_eq!(seq[p.event_index], ['p', 't', 'h'][i]);
            prop_assert_eq!(def.state_label(p.state), ["k", "w", "n"][i]);
        }
    }
}

// ---- analysis ----

fn span_tree() -> impl Strategy<Value = SpanNode> {
    let leaf = (0i64..1000, 0i64..500, prop::sample::select(vec!["a", "b", "redis"])).prop_map(|(start, len, svc)| {
        SpanNode {
            service: svc.into(),
            operation: format!("op-{svc}"),
            kind: if svc == "redis" { SpanKind::Redis } else { SpanKind::Server },
            start_ns: start,
            end_ns: start + len,
            complete: true,
            sockid: None,
            children: vec![],
        }
    });
    leaf.prop_recursive(4, 40, 4, |inner| {
        (
            0i64..1000,
            0i64..1500,
            prop::sample::select(vec!["a", "b", "c"]),
            any::<bool>(),
            prop::collection::vec(inner, 0..4),
        )
            .prop_map(|(start, len, svc, client, children)| SpanNode {
                service: svc.into(),
                operation: format!("op-{svc}"),
                kind: if client { SpanKind::Client } else { SpanKind::Server },
                start_ns: start,
                end_ns: start + len,
                complete: true,
                sockid: None,
                children,
            })
    })
}

fn random_path_weight(tree: &Exclusive<'_>, choices: &[usize]) -> i64 {
    let mut node = tree;
    let mut total = node.self_ns;
    for &c in choices {
        if node.children.is_empty() {
            break;
        }
        node = &node.children[c % node.children.len()];
        total += node.self_ns;
    }
    total
}

proptest! {
    #[test]
    fn breakdown_conserves_time(root in span_tree()) {
        let b = latency_breakdown(&root).unwrap();
        prop_assert_eq!(b.total_ns, root.duration_ns());
        prop_assert_eq!(b.accounted_ns(), b.total_ns);
        prop_assert!(b.per_service.values().all(|v| *v >= 0));
        prop_assert!(b.inter_service_ns >= 0);
    }

    #[test]
    fn critical_path_dominates_any_path(root in span_tree(), choices in prop::collection::vec(any::<usize>(), 0..8)) {
        let best = path_weight(&critical_path(&root).unwrap());
        let tree = exclusive_times(&root);
        prop_assert!(best >= random_path_weight(&tree, &choices));
        prop_assert!(best <= root.duration_ns());
    }
}

// ---- pipeline closure ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn simulated_runs_reconstruct_exactly(
        which in 0usize..3,
        n in 1usize..25,
        mean_ms in 0.0f64..3.0,
        stddev_ms in 0.0f64..2.0,
        seed in any::<u64>(),
        noisy in any::<bool>(),
    ) {
        let (_, topo) = scenarios::all().into_iter().nth(which).unwrap();
        let wl = Workload::for_topology(&topo, n, mean_ms * 1e6, stddev_ms * 1e6, seed);
        let noise = if noisy { Noise::decoys() } else { Noise::default() };
        let out = simulate(&topo, &wl, &noise).unwrap();
        let merged = out.merged_with_origins().into_iter().map(|(_, e)| e);
        let rec = reconstruct(merged, ReconstructorConfig::default()).unwrap();
        prop_assert!(rec.orphans.is_empty(), "{:?}", rec.orphans);
        let report = compare(&rec.forest, &out.ground_truth);
        prop_assert!(report.is_exact(), "{:?}", report);
    }
}
