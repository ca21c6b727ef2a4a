//! Read-only analyses over a span tree: exclusive-time attribution, latency
//! breakdown, critical path and service graph.

use std::collections::{BTreeMap, BTreeSet};

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::span::{SpanForest, SpanKind, SpanNode};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("span tree rooted at {service} {operation} is incomplete")]
    IncompleteSpan { service: String, operation: String },
}

fn require_complete(root: &SpanNode) -> Result<(), AnalysisError> {
    if root.fully_complete() {
        Ok(())
    } else {
        Err(AnalysisError::IncompleteSpan {
            service: root.service.clone(),
            operation: root.operation.clone(),
        })
    }
}

/// A span together with the part of its window that no child claimed.
#[derive(Debug)]
pub struct Exclusive<'a> {
    pub span: &'a SpanNode,
    /// Window the span was given, clipped to its parent.
    pub window: (i64, i64),
    pub self_ns: i64,
    pub children: Vec<Exclusive<'a>>,
}

/// Splits the root's duration over the tree so every nanosecond belongs to
/// exactly one span. Children are clipped to their parent's window; where
/// siblings overlap, the earlier one keeps the shared time. A parent's self
/// time is its window minus the union of its children.
pub fn exclusive_times(root: &SpanNode) -> Exclusive<'_> {
    attribute(root, root.start_ns, root.end_ns.max(root.start_ns))
}

fn attribute(span: &SpanNode, lo: i64, hi: i64) -> Exclusive<'_> {
    let mut order: Vec<&SpanNode> = span.children.iter().collect();
    order.sort_by_key(|c| c.start_ns);
    let mut cursor = lo;
    let mut given = 0;
    let mut children = Vec::with_capacity(order.len());
    for child in order {
        let cs = child.start_ns.max(cursor).min(hi);
        let ce = child.end_ns.min(hi).max(cs);
        given += ce - cs;
        cursor = cursor.max(ce);
        children.push(attribute(child, cs, ce));
    }
    Exclusive {
        span,
        window: (lo, hi),
        self_ns: (hi - lo) - given,
        children,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LatencyBreakdown {
    pub service: String,
    pub operation: String,
    pub total_ns: i64,
    /// Self time of server (and redis) spans, per service.
    pub per_service: BTreeMap<String, i64>,
    /// Time spent in client spans outside any downstream server span.
    pub inter_service_ns: i64,
    /// Exclusive time of leaf spans, per operation.
    pub leaf_times: BTreeMap<String, i64>,
}

impl LatencyBreakdown {
    pub fn accounted_ns(&self) -> i64 {
        self.per_service.values().sum::<i64>() + self.inter_service_ns
    }
}

pub fn latency_breakdown(root: &SpanNode) -> Result<LatencyBreakdown, AnalysisError> {
    require_complete(root)?;
    let tree = exclusive_times(root);
    let mut out = LatencyBreakdown {
        service: root.service.clone(),
        operation: root.operation.clone(),
        total_ns: tree.window.1 - tree.window.0,
        per_service: BTreeMap::new(),
        inter_service_ns: 0,
        leaf_times: BTreeMap::new(),
    };
    fn visit(node: &Exclusive<'_>, out: &mut LatencyBreakdown) {
        match node.span.kind {
            SpanKind::Client => out.inter_service_ns += node.self_ns,
            SpanKind::Server | SpanKind::Redis => {
                *out.per_service.entry(node.span.service.clone()).or_default() += node.self_ns;
            }
        }
        if node.children.is_empty() {
            *out.leaf_times.entry(node.span.operation.clone()).or_default() += node.self_ns;
        }
        for child in &node.children {
            visit(child, out);
        }
    }
    visit(&tree, &mut out);
    Ok(out)
}

/// One hop of a critical path.
#[derive(Clone, Copy, Debug)]
pub struct PathStep<'a> {
    pub span: &'a SpanNode,
    pub exclusive_ns: i64,
}

/// Root-to-leaf chain with the largest summed exclusive time. Ties go to
/// the earlier-starting child.
pub fn critical_path(root: &SpanNode) -> Result<Vec<PathStep<'_>>, AnalysisError> {
    require_complete(root)?;
    let tree = exclusive_times(root);
    fn best<'a>(node: &Exclusive<'a>) -> (i64, Vec<PathStep<'a>>) {
        let mut chosen: Option<(i64, Vec<PathStep<'a>>)> = None;
        for child in &node.children {
            let candidate = best(child);
            if chosen.as_ref().is_none_or(|(w, _)| candidate.0 > *w) {
                chosen = Some(candidate);
            }
        }
        let (below, mut tail) = chosen.unwrap_or_default();
        let mut path = vec![PathStep {
            span: node.span,
            exclusive_ns: node.self_ns,
        }];
        path.append(&mut tail);
        (node.self_ns + below, path)
    }
    Ok(best(&tree).1)
}

pub fn path_weight(path: &[PathStep<'_>]) -> i64 {
    path.iter().map(|s| s.exclusive_ns).sum()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ServiceGraph {
    pub nodes: BTreeSet<String>,
    /// (caller, callee) → number of linked calls.
    pub edges: BTreeMap<(String, String), usize>,
}

impl Serialize for ServiceGraph {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Edge<'a> {
            caller: &'a str,
            callee: &'a str,
            count: usize,
        }
        let edges: Vec<Edge<'_>> = self
            .edges
            .iter()
            .map(|((caller, callee), &count)| Edge {
                caller,
                callee,
                count,
            })
            .collect();
        let mut st = s.serialize_struct("ServiceGraph", 2)?;
        st.serialize_field("nodes", &self.nodes)?;
        st.serialize_field("edges", &edges)?;
        st.end()
    }
}

/// Services seen as servers, and caller → callee counts over linked calls.
pub fn service_graph(forest: &SpanForest) -> ServiceGraph {
    let mut graph = ServiceGraph::default();
    for root in &forest.spans {
        root.walk(&mut |span, _| {
            if span.kind != SpanKind::Server {
                return;
            }
            graph.nodes.insert(span.service.clone());
            for call in span.children.iter().filter(|c| c.kind == SpanKind::Client) {
                for callee in call.children.iter().filter(|c| c.kind == SpanKind::Server) {
                    *graph
                        .edges
                        .entry((span.service.clone(), callee.service.clone()))
                        .or_default() += 1;
                }
            }
        });
    }
    graph
}

/// Breakdown and critical path of one root, as emitted by `stats`.
#[derive(Debug, Serialize)]
pub struct RequestStats {
    pub root: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<LatencyBreakdown>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub critical_path: Vec<CriticalHop>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct CriticalHop {
    pub service: String,
    pub operation: String,
    pub kind: SpanKind,
    pub exclusive_ns: i64,
}

#[derive(Debug, Serialize)]
pub struct ForestStats {
    pub requests: Vec<RequestStats>,
    pub graph: ServiceGraph,
}

pub fn forest_stats(forest: &SpanForest) -> ForestStats {
    let requests = forest
        .spans
        .iter()
        .enumerate()
        .map(|(root, span)| match (latency_breakdown(span), critical_path(span)) {
            (Ok(breakdown), Ok(path)) => RequestStats {
                root,
                breakdown: Some(breakdown),
                critical_path: path
                    .iter()
                    .map(|s| CriticalHop {
                        service: s.span.service.clone(),
                        operation: s.span.operation.clone(),
                        kind: s.span.kind,
                        exclusive_ns: s.exclusive_ns,
                    })
                    .collect(),
                error: None,
            },
            (Err(e), _) | (_, Err(e)) => RequestStats {
                root,
                breakdown: None,
                critical_path: Vec::new(),
                error: Some(e.to_string()),
            },
        })
        .collect();
    ForestStats {
        requests,
        graph: service_graph(forest),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(service: &str, kind: SpanKind, start: i64, end: i64, children: Vec<SpanNode>) -> SpanNode {
        SpanNode {
            service: service.into(),
            operation: format!("op-{service}"),
            kind,
            start_ns: start,
            end_ns: end,
            complete: true,
            sockid: None,
            children,
        }
    }

    fn server(service: &str, start: i64, end: i64, children: Vec<SpanNode>) -> SpanNode {
        span(service, SpanKind::Server, start, end, children)
    }

    fn client(service: &str, start: i64, end: i64, children: Vec<SpanNode>) -> SpanNode {
        span(service, SpanKind::Client, start, end, children)
    }

    /// gateway [0,100] -> client [10,90] -> user [20,80] -> client [30,60] -> db [35,50]
    fn three_levels() -> SpanNode {
        server(
            "gateway",
            0,
            100,
            vec![client(
                "gateway",
                10,
                90,
                vec![server(
                    "user",
                    20,
                    80,
                    vec![client("user", 30, 60, vec![server("db", 35, 50, vec![])])],
                )],
            )],
        )
    }

    #[test]
    fn single_span() {
        let root = server("svc", 5, 25, vec![]);
        let b = latency_breakdown(&root).unwrap();
        assert_eq!(b.per_service, BTreeMap::from([("svc".to_string(), 20)]));
        assert_eq!(b.inter_service_ns, 0);
        assert_eq!(b.total_ns, 20);
    }

    #[test]
    fn three_level_hand_computation() {
        let b = latency_breakdown(&three_levels()).unwrap();
        // gateway 100 - 80 = 20; user 60 - 30 = 30; db 15
        // gateway client 80 - 60 = 20; user client 30 - 15 = 15
        assert_eq!(b.per_service["gateway"], 20);
        assert_eq!(b.per_service["user"], 30);
        assert_eq!(b.per_service["db"], 15);
        assert_eq!(b.inter_service_ns, 35);
        assert_eq!(b.total_ns, 100);
        assert_eq!(b.accounted_ns(), b.total_ns);
        assert_eq!(b.leaf_times["op-db"], 15);
    }

    #[test]
    fn overlapping_children_use_union() {
        let root = server(
            "p",
            0,
            100,
            vec![server("a", 10, 50, vec![]), server("b", 30, 70, vec![])],
        );
        let tree = exclusive_times(&root);
        assert_eq!(tree.self_ns, 100 - 60);
        assert_eq!(tree.children[0].self_ns, 40);
        assert_eq!(tree.children[1].self_ns, 20);
        let b = latency_breakdown(&root).unwrap();
        assert_eq!(b.accounted_ns(), 100);
    }

    #[test]
    fn children_escaping_the_parent_are_clipped() {
        let root = server("p", 0, 10, vec![server("c", 5, 20, vec![])]);
        let b = latency_breakdown(&root).unwrap();
        assert_eq!(b.per_service["p"], 5);
        assert_eq!(b.per_service["c"], 5);
        assert_eq!(b.accounted_ns(), 10);
    }

    #[test]
    fn incomplete_tree_is_rejected() {
        let mut root = three_levels();
        root.children[0].children[0].complete = false;
        assert!(matches!(
            latency_breakdown(&root),
            Err(AnalysisError::IncompleteSpan { .. })
        ));
        assert!(critical_path(&root).is_err());
    }

    #[test]
    fn critical_path_of_linear_chain_is_whole_chain() {
        let root = three_levels();
        let path = critical_path(&root).unwrap();
        let services: Vec<_> = path.iter().map(|s| (s.span.service.as_str(), s.span.kind)).collect();
        assert_eq!(services.len(), root.count());
        assert_eq!(path_weight(&path), 100);
    }

    #[test]
    fn critical_path_takes_heavier_child() {
        let ms = 1_000_000;
        let root = server(
            "p",
            0,
            20 * ms,
            vec![server("five", ms, 6 * ms, vec![]), server("seven", 7 * ms, 14 * ms, vec![])],
        );
        let path = critical_path(&root).unwrap();
        assert_eq!(path[1].span.service, "seven");
    }

    #[test]
    fn critical_path_ties_go_to_earlier_child() {
        let root = server(
            "p",
            0,
            100,
            vec![server("first", 10, 20, vec![]), server("second", 30, 40, vec![])],
        );
        assert_eq!(critical_path(&root).unwrap()[1].span.service, "first");
    }

    #[test]
    fn graph_counts_linked_calls() {
        let forest = SpanForest {
            spans: vec![three_levels(), three_levels()],
        };
        let graph = service_graph(&forest);
        assert_eq!(
            graph.nodes,
            BTreeSet::from(["db".to_string(), "gateway".to_string(), "user".to_string()])
        );
        assert_eq!(graph.edges[&("gateway".to_string(), "user".to_string())], 2);
        assert_eq!(graph.edges[&("user".to_string(), "db".to_string())], 2);
        assert_eq!(graph.edges.len(), 2);
        assert_eq!(service_graph(&SpanForest::default()), ServiceGraph::default());
    }

    #[test]
    fn stats_report_errors_per_root() {
        let mut broken = three_levels();
        broken.complete = false;
        let stats = forest_stats(&SpanForest {
            spans: vec![three_levels(), broken],
        });
        assert!(stats.requests[0].breakdown.is_some());
        assert!(stats.requests[1].error.is_some());
    }
}
