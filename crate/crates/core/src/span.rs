//! Reconstructed span hierarchy and its JSON document form.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Server,
    Client,
    Redis,
}

impl fmt::Display for SpanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpanKind::Server => "server",
            SpanKind::Client => "client",
            SpanKind::Redis => "redis",
        })
    }
}

/// One unit of work on one service. Server spans hold the client spans of
/// their outgoing calls (and redis leaves); a client span holds the
/// downstream server span it was linked to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanNode {
    pub service: String,
    pub operation: String,
    pub kind: SpanKind,
    pub start_ns: i64,
    pub end_ns: i64,
    pub complete: bool,
    /// Socket the span was correlated on; absent for redis leaves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sockid: Option<i64>,
    #[serde(default)]
    pub children: Vec<SpanNode>,
}

impl SpanNode {
    pub fn duration_ns(&self) -> i64 {
        self.end_ns - self.start_ns
    }

    /// Number of spans in this subtree, including `self`.
    pub fn count(&self) -> usize {
        1 + self.children.iter().map(SpanNode::count).sum::<usize>()
    }

    /// Pre-order walk with depth.
    pub fn walk<'a>(&'a self, visit: &mut impl FnMut(&'a SpanNode, usize)) {
        fn go<'a>(node: &'a SpanNode, depth: usize, visit: &mut impl FnMut(&'a SpanNode, usize)) {
            visit(node, depth);
            for child in &node.children {
                go(child, depth + 1, visit);
            }
        }
        go(self, 0, visit);
    }

    /// True when every span of the subtree is complete.
    pub fn fully_complete(&self) -> bool {
        self.complete && self.children.iter().all(SpanNode::fully_complete)
    }
}

/// Top-level `{"spans": [...]}` document.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanForest {
    pub spans: Vec<SpanNode>,
}

impl SpanForest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("forest serialization is infallible")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
