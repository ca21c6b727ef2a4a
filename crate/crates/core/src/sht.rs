//! State history tree: an interval store keyed by hierarchical attribute
//! paths.
//!
//! Writers call [`HistoryTree::set_attribute`] while consuming a trace; each
//! call seals the previous value of the attribute into a closed interval
//! `[prev_start, t - 1]`. [`HistoryTree::close_history`] seals whatever is
//! still ongoing and lays every interval out in a balanced tree whose nodes
//! partition time. A point query walks one root-to-leaf path, so it visits
//! exactly `depth()` nodes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

pub const SEPARATOR: char = '/';

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ShtError {
    #[error("invalid attribute path `{0}`")]
    InvalidPath(String),
    #[error("time {t} is earlier than {latest} for {}", attr.as_ref().map(|a| a.to_string()).unwrap_or_else(|| "the tree".into()))]
    BackwardsTime {
        attr: Option<AttributePath>,
        t: i64,
        latest: i64,
    },
    #[error("history is closed")]
    Closed,
    #[error("history is not closed yet")]
    NotClosed,
    #[error("time {t} outside [{start}, {end}]")]
    OutOfRange { t: i64, start: i64, end: i64 },
    #[error("unknown attribute {0}")]
    UnknownAttribute(AttributePath),
}

/// Hierarchical attribute name such as `/requests/gateway/12/state`.
///
/// Ordering is segment-wise lexicographic, which keeps every subtree
/// contiguous in sorted order.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AttributePath(String);

impl AttributePath {
    pub fn new<I, S>(segments: I) -> Result<Self, ShtError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut path = String::new();
        for seg in segments {
            let seg = seg.as_ref();
            if seg.is_empty() || seg.contains(SEPARATOR) {
                return Err(ShtError::InvalidPath(format!("{path}/{seg}")));
            }
            path.push(SEPARATOR);
            path.push_str(seg);
        }
        if path.is_empty() {
            return Err(ShtError::InvalidPath(path));
        }
        Ok(AttributePath(path))
    }

    /// Parses `/a/b` (the leading separator is optional).
    pub fn parse(text: &str) -> Result<Self, ShtError> {
        let trimmed = text.strip_prefix(SEPARATOR).unwrap_or(text);
        if trimmed.is_empty() {
            return Err(ShtError::InvalidPath(text.to_string()));
        }
        Self::new(trimmed.split(SEPARATOR)).map_err(|_| ShtError::InvalidPath(text.to_string()))
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0[1..].split(SEPARATOR)
    }

    pub fn child(&self, segment: impl fmt::Display) -> Result<Self, ShtError> {
        let segment = segment.to_string();
        if segment.is_empty() || segment.contains(SEPARATOR) {
            return Err(ShtError::InvalidPath(format!("{}/{segment}", self.0)));
        }
        Ok(AttributePath(format!("{}{SEPARATOR}{segment}", self.0)))
    }

    /// True when `prefix` is a proper or improper segment prefix of `self`.
    pub fn starts_with(&self, prefix: &AttributePath) -> bool {
        self.0 == prefix.0
            || (self.0.starts_with(&prefix.0)
                && self.0.as_bytes()[prefix.0.len()] == SEPARATOR as u8)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Ord for AttributePath {
    fn cmp(&self, other: &Self) -> Ordering {
        self.segments().cmp(other.segments())
    }
}

impl PartialOrd for AttributePath {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for AttributePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for AttributePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AttributePath({})", self.0)
    }
}

impl TryFrom<String> for AttributePath {
    type Error = ShtError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        AttributePath::parse(&value)
    }
}

impl From<AttributePath> for String {
    fn from(p: AttributePath) -> String {
        p.0
    }
}

/// Scalar state value. Setting `Null` clears an attribute: the previous
/// value is sealed and nothing new opens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Text(String),
    Null,
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

/// A sealed state: `attr` held `value` over the closed range `[start_ns, end_ns]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub attr: AttributePath,
    #[serde(rename = "start")]
    pub start_ns: i64,
    #[serde(rename = "end")]
    pub end_ns: i64,
    pub value: Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeConfig {
    /// Maximum number of intervals stored in a leaf node.
    pub node_capacity: usize,
    /// Maximum number of children of a core node.
    pub fanout: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            node_capacity: 64,
            fanout: 16,
        }
    }
}

type Quark = u32;
type NodeId = u32;

#[derive(Clone, Debug)]
struct StoredInterval {
    start: i64,
    end: i64,
    quark: Quark,
    value: Value,
}

#[derive(Clone, Debug)]
struct Node {
    start: i64,
    end: i64,
    children: Vec<NodeId>,
    /// Sorted by start.
    intervals: Vec<StoredInterval>,
}

impl Node {
    fn empty(start: i64) -> Self {
        Node {
            start,
            end: start,
            children: Vec::new(),
            intervals: Vec::new(),
        }
    }

    fn contains(&self, start: i64, end: i64) -> bool {
        self.start <= start && end <= self.end
    }
}

/// Counters returned by [`HistoryTree::query_at_with_stats`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub nodes_visited: usize,
}

#[derive(Debug, Default)]
pub struct HistoryTree {
    config: TreeConfig,
    attrs: HashMap<AttributePath, Quark>,
    paths: Vec<AttributePath>,
    ongoing: Vec<Option<(i64, Value)>>,
    pending: Vec<StoredInterval>,
    earliest: i64,
    current_end: i64,
    closed: bool,
    nodes: Vec<Node>,
    depth: usize,
    history: Vec<Vec<(NodeId, u32)>>,
}

impl HistoryTree {
    pub fn new() -> Self {
        Self::with_config(TreeConfig::default())
    }

    pub fn with_config(config: TreeConfig) -> Self {
        assert!(config.node_capacity >= 1, "node capacity must be positive");
        assert!(config.fanout >= 2, "fanout must be at least 2");
        HistoryTree {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> TreeConfig {
        self.config
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Latest timestamp written so far.
    pub fn current_end(&self) -> i64 {
        self.current_end
    }

    fn quark(&mut self, attr: &AttributePath) -> Quark {
        if let Some(&q) = self.attrs.get(attr) {
            return q;
        }
        let q = self.paths.len() as Quark;
        self.attrs.insert(attr.clone(), q);
        self.paths.push(attr.clone());
        self.ongoing.push(None);
        q
    }

    /// Opens a new state for `attr` at `t`, sealing the previous one at `t - 1`.
    ///
    /// Writing twice at the same instant replaces the ongoing value without
    /// producing an empty interval.
    pub fn set_attribute(
        &mut self,
        t: i64,
        attr: &AttributePath,
        value: impl Into<Value>,
    ) -> Result<(), ShtError> {
        if self.closed {
            return Err(ShtError::Closed);
        }
        let value = value.into();
        let q = self.quark(attr);
        if let Some((start, _)) = &self.ongoing[q as usize] {
            if t < *start {
                return Err(ShtError::BackwardsTime {
                    attr: Some(attr.clone()),
                    t,
                    latest: *start,
                });
            }
        }
        let previous = self.ongoing[q as usize].take();
        if let Some((start, prev)) = previous {
            if t > start {
                self.pending.push(StoredInterval {
                    start,
                    end: t - 1,
                    quark: q,
                    value: prev,
                });
            }
        }
        if value != Value::Null {
            self.ongoing[q as usize] = Some((t, value));
        }
        self.earliest = self.earliest.min(t);
        self.current_end = self.current_end.max(t);
        Ok(())
    }

    /// Seals every ongoing state at `t_end` and builds the tree. A second
    /// call is a no-op.
    pub fn close_history(&mut self, t_end: i64) -> Result<(), ShtError> {
        if self.closed {
            return Ok(());
        }
        if t_end < self.current_end {
            return Err(ShtError::BackwardsTime {
                attr: None,
                t: t_end,
                latest: self.current_end,
            });
        }
        for (q, slot) in self.ongoing.iter_mut().enumerate() {
            if let Some((start, value)) = slot.take() {
                self.pending.push(StoredInterval {
                    start,
                    end: t_end,
                    quark: q as Quark,
                    value,
                });
            }
        }
        self.current_end = t_end;
        self.build();
        self.closed = true;
        Ok(())
    }

    fn build(&mut self) {
        let tree_start = self.earliest.min(0);
        let tree_end = self.current_end;
        let mut pending = std::mem::take(&mut self.pending);
        pending.sort_by_key(|iv| (iv.end, iv.start, iv.quark));

        // Leaves take intervals in end order until full; an interval that
        // starts before the open leaf has to live higher up.
        let mut level: Vec<Node> = Vec::new();
        let mut deferred: Vec<StoredInterval> = Vec::new();
        let mut leaf = Node::empty(tree_start);
        for iv in pending {
            if iv.start >= leaf.start {
                let end = iv.end;
                leaf.intervals.push(iv);
                if leaf.intervals.len() == self.config.node_capacity {
                    leaf.end = end;
                    level.push(std::mem::replace(&mut leaf, Node::empty(end + 1)));
                }
            } else {
                deferred.push(iv);
            }
        }
        if level.is_empty() || leaf.start <= tree_end {
            leaf.end = tree_end.max(leaf.start);
            level.push(leaf);
        }
        if let Some(last) = level.last_mut() {
            last.end = last.end.max(tree_end);
        }

        let mut nodes: Vec<Node> = Vec::new();
        let mut level_ids: Vec<NodeId>;
        let mut depth = 1;
        loop {
            if !deferred.is_empty() && depth > 1 {
                deferred = place(&mut level, deferred);
            }
            let base = nodes.len() as NodeId;
            level_ids = (base..base + level.len() as NodeId).collect();
            // A lone full leaf cannot take deferred intervals: grow a root above it.
            if level.len() == 1 && (depth > 1 || deferred.is_empty()) {
                let root = &mut level[0];
                root.intervals.append(&mut deferred);
                nodes.append(&mut level);
                break;
            }
            let mut parents: Vec<Node> = level_ids
                .chunks(self.config.fanout)
                .map(|chunk| {
                    let first = &level[(chunk[0] - base) as usize];
                    let last = &level[(chunk[chunk.len() - 1] - base) as usize];
                    Node {
                        start: first.start,
                        end: last.end,
                        children: chunk.to_vec(),
                        intervals: Vec::new(),
                    }
                })
                .collect();
            nodes.append(&mut level);
            std::mem::swap(&mut level, &mut parents);
            depth += 1;
        }
        for node in &mut nodes {
            node.intervals.sort_by_key(|iv| (iv.start, iv.end, iv.quark));
        }

        let mut history = vec![Vec::new(); self.paths.len()];
        for (id, node) in nodes.iter().enumerate() {
            for (slot, iv) in node.intervals.iter().enumerate() {
                history[iv.quark as usize].push((id as NodeId, slot as u32));
            }
        }
        for locs in &mut history {
            locs.sort_by_key(|&(n, s)| nodes[n as usize].intervals[s as usize].start);
        }
        self.nodes = nodes;
        self.depth = depth;
        self.history = history;
    }

    fn root(&self) -> Option<&Node> {
        self.nodes.last()
    }

    /// Time range covered by the closed tree.
    pub fn span(&self) -> Option<(i64, i64)> {
        self.root().map(|r| (r.start, r.end))
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn interval_count(&self) -> usize {
        self.nodes.iter().map(|n| n.intervals.len()).sum()
    }

    pub fn query_at(&self, t: i64) -> Result<BTreeMap<AttributePath, Value>, ShtError> {
        self.query_at_with_stats(t).map(|(values, _)| values)
    }

    pub fn query_at_with_stats(
        &self,
        t: i64,
    ) -> Result<(BTreeMap<AttributePath, Value>, QueryStats), ShtError> {
        if !self.closed {
            return Err(ShtError::NotClosed);
        }
        let root = self.root().expect("closed tree has a root");
        if t < root.start || t > root.end {
            return Err(ShtError::OutOfRange {
                t,
                start: root.start,
                end: root.end,
            });
        }
        let mut values = BTreeMap::new();
        let mut stats = QueryStats::default();
        let mut node = root;
        loop {
            stats.nodes_visited += 1;
            let upto = node.intervals.partition_point(|iv| iv.start <= t);
            for iv in &node.intervals[..upto] {
                if iv.end >= t {
                    values.insert(self.paths[iv.quark as usize].clone(), iv.value.clone());
                }
            }
            if node.children.is_empty() {
                break;
            }
            let idx = node
                .children
                .partition_point(|&c| self.nodes[c as usize].start <= t)
                .saturating_sub(1);
            node = &self.nodes[node.children[idx] as usize];
        }
        Ok((values, stats))
    }

    /// Every sealed interval of `attr`, ordered by start.
    pub fn query_history(&self, attr: &AttributePath) -> Result<Vec<Interval>, ShtError> {
        if !self.closed {
            return Err(ShtError::NotClosed);
        }
        let q = *self
            .attrs
            .get(attr)
            .ok_or_else(|| ShtError::UnknownAttribute(attr.clone()))?;
        let locs = &self.history[q as usize];
        if locs.is_empty() {
            return Err(ShtError::UnknownAttribute(attr.clone()));
        }
        Ok(locs
            .iter()
            .map(|&(n, s)| {
                let iv = &self.nodes[n as usize].intervals[s as usize];
                Interval {
                    attr: attr.clone(),
                    start_ns: iv.start,
                    end_ns: iv.end,
                    value: iv.value.clone(),
                }
            })
            .collect())
    }

    /// Attribute paths under `prefix` (including `prefix` itself), sorted.
    pub fn subtree(&self, prefix: &AttributePath) -> Vec<AttributePath> {
        let mut out: Vec<AttributePath> = self.paths.iter().filter(|p| p.starts_with(prefix)).cloned().collect();
        out.sort();
        out
    }

    /// All sealed intervals ordered by attribute then start.
    pub fn intervals(&self) -> Vec<Interval> {
        let mut out = Vec::with_capacity(self.interval_count());
        let mut order: Vec<(&AttributePath, Quark)> = self.attrs.iter().map(|(p, &q)| (p, q)).collect();
        order.sort();
        for (attr, q) in order {
            for &(n, s) in self.history.get(q as usize).map(Vec::as_slice).unwrap_or(&[]) {
                let iv = &self.nodes[n as usize].intervals[s as usize];
                out.push(Interval {
                    attr: attr.clone(),
                    start_ns: iv.start,
                    end_ns: iv.end,
                    value: iv.value.clone(),
                });
            }
        }
        out
    }

    /// Writes every sealed interval as one JSON object per line.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for iv in self.intervals() {
            serde_json::to_writer(&mut out, &iv)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    /// Walks the closed tree and checks its structural invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.closed {
            return Err("tree not closed".into());
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.start > node.end {
                return Err(format!("node {id} has inverted span"));
            }
            if node.children.is_empty() && node.intervals.len() > self.config.node_capacity {
                return Err(format!("leaf {id} exceeds capacity"));
            }
            if node.children.len() > self.config.fanout {
                return Err(format!("node {id} exceeds fanout"));
            }
            for iv in &node.intervals {
                if iv.start > iv.end || !node.contains(iv.start, iv.end) {
                    return Err(format!(
                        "interval [{}, {}] escapes node {id} [{}, {}]",
                        iv.start, iv.end, node.start, node.end
                    ));
                }
            }
            if let (Some(&first), Some(&last)) = (node.children.first(), node.children.last()) {
                if self.nodes[first as usize].start != node.start
                    || self.nodes[last as usize].end != node.end
                {
                    return Err(format!("children of node {id} do not cover it"));
                }
                for pair in node.children.windows(2) {
                    let (a, b) = (&self.nodes[pair[0] as usize], &self.nodes[pair[1] as usize]);
                    if a.end.checked_add(1) != Some(b.start) {
                        return Err(format!("children of node {id} overlap or leave a gap"));
                    }
                }
            }
        }
        for (q, locs) in self.history.iter().enumerate() {
            let mut prev_end: Option<i64> = None;
            for &(n, s) in locs {
                let iv = &self.nodes[n as usize].intervals[s as usize];
                if prev_end.is_some_and(|e| iv.start <= e) {
                    return Err(format!("overlapping intervals for {}", self.paths[q]));
                }
                prev_end = Some(iv.end);
            }
        }
        let bound = log_ceil(self.node_count(), self.config.fanout) + 1;
        if self.depth > bound {
            return Err(format!("depth {} exceeds bound {bound}", self.depth));
        }
        Ok(())
    }
}

/// Smallest `k` with `base^k >= n` (0 for `n <= 1`).
pub fn log_ceil(n: usize, base: usize) -> usize {
    let mut k = 0;
    let mut reach = 1usize;
    while reach < n {
        reach = reach.saturating_mul(base);
        k += 1;
    }
    k
}

fn place(level: &mut [Node], intervals: Vec<StoredInterval>) -> Vec<StoredInterval> {
    let mut still = Vec::new();
    for iv in intervals {
        let idx = level.partition_point(|n| n.start <= iv.start).saturating_sub(1);
        if level[idx].contains(iv.start, iv.end) {
            level[idx].intervals.push(iv);
        } else {
            still.push(iv);
        }
    }
    still
}
