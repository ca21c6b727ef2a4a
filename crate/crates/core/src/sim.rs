//! Discrete-event microservice simulator. Produces per-service trace files
//! with the runtime's async-id chains, plus the ground-truth span tree of
//! every request.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fs;
use std::io;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::event::{
    self, AsyncContextPayload, HttpPayload, Payload, RedisCommandPayload, TraceEvent, TraceHeader,
};
use crate::reconstruct::REDIS_SERVICE;
use crate::span::SpanKind;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Decoy async ids live at or above this value; real ids never reach it.
pub const DECOY_ID_BASE: i64 = (1 << 40) + 1;

const CHAIN_KINDS: [&str; 5] = [
    "after",
    "constructor",
    "TCPWRAP",
    "GETADDRINFOREQWRAP",
    "HTTPCLIENTREQUEST",
];

#[derive(Debug, thiserror::Error)]
pub enum TopologyError {
    #[error("service {from} forwards to unknown service {to}")]
    UnresolvedService { from: String, to: String },
    #[error("forwarding cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("malformed topology: {0}")]
    MalformedTopology(String),
    #[error("cannot read topology {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("invalid workload: {0}")]
    InvalidWorkload(String),
    #[error("skew {skew_ns}ns on {service} pushes local time below zero")]
    NegativeLocalTime { service: String, skew_ns: i64 },
    #[error("skew given for unknown service {0}")]
    UnknownSkewService(String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Delay distribution, in nanoseconds. Samples are truncated at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Const { value_ns: i64 },
    Uniform { lo_ns: i64, hi_ns: i64 },
    Normal { mean_ns: i64, stddev_ns: i64 },
}

impl Default for Dist {
    fn default() -> Self {
        Dist::Const { value_ns: 0 }
    }
}

impl Dist {
    pub fn constant(value_ns: i64) -> Self {
        Dist::Const { value_ns }
    }

    fn validate(&self, what: &str) -> Result<(), TopologyError> {
        let ok = match *self {
            Dist::Const { value_ns } => value_ns >= 0,
            Dist::Uniform { lo_ns, hi_ns } => 0 <= lo_ns && lo_ns <= hi_ns,
            Dist::Normal { mean_ns, stddev_ns } => mean_ns >= 0 && stddev_ns >= 0,
        };
        if ok {
            Ok(())
        } else {
            Err(TopologyError::MalformedTopology(format!("{what}: invalid distribution {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> i64 {
        match *self {
            Dist::Const { value_ns } => value_ns,
            Dist::Uniform { lo_ns, hi_ns } => rng.random_range(lo_ns..=hi_ns),
            Dist::Normal { mean_ns, stddev_ns } => gaussian(rng, mean_ns as f64, stddev_ns as f64),
        }
    }
}

fn gaussian(rng: &mut impl Rng, mean: f64, stddev: f64) -> i64 {
    if stddev == 0.0 {
        return mean.max(0.0).round() as i64;
    }
    let normal = Normal::new(mean, stddev).expect("stddev checked non-negative");
    normal.sample(rng).max(0.0).round() as i64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Handler {
    /// Does `pre` work, calls `downstream`, then does `post` work.
    Forward {
        downstream: String,
        #[serde(default)]
        pre: Dist,
        #[serde(default)]
        post: Dist,
    },
    Terminal {
        #[serde(default)]
        service_time: Dist,
    },
    /// Answers from a redis store: one command per request.
    Redis {
        cmd: String,
        /// `{i}` is replaced by the request index.
        #[serde(default)]
        key: String,
        duration_us: i64,
        #[serde(default)]
        pre: Dist,
        #[serde(default)]
        post: Dist,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceDef {
    pub name: String,
    pub addr: String,
    pub port: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    pub handler: Handler,
}

impl ServiceDef {
    pub fn host(&self) -> &str {
        self.host.as_deref().unwrap_or(&self.name)
    }
}

/// Request shape used when the caller does not override it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestShape {
    pub method: String,
    pub url_template: String,
}

impl Default for RequestShape {
    fn default() -> Self {
        RequestShape {
            method: "GET".into(),
            url_template: "/users/{i}".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub services: Vec<ServiceDef>,
    /// Service receiving external requests; the first one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<String>,
    /// One-way delay of every network leg.
    #[serde(default)]
    pub network_latency: Dist,
    #[serde(default)]
    pub request: RequestShape,
}

impl Topology {
    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        let topo: Topology =
            serde_json::from_str(text).map_err(|e| TopologyError::MalformedTopology(e.to_string()))?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serialization is infallible")
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let bad = |m: String| Err(TopologyError::MalformedTopology(m));
        if self.services.is_empty() {
            return bad("no services".into());
        }
        let mut seen = HashMap::new();
        for (i, s) in self.services.iter().enumerate() {
            if s.name.is_empty()
                || s.name == REDIS_SERVICE
                || s.name.starts_with('.')
                || s.name.contains(['/', '\\'])
            {
                return bad(format!("unusable service name {:?}", s.name));
            }
            if seen.insert(s.name.as_str(), i).is_some() {
                return bad(format!("duplicate service {}", s.name));
            }
            if s.addr.parse::<Ipv4Addr>().is_err() {
                return bad(format!("{}: bad address {:?}", s.name, s.addr));
            }
            if !(1..=65535).contains(&s.port) {
                return bad(format!("{}: bad port {}", s.name, s.port));
            }
            match &s.handler {
                Handler::Forward { pre, post, .. } => {
                    pre.validate(&s.name)?;
                    post.validate(&s.name)?;
                }
                Handler::Terminal { service_time } => service_time.validate(&s.name)?,
                Handler::Redis {
                    cmd,
                    duration_us,
                    pre,
                    post,
                    ..
                } => {
                    if cmd.is_empty() || *duration_us < 0 {
                        return bad(format!("{}: bad redis command", s.name));
                    }
                    pre.validate(&s.name)?;
                    post.validate(&s.name)?;
                }
            }
        }
        self.network_latency.validate("network_latency")?;
        if self.request.method.is_empty() || !self.request.url_template.starts_with('/') {
            return bad("request needs a method and an absolute url template".into());
        }
        if let Some(entry) = &self.entry {
            if !seen.contains_key(entry.as_str()) {
                return bad(format!("entry service {entry} not defined"));
            }
        }
        for s in &self.services {
            if let Handler::Forward { downstream, .. } = &s.handler {
                if !seen.contains_key(downstream.as_str()) {
                    return Err(TopologyError::UnresolvedService {
                        from: s.name.clone(),
                        to: downstream.clone(),
                    });
                }
            }
        }
        // Every service has at most one downstream, so a cycle shows up as a
        // revisit while following the chain.
        for start in 0..self.services.len() {
            let mut path = vec![start];
            let mut at = start;
            while let Handler::Forward { downstream, .. } = &self.services[at].handler {
                at = seen[downstream.as_str()];
                if let Some(pos) = path.iter().position(|&p| p == at) {
                    let mut names: Vec<String> =
                        path[pos..].iter().map(|&p| self.services[p].name.clone()).collect();
                    names.push(self.services[at].name.clone());
                    return Err(TopologyError::CycleDetected(names));
                }
                path.push(at);
            }
        }
        Ok(())
    }

    pub fn entry_index(&self) -> usize {
        self.entry
            .as_ref()
            .and_then(|e| self.services.iter().position(|s| &s.name == e))
            .unwrap_or(0)
    }

    fn index_of(&self, name: &str) -> usize {
        self.services
            .iter()
            .position(|s| s.name == name)
            .expect("validated topology")
    }

    /// Nodes a request visits from the entry, ending with the redis store
    /// when the last service talks to one.
    pub fn chain(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut at = self.entry_index();
        loop {
            out.push(self.services[at].name.clone());
            match &self.services[at].handler {
                Handler::Forward { downstream, .. } => at = self.index_of(downstream),
                Handler::Redis { .. } => {
                    out.push(REDIS_SERVICE.to_string());
                    break;
                }
                Handler::Terminal { .. } => break,
            }
        }
        out
    }
}

pub fn load_topology(path: impl AsRef<Path>) -> Result<Topology, TopologyError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TopologyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Topology::from_json(&text)
}

/// Built-in topologies matching the files under `topologies/`.
pub mod scenarios {
    use super::Topology;

    pub const USE_CASE_1: &str = include_str!("../../../topologies/use-case-1.json");
    pub const USE_CASE_2: &str = include_str!("../../../topologies/use-case-2.json");
    pub const USE_CASE_3: &str = include_str!("../../../topologies/use-case-3.json");

    /// gateway -> user -> redis-gateway (GET).
    pub fn use_case_1() -> Topology {
        Topology::from_json(USE_CASE_1).expect("bundled topology is valid")
    }

    /// gateway -> orders (POST), no redis.
    pub fn use_case_2() -> Topology {
        Topology::from_json(USE_CASE_2).expect("bundled topology is valid")
    }

    /// gateway -> auth -> user-proxy -> user -> redis-gateway, fixed timings.
    pub fn use_case_3() -> Topology {
        Topology::from_json(USE_CASE_3).expect("bundled topology is valid")
    }

    pub fn all() -> [(&'static str, Topology); 3] {
        [
            ("use-case-1", use_case_1()),
            ("use-case-2", use_case_2()),
            ("use-case-3", use_case_3()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    pub n_requests: usize,
    pub mean_ns: f64,
    pub stddev_ns: f64,
    pub method: String,
    pub url_template: String,
    pub seed: u64,
}

impl Workload {
    /// Workload using the topology's default request shape.
    pub fn for_topology(topo: &Topology, n_requests: usize, mean_ns: f64, stddev_ns: f64, seed: u64) -> Self {
        Workload {
            n_requests,
            mean_ns,
            stddev_ns,
            method: topo.request.method.clone(),
            url_template: topo.request.url_template.clone(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidWorkload(m.to_string()));
        if self.n_requests < 1 {
            return bad("at least one request is required");
        }
        if !(self.stddev_ns >= 0.0 && self.stddev_ns.is_finite()) {
            return bad("stddev must be finite and non-negative");
        }
        if !self.mean_ns.is_finite() {
            return bad("mean must be finite");
        }
        if self.method.is_empty() || !self.url_template.starts_with('/') {
            return bad("method must be non-empty and the url absolute");
        }
        Ok(())
    }

    pub fn url(&self, i: usize) -> String {
        self.url_template.replace("{i}", &i.to_string())
    }
}

/// Modelled runtime noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    /// Each allocation skips a uniform 0..=max_gap ids first.
    pub max_gap: i64,
    /// Probability of a decoy async record after each real one.
    pub decoy_rate: f64,
    /// Probability that an emitted event is lost.
    pub drop_rate: f64,
}

impl Default for Noise {
    fn default() -> Self {
        Noise {
            max_gap: 0,
            decoy_rate: 0.0,
            drop_rate: 0.0,
        }
    }
}

impl Noise {
    /// Allocator gaps plus decoy async records, no drops.
    pub fn decoys() -> Self {
        Noise {
            max_gap: 200,
            decoy_rate: 0.5,
            drop_rate: 0.0,
        }
    }
}

/// True span of one server call or redis command.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthSpan {
    pub service: String,
    pub kind: SpanKind,
    pub operation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sockid: Option<i64>,
    pub start_ns: i64,
    pub end_ns: i64,
    #[serde(default)]
    pub children: Vec<TruthSpan>,
}

impl TruthSpan {
    pub fn duration_ns(&self) -> i64 {
        self.end_ns - self.start_ns
    }

    pub fn count(&self) -> usize {
        1 + self.children.iter().map(TruthSpan::count).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRequest {
    pub root: TruthSpan,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub requests: Vec<TruthRequest>,
}

impl GroundTruth {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serialization is infallible")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Events recorded on one service, with the request each came from
/// (`None` for decoys).
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceTrace {
    pub service: String,
    pub host: String,
    pub events: Vec<TraceEvent>,
    pub origins: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub traces: Vec<ServiceTrace>,
    pub ground_truth: GroundTruth,
}

impl SimOutput {
    pub fn event_count(&self) -> usize {
        self.traces.iter().map(|t| t.events.len()).sum()
    }

    /// Every event in global time order, ties broken by service name then
    /// position, with its origin request.
    pub fn merged_with_origins(&self) -> Vec<(Option<usize>, TraceEvent)> {
        let mut all: Vec<(i64, &str, usize, Option<usize>, &TraceEvent)> = Vec::with_capacity(self.event_count());
        for t in &self.traces {
            for (pos, (ev, origin)) in t.events.iter().zip(&t.origins).enumerate() {
                all.push((ev.ts, &t.service, pos, *origin, ev));
            }
        }
        all.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        all.into_iter().map(|(_, _, _, o, ev)| (o, ev.clone())).collect()
    }

    /// Writes `<service>.trace` per service and the ground truth. `skew`
    /// shifts a service's local clock; its header then declares the
    /// compensating offset.
    pub fn write_experiment(&self, dir: &Path, skew: &BTreeMap<String, i64>) -> Result<(), SimError> {
        for name in skew.keys() {
            if !self.traces.iter().any(|t| &t.service == name) {
                return Err(SimError::UnknownSkewService(name.clone()));
            }
        }
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SimError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for t in &self.traces {
            let skew_ns = skew.get(&t.service).copied().unwrap_or(0);
            let mut events = t.events.clone();
            for ev in &mut events {
                ev.ts = ev
                    .ts
                    .checked_add(skew_ns)
                    .filter(|ts| *ts >= 0)
                    .ok_or_else(|| SimError::NegativeLocalTime {
                        service: t.service.clone(),
                        skew_ns,
                    })?;
            }
            let header = TraceHeader::new(&t.service, &t.host, -skew_ns);
            let path = dir.join(format!("{}.trace", t.service));
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            let mut w = io::BufWriter::new(file);
            event::write_trace(&mut w, &header, &events).map_err(io_err(&path))?;
            io::Write::flush(&mut w).map_err(io_err(&path))?;
        }
        let path = dir.join(GROUND_TRUTH_FILE);
        fs::write(&path, self.ground_truth.to_json()).map_err(io_err(&path))?;
        Ok(())
    }
}

/// Parses `svc=+3ms,other=-500us` into nanosecond skews. Units: ns, us, ms, s.
pub fn parse_skew(spec: &str) -> Result<BTreeMap<String, i64>, String> {
    let mut out = BTreeMap::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, amount) = part
            .split_once('=')
            .ok_or_else(|| format!("expected service=amount, got {part:?}"))?;
        let amount = amount.trim();
        let (digits, scale) = [("ns", 1), ("us", 1_000), ("ms", 1_000_000), ("s", 1_000_000_000)]
            .iter()
            .find_map(|(unit, scale)| amount.strip_suffix(unit).map(|d| (d, *scale)))
            .unwrap_or((amount, 1));
        let value: i64 = digits
            .trim_start_matches('+')
            .parse()
            .map_err(|_| format!("bad skew amount {amount:?}"))?;
        let ns = value.checked_mul(scale).ok_or_else(|| format!("skew {amount:?} overflows"))?;
        out.insert(name.trim().to_string(), ns);
    }
    Ok(out)
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth, SimError> {
    let path = dir.join(GROUND_TRUTH_FILE);
    let text = fs::read_to_string(&path).map_err(|source| SimError::Io {
        path: path.clone(),
        source,
    })?;
    GroundTruth::from_json(&text).map_err(|e| SimError::Io {
        path,
        source: io::Error::new(io::ErrorKind::InvalidData, e),
    })
}

// ---- engine ----

#[derive(Clone, Copy, Debug)]
enum Action {
    /// External request reaches the entry service.
    Inbound { request: usize },
    /// A call reaches service `svc` from `caller`'s frame.
    Arrive { caller: usize, svc: usize },
    /// Forwarding step `k` (1..=5) of a frame.
    Step { frame: usize, k: u8 },
    RedisCommand { frame: usize },
    /// The downstream answer is back at `frame`'s service.
    ClientResponse { frame: usize },
    Respond { frame: usize },
}

struct Frame {
    request: usize,
    svc: usize,
    sockid: i64,
    start: i64,
    end: i64,
    caller: Option<usize>,
    src_addr: String,
    src_port: i64,
    method: String,
    url: String,
    /// Per-step delays of the forwarding chain.
    pre: i64,
    post: i64,
    ids: [i64; 5],
    downstream: Option<usize>,
    redis: Option<(String, i64, i64)>,
}

struct Engine<'a> {
    topo: &'a Topology,
    wl: &'a Workload,
    noise: &'a Noise,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(i64, u64)>>,
    actions: Vec<Option<Action>>,
    frames: Vec<Frame>,
    next_id: Vec<i64>,
    next_decoy: i64,
    next_port: i64,
    /// Last arrival time on each directed edge, for FIFO delivery.
    edge_last: HashMap<(usize, usize, bool), i64>,
    redis_busy_until: Vec<i64>,
    traces: Vec<ServiceTrace>,
    roots: Vec<Option<usize>>,
}

/// Runs the workload through the topology on a virtual clock.
pub fn simulate(topo: &Topology, wl: &Workload, noise: &Noise) -> Result<SimOutput, SimError> {
    topo.validate()?;
    wl.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(wl.seed);
    let next_id = topo.services.iter().map(|_| rng.random_range(1_000..50_000)).collect();
    let traces = topo
        .services
        .iter()
        .map(|s| ServiceTrace {
            service: s.name.clone(),
            host: s.host().to_string(),
            events: Vec::new(),
            origins: Vec::new(),
        })
        .collect();
    let mut engine = Engine {
        topo,
        wl,
        noise,
        rng,
        queue: BinaryHeap::new(),
        actions: Vec::new(),
        frames: Vec::new(),
        next_id,
        next_decoy: DECOY_ID_BASE,
        next_port: 0,
        edge_last: HashMap::new(),
        redis_busy_until: vec![i64::MIN; topo.services.len()],
        traces,
        roots: vec![None; wl.n_requests],
    };
    let mut t = 0i64;
    for request in 0..wl.n_requests {
        if request > 0 {
            t += gaussian(&mut engine.rng, wl.mean_ns, wl.stddev_ns);
        }
        engine.schedule(t, Action::Inbound { request });
    }
    while let Some(Reverse((now, seq))) = engine.queue.pop() {
        let action = engine.actions[seq as usize].take().expect("each action runs once");
        engine.run(now, action);
    }
    let ground_truth = engine.ground_truth();
    let mut traces = engine.traces;
    if noise.drop_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(wl.seed ^ 0x5eed_d209);
        for t in &mut traces {
            let keep: Vec<bool> = t.events.iter().map(|_| !rng.random_bool(noise.drop_rate)).collect();
            let mut it = keep.iter();
            t.events.retain(|_| *it.next().expect("aligned"));
            let mut it = keep.iter();
            t.origins.retain(|_| *it.next().expect("aligned"));
        }
    }
    Ok(SimOutput { traces, ground_truth })
}

impl Engine<'_> {
    fn schedule(&mut self, at: i64, action: Action) {
        let seq = self.actions.len() as u64;
        self.actions.push(Some(action));
        self.queue.push(Reverse((at, seq)));
    }

    fn alloc(&mut self, svc: usize) -> i64 {
        let gap = if self.noise.max_gap > 0 {
            self.rng.random_range(0..=self.noise.max_gap)
        } else {
            0
        };
        let id = self.next_id[svc] + gap;
        self.next_id[svc] = id + 1;
        id
    }

    fn ephemeral_port(&mut self) -> i64 {
        let p = 32768 + self.next_port % 28232;
        self.next_port += 1;
        p
    }

    fn emit(&mut self, svc: usize, ts: i64, origin: Option<usize>, payload: Payload) {
        let s = &self.topo.services[svc];
        let trace = &mut self.traces[svc];
        trace.events.push(TraceEvent::new(ts, &s.name, s.host(), payload));
        trace.origins.push(origin);
    }

    fn emit_async(&mut self, frame: usize, ts: i64, kind: &str, async_id: i64, ctx_id: i64) {
        let (svc, request) = (self.frames[frame].svc, self.frames[frame].request);
        self.emit(
            svc,
            ts,
            Some(request),
            Payload::AsyncContext(AsyncContextPayload {
                async_id,
                ctx_id,
                kind: kind.into(),
            }),
        );
        if self.noise.decoy_rate > 0.0 && self.rng.random_bool(self.noise.decoy_rate) {
            let async_id = self.next_decoy;
            self.next_decoy += 1 + self.rng.random_range(0..4);
            let ctx_id = if async_id > DECOY_ID_BASE {
                self.rng.random_range(DECOY_ID_BASE..async_id)
            } else {
                DECOY_ID_BASE
            };
            let kind = CHAIN_KINDS[self.rng.random_range(0..CHAIN_KINDS.len())];
            self.emit(
                svc,
                ts,
                None,
                Payload::AsyncContext(AsyncContextPayload {
                    async_id,
                    ctx_id,
                    kind: kind.into(),
                }),
            );
        }
    }

    /// FIFO network leg: nothing overtakes an earlier message on the same edge.
    fn deliver(&mut self, from: usize, to: usize, reply: bool, now: i64) -> i64 {
        let latency = self.topo.network_latency.sample(&mut self.rng);
        let last = self.edge_last.entry((from, to, reply)).or_insert(i64::MIN);
        let at = (now + latency).max(*last);
        *last = at;
        at
    }

    fn http(&self, frame: usize, status: Option<i64>) -> HttpPayload {
        let f = &self.frames[frame];
        let s = &self.topo.services[f.svc];
        HttpPayload {
            method: f.method.clone(),
            url: f.url.clone(),
            src_addr: f.src_addr.clone(),
            src_port: f.src_port,
            dst_addr: s.addr.clone(),
            dst_port: s.port,
            sockid: f.sockid,
            status,
        }
    }

    fn open_frame(&mut self, now: i64, request: usize, svc: usize, caller: Option<usize>) {
        let (src_addr, method, url) = match caller {
            Some(c) => {
                let f = &self.frames[c];
                (self.topo.services[f.svc].addr.clone(), f.method.clone(), f.url.clone())
            }
            None => ("10.255.0.1".to_string(), self.wl.method.clone(), self.wl.url(request)),
        };
        let src_port = self.ephemeral_port();
        let sockid = self.alloc(svc);
        let frame = self.frames.len();
        self.frames.push(Frame {
            request,
            svc,
            sockid,
            start: now,
            end: now,
            caller,
            src_addr,
            src_port,
            method,
            url,
            pre: 0,
            post: 0,
            ids: [0; 5],
            downstream: None,
            redis: None,
        });
        if let Some(c) = caller {
            self.frames[c].downstream = Some(frame);
        } else {
            self.roots[request] = Some(frame);
        }
        let req = self.http(frame, None);
        self.emit(svc, now, Some(request), Payload::ServerRequest(req));
        match &self.topo.services[svc].handler {
            Handler::Terminal { service_time } => {
                let d = service_time.sample(&mut self.rng);
                self.schedule(now + d, Action::Respond { frame });
            }
            Handler::Forward { pre, post, .. } => {
                let (pre, post) = (pre.sample(&mut self.rng), post.sample(&mut self.rng));
                self.frames[frame].pre = pre;
                self.frames[frame].post = post;
                self.schedule(now + pre / 5, Action::Step { frame, k: 1 });
            }
            Handler::Redis {
                duration_us, pre, post, ..
            } => {
                let (pre, post) = (pre.sample(&mut self.rng), post.sample(&mut self.rng));
                self.frames[frame].post = post;
                // One command at a time per service, in arrival order.
                let at = (now + pre).max(self.redis_busy_until[svc]);
                self.redis_busy_until[svc] = at + duration_us * 1_000;
                self.schedule(at, Action::RedisCommand { frame });
            }
        }
    }

    fn run(&mut self, now: i64, action: Action) {
        match action {
            Action::Inbound { request } => {
                let entry = self.topo.entry_index();
                self.open_frame(now, request, entry, None);
            }
            Action::Arrive { caller, svc } => {
                let request = self.frames[caller].request;
                self.open_frame(now, request, svc, Some(caller));
            }
            Action::Step { frame, k } => self.forward_step(now, frame, k),
            Action::RedisCommand { frame } => {
                let f = &self.frames[frame];
                let (svc, request) = (f.svc, f.request);
                let Handler::Redis {
                    cmd, key, duration_us, ..
                } = &self.topo.services[svc].handler
                else {
                    unreachable!("redis action on a non-redis service");
                };
                let (cmd, key, duration_us) = (cmd.clone(), key.replace("{i}", &request.to_string()), *duration_us);
                let end = now + duration_us * 1_000;
                self.frames[frame].redis = Some((cmd.clone(), now, end));
                self.emit(
                    svc,
                    now,
                    Some(request),
                    Payload::RedisCommand(RedisCommandPayload { cmd, key, duration_us }),
                );
                let post = self.frames[frame].post;
                self.schedule(end + post, Action::Respond { frame });
            }
            Action::ClientResponse { frame } => {
                let child = self.frames[frame].downstream.expect("response implies a call");
                let mut resp = self.http(child, Some(200));
                resp.sockid = self.frames[frame].ids[2];
                let (svc, request) = (self.frames[frame].svc, self.frames[frame].request);
                self.emit(svc, now, Some(request), Payload::ClientResponse(resp));
                let post = self.frames[frame].post;
                self.schedule(now + post, Action::Respond { frame });
            }
            Action::Respond { frame } => {
                self.frames[frame].end = now;
                let resp = self.http(frame, Some(200));
                let (svc, request) = (self.frames[frame].svc, self.frames[frame].request);
                self.emit(svc, now, Some(request), Payload::ServerResponse(resp));
                if let Some(caller) = self.frames[frame].caller {
                    let at = self.deliver(svc, self.frames[caller].svc, true, now);
                    self.schedule(at, Action::ClientResponse { frame: caller });
                }
            }
        }
    }

    /// after(a2) -> constructor(a3) -> TCPWRAP(a4) -> GETADDRINFOREQWRAP(a5)
    /// and HTTPCLIENTREQUEST(a5 + 1) -> outgoing request on socket a4.
    fn forward_step(&mut self, now: i64, frame: usize, k: u8) {
        let svc = self.frames[frame].svc;
        match k {
            1..=3 => {
                let id = self.alloc(svc);
                let ctx = if k == 1 {
                    self.frames[frame].sockid
                } else {
                    self.frames[frame].ids[k as usize - 2]
                };
                self.frames[frame].ids[k as usize - 1] = id;
                self.emit_async(frame, now, CHAIN_KINDS[k as usize - 1], id, ctx);
            }
            4 => {
                let a5 = self.alloc(svc);
                // The request wrap takes the very next id.
                self.next_id[svc] = a5 + 2;
                let [_, a3, a4, ..] = self.frames[frame].ids;
                self.frames[frame].ids[3] = a5;
                self.frames[frame].ids[4] = a5 + 1;
                self.emit_async(frame, now, CHAIN_KINDS[3], a5, a4);
                self.emit_async(frame, now, CHAIN_KINDS[4], a5 + 1, a3);
            }
            _ => {
                let Handler::Forward { downstream, .. } = &self.topo.services[svc].handler else {
                    unreachable!("forward step on a non-forwarding service");
                };
                let target = self.topo.index_of(downstream);
                let ts = &self.topo.services[target];
                let f = &self.frames[frame];
                let call = HttpPayload {
                    method: f.method.clone(),
                    url: f.url.clone(),
                    src_addr: self.topo.services[svc].addr.clone(),
                    src_port: 0,
                    dst_addr: ts.addr.clone(),
                    dst_port: ts.port,
                    sockid: f.ids[2],
                    status: None,
                };
                let request = f.request;
                let mut call = call;
                call.src_port = self.ephemeral_port();
                self.emit(svc, now, Some(request), Payload::ClientRequest(call));
                let at = self.deliver(svc, target, false, now);
                self.schedule(at, Action::Arrive { caller: frame, svc: target });
                return;
            }
        }
        let pre = self.frames[frame].pre;
        let start = self.frames[frame].start;
        let next = k + 1;
        self.schedule(start + pre * i64::from(next) / 5, Action::Step { frame, k: next });
    }

    fn truth(&self, frame: usize) -> TruthSpan {
        let f = &self.frames[frame];
        let mut children = Vec::new();
        if let Some(d) = f.downstream {
            children.push(self.truth(d));
        }
        if let Some((cmd, start, end)) = &f.redis {
            children.push(TruthSpan {
                service: REDIS_SERVICE.to_string(),
                kind: SpanKind::Redis,
                operation: format!("redis:{cmd}"),
                sockid: None,
                start_ns: *start,
                end_ns: *end,
                children: Vec::new(),
            });
        }
        TruthSpan {
            service: self.topo.services[f.svc].name.clone(),
            kind: SpanKind::Server,
            operation: format!("{} {}", f.method, f.url),
            sockid: Some(f.sockid),
            start_ns: f.start,
            end_ns: f.end,
            children,
        }
    }

    fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            requests: self
                .roots
                .iter()
                .map(|r| TruthRequest {
                    root: self.truth(r.expect("every request was started")),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wl(n: usize, seed: u64) -> Workload {
        Workload {
            n_requests: n,
            mean_ns: 5e6,
            stddev_ns: 1e6,
            method: "GET".into(),
            url_template: "/users/{i}".into(),
            seed,
        }
    }

    fn terminal(name: &str) -> ServiceDef {
        ServiceDef {
            name: name.into(),
            addr: "10.0.0.1".into(),
            port: 80,
            host: None,
            handler: Handler::Terminal {
                service_time: Dist::constant(1_000),
            },
        }
    }

    fn forward(name: &str, to: &str) -> ServiceDef {
        ServiceDef {
            handler: Handler::Forward {
                downstream: to.into(),
                pre: Dist::constant(500),
                post: Dist::constant(500),
            },
            ..terminal(name)
        }
    }

    fn topo(services: Vec<ServiceDef>) -> Topology {
        Topology {
            services,
            entry: None,
            network_latency: Dist::constant(100),
            request: RequestShape::default(),
        }
    }

    #[test]
    fn bundled_topologies_load() {
        assert_eq!(
            scenarios::use_case_1().chain(),
            ["gateway", "user", "redis-gateway", "redis"]
        );
        assert_eq!(scenarios::use_case_2().chain(), ["gateway", "orders"]);
        assert_eq!(scenarios::use_case_3().chain().len(), 6);
    }

    #[test]
    fn topology_validation() {
        assert!(topo(vec![terminal("only")]).validate().is_ok());
        assert!(matches!(
            topo(vec![forward("loop", "loop")]).validate(),
            Err(TopologyError::CycleDetected(_))
        ));
        assert!(matches!(
            topo(vec![forward("a", "b"), forward("b", "a")]).validate(),
            Err(TopologyError::CycleDetected(_))
        ));
        assert!(matches!(
            topo(vec![forward("a", "ghost")]).validate(),
            Err(TopologyError::UnresolvedService { .. })
        ));
        assert!(matches!(
            topo(vec![terminal("a"), terminal("a")]).validate(),
            Err(TopologyError::MalformedTopology(_))
        ));
        assert!(matches!(
            Topology::from_json("{\"services\": 3}"),
            Err(TopologyError::MalformedTopology(_))
        ));
        let mut bad_port = terminal("a");
        bad_port.port = 0;
        assert!(topo(vec![bad_port]).validate().is_err());
    }

    #[test]
    fn workload_validation() {
        let t = topo(vec![terminal("a")]);
        assert!(matches!(
            simulate(&t, &wl(0, 1), &Noise::default()),
            Err(SimError::InvalidWorkload(_))
        ));
        let mut w = wl(1, 1);
        w.stddev_ns = -1.0;
        assert!(simulate(&t, &w, &Noise::default()).is_err());
    }

    #[test]
    fn single_request_event_count_by_hand() {
        // forward: request, 5 async records, client request/response, response = 9
        // redis terminal: request, command, response = 3
        let out = simulate(&scenarios::use_case_1(), &wl(1, 3), &Noise::default()).unwrap();
        assert_eq!(out.event_count(), 9 + 9 + 3);
        let out = simulate(&scenarios::use_case_2(), &wl(1, 3), &Noise::default()).unwrap();
        assert_eq!(out.event_count(), 9 + 2);
    }

    #[test]
    fn forwarding_chain_matches_runtime_shape() {
        let out = simulate(&scenarios::use_case_1(), &wl(1, 9), &Noise::decoys()).unwrap();
        let gw: Vec<&TraceEvent> = out.traces[0]
            .events
            .iter()
            .zip(&out.traces[0].origins)
            .filter(|(_, o)| o.is_some())
            .map(|(e, _)| e)
            .collect();
        let sock = gw[0].sockid().unwrap();
        let a: Vec<&AsyncContextPayload> = gw[1..6].iter().map(|e| e.async_context().unwrap()).collect();
        let kinds: Vec<&str> = a.iter().map(|p| p.kind.as_str()).collect();
        assert_eq!(kinds, CHAIN_KINDS);
        assert_eq!(a[0].ctx_id, sock);
        assert_eq!(a[1].ctx_id, a[0].async_id);
        assert_eq!(a[2].ctx_id, a[1].async_id);
        assert_eq!(a[3].ctx_id, a[2].async_id);
        assert_eq!(a[4].async_id, a[3].async_id + 1);
        assert_eq!(a[4].ctx_id, a[1].async_id);
        assert_eq!(gw[6].sockid(), Some(a[2].async_id));
        assert_eq!(gw[7].sockid(), Some(a[2].async_id));
        assert_eq!(gw[8].sockid(), Some(sock));
        for w in a.windows(2) {
            assert!(w[1].async_id > w[0].async_id);
        }
    }

    #[test]
    fn decoys_use_disjoint_ids() {
        let out = simulate(&scenarios::use_case_1(), &wl(50, 2), &Noise::decoys()).unwrap();
        let mut decoys = 0;
        for t in &out.traces {
            for (ev, origin) in t.events.iter().zip(&t.origins) {
                if let Some(p) = ev.async_context() {
                    if origin.is_none() {
                        decoys += 1;
                        assert!(p.async_id >= DECOY_ID_BASE && p.ctx_id >= DECOY_ID_BASE);
                    } else {
                        assert!(p.async_id < DECOY_ID_BASE);
                    }
                }
            }
        }
        assert!(decoys > 0);
    }

    #[test]
    fn traces_are_sorted_and_valid() {
        let out = simulate(&scenarios::use_case_3(), &wl(200, 11), &Noise::decoys()).unwrap();
        for t in &out.traces {
            assert!(t.events.windows(2).all(|w| w[0].ts <= w[1].ts));
            for ev in &t.events {
                event::validate_event(ev).unwrap();
            }
        }
    }

    #[test]
    fn seed_determinism() {
        let a = simulate(&scenarios::use_case_1(), &wl(100, 42), &Noise::decoys()).unwrap();
        let b = simulate(&scenarios::use_case_1(), &wl(100, 42), &Noise::decoys()).unwrap();
        let c = simulate(&scenarios::use_case_1(), &wl(100, 43), &Noise::decoys()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn use_case_3_truth_is_at_least_18ms() {
        let out = simulate(&scenarios::use_case_3(), &wl(1, 1), &Noise::default()).unwrap();
        let root = &out.ground_truth.requests[0].root;
        assert!(root.duration_ns() >= 18_000_000);
        assert_eq!(root.count(), 6);
    }

    #[test]
    fn every_server_request_is_in_the_truth_once() {
        let out = simulate(&scenarios::use_case_1(), &wl(30, 5), &Noise::default()).unwrap();
        let mut sockets: Vec<(String, i64)> = Vec::new();
        fn collect(s: &TruthSpan, out: &mut Vec<(String, i64)>) {
            if let Some(id) = s.sockid {
                out.push((s.service.clone(), id));
            }
            s.children.iter().for_each(|c| collect(c, out));
        }
        for r in &out.ground_truth.requests {
            collect(&r.root, &mut sockets);
        }
        let mut emitted: Vec<(String, i64)> = out
            .traces
            .iter()
            .flat_map(|t| t.events.iter())
            .filter(|e| e.name() == event::EventName::HttpServerRequest)
            .map(|e| (e.service.clone(), e.sockid().unwrap()))
            .collect();
        sockets.sort();
        emitted.sort();
        assert_eq!(sockets, emitted);
    }

    #[test]
    fn skew_spec_parsing() {
        let s = parse_skew("user=+3ms, gateway=-500us,x=7").unwrap();
        assert_eq!(s["user"], 3_000_000);
        assert_eq!(s["gateway"], -500_000);
        assert_eq!(s["x"], 7);
        assert!(parse_skew("user").is_err());
        assert!(parse_skew("user=abc").is_err());
    }

    #[test]
    fn drops_remove_events() {
        let noise = Noise {
            drop_rate: 0.2,
            ..Noise::default()
        };
        let full = simulate(&scenarios::use_case_1(), &wl(50, 8), &Noise::default()).unwrap();
        let lossy = simulate(&scenarios::use_case_1(), &wl(50, 8), &noise).unwrap();
        assert!(lossy.event_count() < full.event_count());
        assert_eq!(lossy.ground_truth, full.ground_truth);
    }
}
