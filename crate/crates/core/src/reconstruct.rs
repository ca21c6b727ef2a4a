//! Request context reconstruction from the merged event stream.
//!
//! Every `http_server_request` starts a subsystem: an instance of the
//! request state machine bound to the socket the request arrived on. The
//! runtime's async records then walk each subsystem through the outbound
//! call chain
//!
//! ```text
//! S1 --after(ctx_id = sockid)--------------> S2   binds a2
//! S2 --constructor(ctx_id = a2)------------> S3   binds a3
//! S3 --TCPWRAP(ctx_id = a3)----------------> S4   binds a4 (outbound socket)
//! S4 --GETADDRINFOREQWRAP(ctx_id = a4)-----> S5   binds a5
//! S5 --HTTPCLIENTREQUEST(async_id = a5+1)--> S6   binds a6
//! ```
//!
//! and the server response on `sockid` closes it from any state. Client
//! requests and responses are correlated on `a4`; calls are linked to the
//! downstream server request with the same destination, method and url.
//! Every state change is written to the history tree under
//! `/requests/<service>/<subsystem id>`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::event::{EventName, Payload, TraceEvent};
use crate::fsm::{Bindings, FsmError, MachineRun, StateMachineDef, Step};
use crate::sht::{AttributePath, HistoryTree, ShtError, TreeConfig, Value};
use crate::span::{SpanForest, SpanKind, SpanNode};

/// Service name given to redis leaf spans.
pub const REDIS_SERVICE: &str = "redis";

#[derive(Debug, thiserror::Error)]
pub enum ReconstructError {
    #[error(transparent)]
    Fsm(#[from] FsmError),
    #[error(transparent)]
    Sht(#[from] ShtError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubState {
    S1Received,
    S2After,
    S3Constructed,
    S4TcpWrap,
    S5GetAddr,
    S6ClientReq,
    Closed,
}

impl SubState {
    const LABELS: [&'static str; 7] = ["S1", "S2", "S3", "S4", "S5", "S6", "CLOSED"];
    const ALL: [SubState; 7] = [
        SubState::S1Received,
        SubState::S2After,
        SubState::S3Constructed,
        SubState::S4TcpWrap,
        SubState::S5GetAddr,
        SubState::S6ClientReq,
        SubState::Closed,
    ];

    pub fn label(self) -> &'static str {
        Self::LABELS[self as usize]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

fn async_kind_ctx(ev: &TraceEvent, kind: &str) -> Option<i64> {
    match &ev.payload {
        Payload::AsyncContext(p) if p.kind == kind => Some(p.ctx_id),
        _ => None,
    }
}

fn async_id(ev: &TraceEvent) -> Option<i64> {
    ev.async_context().map(|p| p.async_id)
}

/// The request state machine. With `fanout` the machine may go from S6
/// back to S3 when the same callback context constructs another outgoing
/// request, so one request can issue several downstream calls.
pub fn request_machine(fanout: bool) -> StateMachineDef<TraceEvent> {
    let ctx_rule = |kind: &'static str, bound: &'static str| {
        move |b: &Bindings, ev: &TraceEvent| {
            async_kind_ctx(ev, kind).is_some_and(|ctx| Some(ctx) == b.get(bound))
        }
    };
    let mut builder = StateMachineDef::builder()
        .states(SubState::LABELS)
        .actions(["bind_a2", "bind_a3", "bind_a4", "bind_a5", "bind_a6", "close", "next_call"])
        .accepting(["S6", "CLOSED"])
        .initial("S1")
        .class("after_on_sockid", ctx_rule("after", "sockid"))
        .class("constructor_on_a2", ctx_rule("constructor", "a2"))
        .class("tcpwrap_on_a3", ctx_rule("TCPWRAP", "a3"))
        .class("getaddrinfo_on_a4", ctx_rule("GETADDRINFOREQWRAP", "a4"))
        .class("httpclientrequest_after_a5", |b: &Bindings, ev: &TraceEvent| match &ev.payload {
            Payload::AsyncContext(p) if p.kind == "HTTPCLIENTREQUEST" => {
                b.get("a5").is_some_and(|a5| p.async_id == a5 + 1)
            }
            _ => false,
        })
        .class("server_response_on_sockid", |b: &Bindings, ev: &TraceEvent| {
            ev.name() == EventName::HttpServerResponse && ev.sockid() == b.get("sockid")
        })
        .rule_binding("S1", "after_on_sockid", "S2", "bind_a2", "a2", async_id)
        .rule_binding("S2", "constructor_on_a2", "S3", "bind_a3", "a3", async_id)
        .rule_binding("S3", "tcpwrap_on_a3", "S4", "bind_a4", "a4", async_id)
        .rule_binding("S4", "getaddrinfo_on_a4", "S5", "bind_a5", "a5", async_id)
        .rule_binding("S5", "httpclientrequest_after_a5", "S6", "bind_a6", "a6", async_id);
    for from in &SubState::LABELS[..6] {
        builder = builder.rule(*from, "server_response_on_sockid", "CLOSED", "close");
    }
    if fanout {
        builder = builder.rule_binding("S6", "constructor_on_a2", "S3", "next_call", "a3", async_id);
    }
    builder.build().expect("request machine definition is valid")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReconstructorConfig {
    /// Allow repeated S3..S6 cycles for requests issuing several calls.
    pub fanout_calls: bool,
    pub tree: TreeConfig,
}


#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CallRef {
    pub subsystem: usize,
    pub call: usize,
}

/// One outgoing HTTP call issued by a subsystem.
#[derive(Clone, Debug)]
pub struct ClientCall {
    /// Outbound socket id (the S4 binding).
    pub sockid: i64,
    pub request: TraceEvent,
    pub start_ns: i64,
    pub end_ns: Option<i64>,
    pub status: Option<i64>,
    /// Downstream subsystem this call was linked to.
    pub child: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RedisLeaf {
    pub cmd: String,
    pub key: String,
    pub start_ns: i64,
    pub end_ns: i64,
}

/// One in-flight request on one service.
#[derive(Debug)]
pub struct RequestSubsystem {
    pub id: usize,
    pub service: String,
    pub sockid: i64,
    pub server_req: TraceEvent,
    pub calls: Vec<ClientCall>,
    pub redis: Vec<RedisLeaf>,
    pub parent: Option<CallRef>,
    pub start_ns: i64,
    pub end_ns: Option<i64>,
    pub status: Option<i64>,
    pub sht_anchor: AttributePath,
    run: MachineRun<TraceEvent>,
}

impl RequestSubsystem {
    pub fn state(&self) -> SubState {
        SubState::from_index(self.run.current())
    }

    pub fn bound(&self, name: &str) -> Option<i64> {
        self.run.bindings().get(name)
    }

    pub fn a2(&self) -> Option<i64> {
        self.bound("a2")
    }
    pub fn a3(&self) -> Option<i64> {
        self.bound("a3")
    }
    pub fn a4(&self) -> Option<i64> {
        self.bound("a4")
    }
    pub fn a5(&self) -> Option<i64> {
        self.bound("a5")
    }
    pub fn a6(&self) -> Option<i64> {
        self.bound("a6")
    }

    pub fn run(&self) -> &MachineRun<TraceEvent> {
        &self.run
    }

    pub fn operation(&self) -> String {
        let http = self.server_req.http().expect("server request carries http fields");
        format!("{} {}", http.method, http.url)
    }

    /// Id an async record must reference for this subsystem to advance:
    /// its ctx_id, or async_id - 1 for the S5 rule.
    fn anchor(&self, fanout: bool) -> Option<i64> {
        match self.state() {
            SubState::S1Received => Some(self.sockid),
            SubState::S2After => self.a2(),
            SubState::S3Constructed => self.a3(),
            SubState::S4TcpWrap => self.a4(),
            SubState::S5GetAddr => self.a5(),
            SubState::S6ClientReq if fanout => self.a2(),
            SubState::S6ClientReq | SubState::Closed => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OrphanReason {
    DuplicateOpenSocket,
    NoMatchingSubsystem,
    UnlinkedCall,
}

/// An event that could not be tied to any request.
#[derive(Clone, Debug, PartialEq)]
pub struct Orphan {
    pub event: TraceEvent,
    pub reason: OrphanReason,
}

impl Serialize for Orphan {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let event: serde_json::Value =
            serde_json::from_str(&self.event.to_line()).map_err(serde::ser::Error::custom)?;
        let mut st = s.serialize_struct("Orphan", 2)?;
        st.serialize_field("event", &event)?;
        st.serialize_field("reason", &self.reason)?;
        st.end()
    }
}

#[derive(Serialize)]
struct OrphanReport<'a> {
    orphans: &'a [Orphan],
}

pub fn orphans_to_json(orphans: &[Orphan]) -> String {
    serde_json::to_string_pretty(&OrphanReport { orphans }).expect("orphan report serializes")
}

type ServiceKey = (u32, i64);

/// Consumes the merged stream one event at a time.
pub struct Analyzer {
    def: Arc<StateMachineDef<TraceEvent>>,
    config: ReconstructorConfig,
    sht: HistoryTree,
    subsystems: Vec<RequestSubsystem>,
    services: HashMap<String, u32>,
    open_by_sock: HashMap<ServiceKey, usize>,
    waiting: HashMap<ServiceKey, Vec<usize>>,
    awaiting_client: HashMap<ServiceKey, usize>,
    open_calls: HashMap<ServiceKey, CallRef>,
    // (start, sockid, id): sockids grow with arrival order, so ties in start
    // resolve the same way whatever order the stream delivered them in.
    open_on_service: HashMap<u32, BTreeSet<(i64, i64, usize)>>,
    redis_free: HashMap<u32, BTreeSet<(i64, i64, usize)>>,
    orphans: Vec<Orphan>,
    last_ts: i64,
}

impl Default for Analyzer {
    fn default() -> Self {
        Self::new(ReconstructorConfig::default())
    }
}

impl Analyzer {
    pub fn new(config: ReconstructorConfig) -> Self {
        Analyzer {
            def: Arc::new(request_machine(config.fanout_calls)),
            config,
            sht: HistoryTree::with_config(config.tree),
            subsystems: Vec::new(),
            services: HashMap::new(),
            open_by_sock: HashMap::new(),
            waiting: HashMap::new(),
            awaiting_client: HashMap::new(),
            open_calls: HashMap::new(),
            open_on_service: HashMap::new(),
            redis_free: HashMap::new(),
            orphans: Vec::new(),
            last_ts: 0,
        }
    }

    pub fn subsystems(&self) -> &[RequestSubsystem] {
        &self.subsystems
    }

    pub fn orphans(&self) -> &[Orphan] {
        &self.orphans
    }

    fn service_id(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.services.get(name) {
            return id;
        }
        let id = self.services.len() as u32;
        self.services.insert(name.to_string(), id);
        id
    }

    fn orphan(&mut self, event: TraceEvent, reason: OrphanReason) {
        log::debug!("orphan {} at {}: {:?}", event.name(), event.ts, reason);
        self.orphans.push(Orphan { event, reason });
    }

    fn attr(&self, sub: usize, leaf: &str) -> AttributePath {
        self.subsystems[sub]
            .sht_anchor
            .child(leaf)
            .expect("static attribute names are valid")
    }

    fn set(&mut self, t: i64, sub: usize, leaf: &str, value: impl Into<Value>) -> Result<(), ShtError> {
        let attr = self.attr(sub, leaf);
        self.sht.set_attribute(t, &attr, value)
    }

    /// Dispatches one event. Correlation failures are recorded as orphans;
    /// only machine-definition or history errors abort.
    pub fn process_event(&mut self, ev: TraceEvent) -> Result<(), ReconstructError> {
        self.last_ts = self.last_ts.max(ev.ts);
        match ev.name() {
            EventName::HttpServerRequest => {
                self.start_subsystem(ev)?;
            }
            EventName::AsyncContext => {
                let svc = self.service_id(&ev.service);
                let p = ev.async_context().expect("async payload");
                let mut candidates: Vec<usize> = Vec::new();
                for key in [p.ctx_id, p.async_id - 1] {
                    if let Some(ids) = self.waiting.get(&(svc, key)) {
                        candidates.extend(ids);
                    }
                }
                candidates.sort_unstable();
                candidates.dedup();
                for id in candidates {
                    if self.try_advance(id, &ev)? {
                        break;
                    }
                }
            }
            EventName::HttpClientRequest => {
                if let Err(reason) = self.attach_client_request(&ev)? {
                    self.orphan(ev, reason);
                }
            }
            EventName::HttpClientResponse => {
                if let Err(reason) = self.correlate_client_response(&ev)? {
                    self.orphan(ev, reason);
                }
            }
            EventName::HttpServerResponse => {
                if let Err(reason) = self.correlate_server_response(&ev)? {
                    self.orphan(ev, reason);
                }
            }
            EventName::RedisCommand => {
                if let Err(reason) = self.attach_redis(&ev)? {
                    self.orphan(ev, reason);
                }
            }
        }
        Ok(())
    }

    /// Opens a subsystem in S1 for an incoming server request.
    pub fn start_subsystem(&mut self, ev: TraceEvent) -> Result<Option<usize>, ReconstructError> {
        let svc = self.service_id(&ev.service);
        let http = ev.http().expect("server request carries http fields");
        let sockid = http.sockid;
        if self.open_by_sock.contains_key(&(svc, sockid)) {
            self.orphan(ev, OrphanReason::DuplicateOpenSocket);
            return Ok(None);
        }
        let (method, url) = (http.method.clone(), http.url.clone());
        let id = self.subsystems.len();
        let mut bindings = Bindings::default();
        bindings.set("sockid", sockid);
        let anchor = AttributePath::new(["requests", &ev.service.replace('/', "_"), &id.to_string()])?;
        let ts = ev.ts;
        self.subsystems.push(RequestSubsystem {
            id,
            service: ev.service.clone(),
            sockid,
            server_req: ev,
            calls: Vec::new(),
            redis: Vec::new(),
            parent: None,
            start_ns: ts,
            end_ns: None,
            status: None,
            sht_anchor: anchor,
            run: MachineRun::with_bindings(Arc::clone(&self.def), bindings),
        });
        self.set(ts, id, "state", SubState::S1Received.label())?;
        self.set(ts, id, "method", method)?;
        self.set(ts, id, "url", url)?;
        self.set(ts, id, "sockid", sockid)?;
        self.open_by_sock.insert((svc, sockid), id);
        self.waiting.entry((svc, sockid)).or_default().push(id);
        self.open_on_service.entry(svc).or_default().insert((ts, sockid, id));
        self.redis_free.entry(svc).or_default().insert((ts, sockid, id));
        Ok(Some(id))
    }

    fn unwait(&mut self, svc: u32, anchor: Option<i64>, id: usize) {
        let Some(anchor) = anchor else { return };
        if let Some(ids) = self.waiting.get_mut(&(svc, anchor)) {
            ids.retain(|&x| x != id);
            if ids.is_empty() {
                self.waiting.remove(&(svc, anchor));
            }
        }
    }

    /// Offers an async record to one subsystem. Returns whether it advanced.
    pub fn try_advance(&mut self, id: usize, ev: &TraceEvent) -> Result<bool, ReconstructError> {
        if ev.name() != EventName::AsyncContext || ev.service != self.subsystems[id].service {
            return Ok(false);
        }
        let fanout = self.config.fanout_calls;
        let old_anchor = self.subsystems[id].anchor(fanout);
        let step = self.subsystems[id].run.step(ev)?;
        let Step::Advanced { .. } = step else {
            return Ok(false);
        };
        let svc = self.service_id(&ev.service);
        self.unwait(svc, old_anchor, id);
        let sub = &self.subsystems[id];
        let state = sub.state();
        if let Some(anchor) = sub.anchor(fanout) {
            self.waiting.entry((svc, anchor)).or_default().push(id);
        }
        if state == SubState::S6ClientReq {
            let a4 = sub.a4().expect("a4 bound before S6");
            self.awaiting_client.insert((svc, a4), id);
        }
        let binding = match state {
            SubState::S2After => "a2",
            SubState::S3Constructed => "a3",
            SubState::S4TcpWrap => "a4",
            SubState::S5GetAddr => "a5",
            _ => "a6",
        };
        let value = sub.bound(binding).expect("advanced rule bound its id");
        self.set(ev.ts, id, "state", state.label())?;
        self.set(ev.ts, id, binding, value)?;
        Ok(true)
    }

    /// Binds a client request to the S6 subsystem owning its socket.
    pub fn attach_client_request(
        &mut self,
        ev: &TraceEvent,
    ) -> Result<Result<CallRef, OrphanReason>, ReconstructError> {
        let svc = self.service_id(&ev.service);
        let sockid = ev.sockid().expect("client request carries a socket");
        let Some(id) = self.awaiting_client.remove(&(svc, sockid)) else {
            return Ok(Err(OrphanReason::NoMatchingSubsystem));
        };
        let sub = &mut self.subsystems[id];
        let call = CallRef {
            subsystem: id,
            call: sub.calls.len(),
        };
        sub.calls.push(ClientCall {
            sockid,
            request: ev.clone(),
            start_ns: ev.ts,
            end_ns: None,
            status: None,
            child: None,
        });
        self.open_calls.insert((svc, sockid), call);
        let attr = AttributePath::parse(&format!(
            "{}/calls/{}",
            self.subsystems[id].sht_anchor, call.call
        ))?;
        self.sht.set_attribute(ev.ts, &attr, sockid)?;
        Ok(Ok(call))
    }

    /// Closes the client span whose outbound socket matches the response.
    pub fn correlate_client_response(
        &mut self,
        ev: &TraceEvent,
    ) -> Result<Result<CallRef, OrphanReason>, ReconstructError> {
        let svc = self.service_id(&ev.service);
        let sockid = ev.sockid().expect("client response carries a socket");
        let Some(call) = self.open_calls.remove(&(svc, sockid)) else {
            return Ok(Err(OrphanReason::NoMatchingSubsystem));
        };
        let entry = &mut self.subsystems[call.subsystem].calls[call.call];
        entry.end_ns = Some(ev.ts);
        entry.status = ev.http().and_then(|h| h.status);
        let attr = AttributePath::parse(&format!(
            "{}/calls/{}",
            self.subsystems[call.subsystem].sht_anchor, call.call
        ))?;
        self.sht.set_attribute(ev.ts + 1, &attr, Value::Null)?;
        Ok(Ok(call))
    }

    /// Closes the subsystem that received the request on this socket.
    pub fn correlate_server_response(
        &mut self,
        ev: &TraceEvent,
    ) -> Result<Result<usize, OrphanReason>, ReconstructError> {
        let svc = self.service_id(&ev.service);
        let sockid = ev.sockid().expect("server response carries a socket");
        let Some(&id) = self.open_by_sock.get(&(svc, sockid)) else {
            return Ok(Err(OrphanReason::NoMatchingSubsystem));
        };
        let fanout = self.config.fanout_calls;
        let old_anchor = self.subsystems[id].anchor(fanout);
        let pending_a4 = (self.subsystems[id].state() == SubState::S6ClientReq)
            .then(|| self.subsystems[id].a4())
            .flatten();
        if self.subsystems[id].run.step(ev)? == Step::NoMatch {
            return Ok(Err(OrphanReason::NoMatchingSubsystem));
        }
        self.open_by_sock.remove(&(svc, sockid));
        self.unwait(svc, old_anchor, id);
        if let Some(a4) = pending_a4 {
            if self.awaiting_client.get(&(svc, a4)) == Some(&id) {
                self.awaiting_client.remove(&(svc, a4));
            }
        }
        let key = (self.subsystems[id].start_ns, self.subsystems[id].sockid, id);
        if let Some(set) = self.open_on_service.get_mut(&svc) {
            set.remove(&key);
        }
        if let Some(set) = self.redis_free.get_mut(&svc) {
            set.remove(&key);
        }
        let sub = &mut self.subsystems[id];
        sub.end_ns = Some(ev.ts);
        sub.status = ev.http().and_then(|h| h.status);
        let mut leaves = vec!["state", "method", "url", "sockid"];
        leaves.extend(["a2", "a3", "a4", "a5", "a6"].into_iter().filter(|b| sub.bound(b).is_some()));
        for leaf in leaves {
            self.set(ev.ts + 1, id, leaf, Value::Null)?;
        }
        Ok(Ok(id))
    }

    /// Attaches a redis command to the earliest open request on the service
    /// that has no command yet, or else to the latest open one.
    fn attach_redis(&mut self, ev: &TraceEvent) -> Result<Result<usize, OrphanReason>, ReconstructError> {
        let svc = self.service_id(&ev.service);
        let p = ev.redis().expect("redis payload");
        let free = self
            .redis_free
            .get(&svc)
            .and_then(|set| set.first().copied())
            .filter(|&(start, _, _)| start <= ev.ts);
        let chosen = match free {
            Some(entry) => {
                self.redis_free.get_mut(&svc).expect("set exists").remove(&entry);
                Some(entry.2)
            }
            None => self
                .open_on_service
                .get(&svc)
                .and_then(|set| set.range(..(ev.ts + 1, i64::MIN, 0)).next_back().map(|&(_, _, id)| id)),
        };
        let Some(id) = chosen else {
            return Ok(Err(OrphanReason::NoMatchingSubsystem));
        };
        let end = ev.ts + p.duration_us * 1_000;
        let sub = &mut self.subsystems[id];
        let k = sub.redis.len();
        sub.redis.push(RedisLeaf {
            cmd: p.cmd.clone(),
            key: p.key.clone(),
            start_ns: ev.ts,
            end_ns: end,
        });
        let attr = AttributePath::parse(&format!("{}/redis/{k}", sub.sht_anchor))?;
        self.sht.set_attribute(ev.ts, &attr, p.cmd.clone())?;
        self.sht.set_attribute(end + 1, &attr, Value::Null)?;
        Ok(Ok(id))
    }

    /// Links every client call to the earliest not-yet-linked server request
    /// with the same destination, method and url that started no earlier.
    /// Calls are visited in timestamp order, so identical concurrent calls
    /// pair up one-to-one in order.
    pub fn link_cross_service(&mut self) {
        type Tuple = (String, i64, String, String);
        let mut servers: HashMap<Tuple, BTreeSet<(i64, i64, usize)>> = HashMap::new();
        for sub in &self.subsystems {
            if sub.parent.is_some() {
                continue;
            }
            let h = sub.server_req.http().expect("server request carries http fields");
            servers
                .entry((h.dst_addr.clone(), h.dst_port, h.method.clone(), h.url.clone()))
                .or_default()
                .insert((sub.start_ns, sub.sockid, sub.id));
        }
        let mut calls: Vec<(i64, &str, i64, CallRef)> = Vec::new();
        for sub in &self.subsystems {
            for (k, call) in sub.calls.iter().enumerate() {
                if call.child.is_none() {
                    calls.push((
                        call.start_ns,
                        &sub.service,
                        call.sockid,
                        CallRef {
                            subsystem: sub.id,
                            call: k,
                        },
                    ));
                }
            }
        }
        calls.sort();
        let calls: Vec<(i64, CallRef)> = calls.into_iter().map(|(ts, _, _, c)| (ts, c)).collect();
        for (ts, call) in calls {
            let req = &self.subsystems[call.subsystem].calls[call.call].request;
            let h = req.http().expect("client request carries http fields");
            let tuple = (h.dst_addr.clone(), h.dst_port, h.method.clone(), h.url.clone());
            let target = servers.get_mut(&tuple).and_then(|set| {
                let found = set.range((ts, i64::MIN, 0)..).next().copied();
                if let Some(entry) = found {
                    set.remove(&entry);
                }
                found
            });
            match target {
                Some((_, _, child)) => {
                    self.subsystems[child].parent = Some(call);
                    self.subsystems[call.subsystem].calls[call.call].child = Some(child);
                }
                None => {
                    let event = req.clone();
                    self.orphan(event, OrphanReason::UnlinkedCall);
                }
            }
        }
    }

    /// Links calls, closes the history and assembles the span forest.
    pub fn finish(mut self) -> Result<Reconstruction, ReconstructError> {
        self.link_cross_service();
        let end = self.last_ts.max(self.sht.current_end());
        self.sht.close_history(end)?;
        let forest = build_span_forest(&self.subsystems);
        Ok(Reconstruction {
            subsystems: self.subsystems,
            sht: self.sht,
            orphans: self.orphans,
            forest,
        })
    }
}

/// Everything the analysis produced.
#[derive(Debug)]
pub struct Reconstruction {
    pub subsystems: Vec<RequestSubsystem>,
    pub sht: HistoryTree,
    pub orphans: Vec<Orphan>,
    pub forest: SpanForest,
}

/// Runs the analyzer over an already merged stream.
pub fn reconstruct<I>(events: I, config: ReconstructorConfig) -> Result<Reconstruction, ReconstructError>
where
    I: IntoIterator<Item = TraceEvent>,
{
    let mut analyzer = Analyzer::new(config);
    for ev in events {
        analyzer.process_event(ev)?;
    }
    analyzer.finish()
}

fn server_span(subs: &[RequestSubsystem], id: usize) -> SpanNode {
    let sub = &subs[id];
    let mut children: Vec<SpanNode> = Vec::with_capacity(sub.calls.len() + sub.redis.len());
    for call in &sub.calls {
        let h = call.request.http().expect("client request carries http fields");
        let grandchildren: Vec<SpanNode> = call.child.map(|c| server_span(subs, c)).into_iter().collect();
        let latest = grandchildren.iter().map(|g| g.end_ns).max().unwrap_or(call.start_ns);
        children.push(SpanNode {
            service: sub.service.clone(),
            operation: format!("{} {}", h.method, h.url),
            kind: SpanKind::Client,
            start_ns: call.start_ns,
            end_ns: call.end_ns.unwrap_or(latest),
            complete: call.end_ns.is_some(),
            sockid: Some(call.sockid),
            children: grandchildren,
        });
    }
    for leaf in &sub.redis {
        children.push(SpanNode {
            service: REDIS_SERVICE.to_string(),
            operation: format!("redis:{}", leaf.cmd),
            kind: SpanKind::Redis,
            start_ns: leaf.start_ns,
            end_ns: leaf.end_ns,
            complete: true,
            sockid: None,
            children: Vec::new(),
        });
    }
    children.sort_by_key(|c| c.start_ns);
    let latest = children.iter().map(|c| c.end_ns).max().unwrap_or(sub.start_ns);
    SpanNode {
        service: sub.service.clone(),
        operation: sub.operation(),
        kind: SpanKind::Server,
        start_ns: sub.start_ns,
        end_ns: sub.end_ns.unwrap_or(latest.max(sub.start_ns)),
        complete: sub.end_ns.is_some(),
        sockid: Some(sub.sockid),
        children,
    }
}

/// One root per subsystem without a parent call, ordered by start.
pub fn build_span_forest(subs: &[RequestSubsystem]) -> SpanForest {
    let mut roots: Vec<&RequestSubsystem> = subs.iter().filter(|s| s.parent.is_none()).collect();
    roots.sort_by(|a, b| {
        (a.start_ns, &a.service, a.sockid, a.id).cmp(&(b.start_ns, &b.service, b.sockid, b.id))
    });
    SpanForest {
        spans: roots.into_iter().map(|s| server_span(subs, s.id)).collect(),
    }
}

/// Subsystem state timeline per subsystem id, read back from the history.
pub fn state_timeline(rec: &Reconstruction, id: usize) -> Result<BTreeMap<i64, String>, ShtError> {
    let attr = rec.subsystems[id].sht_anchor.child("state")?;
    Ok(rec
        .sht
        .query_history(&attr)?
        .into_iter()
        .map(|iv| match iv.value {
            Value::Text(s) => (iv.start_ns, s),
            other => (iv.start_ns, format!("{other:?}")),
        })
        .collect())
}
