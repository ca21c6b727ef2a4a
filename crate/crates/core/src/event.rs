//! Trace event vocabulary and the line-oriented trace file format.
//!
//! A trace file is UTF-8 text. The first line is a header object, every
//! following line holds exactly one event object:
//!
//! ```text
//! {"format":"vspan-trace/1","service":"gateway","host":"c1","clock_offset_ns":0}
//! {"ts":1000,"service":"gateway","host":"c1","name":"http_server_request","fields":{...}}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Format tag carried by every trace file header.
pub const FORMAT_TAG: &str = "vspan-trace/1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EventError {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("unknown event name `{0}`")]
    UnknownEventName(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{field}` out of range: {value}")]
    FieldOutOfRange { field: String, value: String },
}

impl EventError {
    fn out_of_range(field: &str, value: impl fmt::Display) -> Self {
        EventError::FieldOutOfRange {
            field: field.to_string(),
            value: value.to_string(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("missing trace header")]
    MissingHeader,
    #[error("invalid trace header: {0}")]
    BadHeader(String),
    #[error("events out of timestamp order at line {line}")]
    UnsortedFile { line: usize },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: EventError },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventName {
    HttpServerRequest,
    HttpServerResponse,
    HttpClientRequest,
    HttpClientResponse,
    AsyncContext,
    RedisCommand,
}

impl EventName {
    pub const ALL: [EventName; 6] = [
        EventName::HttpServerRequest,
        EventName::HttpServerResponse,
        EventName::HttpClientRequest,
        EventName::HttpClientResponse,
        EventName::AsyncContext,
        EventName::RedisCommand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventName::HttpServerRequest => "http_server_request",
            EventName::HttpServerResponse => "http_server_response",
            EventName::HttpClientRequest => "http_client_request",
            EventName::HttpClientResponse => "http_client_response",
            EventName::AsyncContext => "async_context",
            EventName::RedisCommand => "redis_command",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }

    pub fn is_http(self) -> bool {
        !matches!(self, EventName::AsyncContext | EventName::RedisCommand)
    }

    pub fn is_response(self) -> bool {
        matches!(
            self,
            EventName::HttpServerResponse | EventName::HttpClientResponse
        )
    }
}

impl fmt::Display for EventName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fields shared by the four HTTP tracepoints. `status` is only carried by
/// responses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpPayload {
    pub method: String,
    pub url: String,
    pub src_addr: String,
    pub src_port: i64,
    pub dst_addr: String,
    pub dst_port: i64,
    /// Async-resource id of the socket the message travels on.
    pub sockid: i64,
    pub status: Option<i64>,
}

/// One async resource lifecycle record emitted by the runtime.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsyncContextPayload {
    pub async_id: i64,
    /// Id of the parent or triggering execution context.
    pub ctx_id: i64,
    /// Lifecycle phase ("after", "constructor") or resource type ("TCPWRAP", ...).
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RedisCommandPayload {
    pub cmd: String,
    pub key: String,
    pub duration_us: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    ServerRequest(HttpPayload),
    ServerResponse(HttpPayload),
    ClientRequest(HttpPayload),
    ClientResponse(HttpPayload),
    AsyncContext(AsyncContextPayload),
    RedisCommand(RedisCommandPayload),
}

impl Payload {
    pub fn name(&self) -> EventName {
        match self {
            Payload::ServerRequest(_) => EventName::HttpServerRequest,
            Payload::ServerResponse(_) => EventName::HttpServerResponse,
            Payload::ClientRequest(_) => EventName::HttpClientRequest,
            Payload::ClientResponse(_) => EventName::HttpClientResponse,
            Payload::AsyncContext(_) => EventName::AsyncContext,
            Payload::RedisCommand(_) => EventName::RedisCommand,
        }
    }
}

/// One timestamped tracepoint record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub ts: i64,
    pub service: String,
    pub host: String,
    pub payload: Payload,
    /// Unrecognised keys found inside `fields`; kept for round trips.
    pub extra: BTreeMap<String, Value>,
}

impl TraceEvent {
    pub fn new(ts: i64, service: impl Into<String>, host: impl Into<String>, payload: Payload) -> Self {
        TraceEvent {
            ts,
            service: service.into(),
            host: host.into(),
            payload,
            extra: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> EventName {
        self.payload.name()
    }

    pub fn http(&self) -> Option<&HttpPayload> {
        match &self.payload {
            Payload::ServerRequest(p)
            | Payload::ServerResponse(p)
            | Payload::ClientRequest(p)
            | Payload::ClientResponse(p) => Some(p),
            _ => None,
        }
    }

    pub fn async_context(&self) -> Option<&AsyncContextPayload> {
        match &self.payload {
            Payload::AsyncContext(p) => Some(p),
            _ => None,
        }
    }

    pub fn redis(&self) -> Option<&RedisCommandPayload> {
        match &self.payload {
            Payload::RedisCommand(p) => Some(p),
            _ => None,
        }
    }

    pub fn sockid(&self) -> Option<i64> {
        self.http().map(|p| p.sockid)
    }

    /// Serializes to one line of the trace format (no trailing newline).
    pub fn to_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            ts: i64,
            service: &'a str,
            host: &'a str,
            name: &'static str,
            fields: Map<String, Value>,
        }
        let mut fields = Map::new();
        for (k, v) in &self.extra {
            fields.insert(k.clone(), v.clone());
        }
        match &self.payload {
            Payload::ServerRequest(p)
            | Payload::ServerResponse(p)
            | Payload::ClientRequest(p)
            | Payload::ClientResponse(p) => {
                fields.insert("method".into(), p.method.clone().into());
                fields.insert("url".into(), p.url.clone().into());
                fields.insert("src_addr".into(), p.src_addr.clone().into());
                fields.insert("src_port".into(), p.src_port.into());
                fields.insert("dst_addr".into(), p.dst_addr.clone().into());
                fields.insert("dst_port".into(), p.dst_port.into());
                fields.insert("sockid".into(), p.sockid.into());
                if let Some(status) = p.status {
                    fields.insert("status".into(), status.into());
                }
            }
            Payload::AsyncContext(p) => {
                fields.insert("async_id".into(), p.async_id.into());
                fields.insert("ctx_id".into(), p.ctx_id.into());
                fields.insert("kind".into(), p.kind.clone().into());
            }
            Payload::RedisCommand(p) => {
                fields.insert("cmd".into(), p.cmd.clone().into());
                fields.insert("key".into(), p.key.clone().into());
                fields.insert("duration_us".into(), p.duration_us.into());
            }
        }
        let line = Line {
            ts: self.ts,
            service: &self.service,
            host: &self.host,
            name: self.name().as_str(),
            fields,
        };
        serde_json::to_string(&line).expect("event serialization is infallible")
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLine {
    ts: Option<i64>,
    service: Option<String>,
    host: Option<String>,
    name: Option<String>,
    fields: Option<Map<String, Value>>,
}

fn take_str(fields: &mut Map<String, Value>, key: &str) -> Result<String, EventError> {
    match fields.remove(key) {
        None | Some(Value::Null) => Err(EventError::MissingField(key.to_string())),
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(EventError::MalformedLine(format!(
            "field `{key}` must be a string, got {other}"
        ))),
    }
}

fn take_int(fields: &mut Map<String, Value>, key: &str) -> Result<i64, EventError> {
    match fields.remove(key) {
        None | Some(Value::Null) => Err(EventError::MissingField(key.to_string())),
        Some(Value::Number(n)) => n.as_i64().ok_or_else(|| EventError::out_of_range(key, n)),
        Some(other) => Err(EventError::MalformedLine(format!(
            "field `{key}` must be an integer, got {other}"
        ))),
    }
}

fn take_http(fields: &mut Map<String, Value>, response: bool) -> Result<HttpPayload, EventError> {
    Ok(HttpPayload {
        method: take_str(fields, "method")?,
        url: take_str(fields, "url")?,
        src_addr: take_str(fields, "src_addr")?,
        src_port: take_int(fields, "src_port")?,
        dst_addr: take_str(fields, "dst_addr")?,
        dst_port: take_int(fields, "dst_port")?,
        sockid: take_int(fields, "sockid")?,
        status: if response {
            Some(take_int(fields, "status")?)
        } else {
            None
        },
    })
}

/// Parses and validates one event line.
pub fn parse_event_line(line: &str) -> Result<TraceEvent, EventError> {
    let raw: RawLine =
        serde_json::from_str(line).map_err(|e| EventError::MalformedLine(e.to_string()))?;
    let ts = raw.ts.ok_or_else(|| EventError::MissingField("ts".into()))?;
    let service = raw
        .service
        .ok_or_else(|| EventError::MissingField("service".into()))?;
    let host = raw.host.ok_or_else(|| EventError::MissingField("host".into()))?;
    let name_text = raw.name.ok_or_else(|| EventError::MissingField("name".into()))?;
    let mut fields = raw
        .fields
        .ok_or_else(|| EventError::MissingField("fields".into()))?;
    let name =
        EventName::parse(&name_text).ok_or(EventError::UnknownEventName(name_text))?;

    let payload = match name {
        EventName::HttpServerRequest => Payload::ServerRequest(take_http(&mut fields, false)?),
        EventName::HttpServerResponse => Payload::ServerResponse(take_http(&mut fields, true)?),
        EventName::HttpClientRequest => Payload::ClientRequest(take_http(&mut fields, false)?),
        EventName::HttpClientResponse => Payload::ClientResponse(take_http(&mut fields, true)?),
        EventName::AsyncContext => Payload::AsyncContext(AsyncContextPayload {
            async_id: take_int(&mut fields, "async_id")?,
            ctx_id: take_int(&mut fields, "ctx_id")?,
            kind: take_str(&mut fields, "kind")?,
        }),
        EventName::RedisCommand => Payload::RedisCommand(RedisCommandPayload {
            cmd: take_str(&mut fields, "cmd")?,
            key: take_str(&mut fields, "key")?,
            duration_us: take_int(&mut fields, "duration_us")?,
        }),
    };
    let ev = TraceEvent {
        ts,
        service,
        host,
        payload,
        extra: fields.into_iter().collect(),
    };
    validate_event(&ev)?;
    Ok(ev)
}

fn require_text(field: &str, value: &str) -> Result<(), EventError> {
    if value.is_empty() {
        Err(EventError::MissingField(field.to_string()))
    } else {
        Ok(())
    }
}

fn validate_http(p: &HttpPayload, response: bool) -> Result<(), EventError> {
    require_text("method", &p.method)?;
    require_text("url", &p.url)?;
    for (field, addr) in [("src_addr", &p.src_addr), ("dst_addr", &p.dst_addr)] {
        require_text(field, addr)?;
        if addr.parse::<Ipv4Addr>().is_err() {
            return Err(EventError::out_of_range(field, addr));
        }
    }
    for (field, port) in [("src_port", p.src_port), ("dst_port", p.dst_port)] {
        if !(1..=65535).contains(&port) {
            return Err(EventError::out_of_range(field, port));
        }
    }
    if p.sockid <= 0 {
        return Err(EventError::out_of_range("sockid", p.sockid));
    }
    match (response, p.status) {
        (true, Some(status)) if (100..=599).contains(&status) => Ok(()),
        (true, Some(status)) => Err(EventError::out_of_range("status", status)),
        (true, None) => Err(EventError::MissingField("status".into())),
        (false, Some(status)) => Err(EventError::out_of_range("status", status)),
        (false, None) => Ok(()),
    }
}

/// Checks every invariant of the event and its payload.
pub fn validate_event(ev: &TraceEvent) -> Result<(), EventError> {
    if ev.ts < 0 {
        return Err(EventError::out_of_range("ts", ev.ts));
    }
    require_text("service", &ev.service)?;
    require_text("host", &ev.host)?;
    match &ev.payload {
        Payload::ServerRequest(p) | Payload::ClientRequest(p) => validate_http(p, false),
        Payload::ServerResponse(p) | Payload::ClientResponse(p) => validate_http(p, true),
        Payload::AsyncContext(p) => {
            if p.async_id <= 0 {
                return Err(EventError::out_of_range("async_id", p.async_id));
            }
            if p.ctx_id < 0 {
                return Err(EventError::out_of_range("ctx_id", p.ctx_id));
            }
            require_text("kind", &p.kind)
        }
        Payload::RedisCommand(p) => {
            require_text("cmd", &p.cmd)?;
            if p.duration_us < 0 {
                return Err(EventError::out_of_range("duration_us", p.duration_us));
            }
            Ok(())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub service: String,
    pub host: String,
    pub clock_offset_ns: i64,
}

impl TraceHeader {
    pub fn new(service: impl Into<String>, host: impl Into<String>, clock_offset_ns: i64) -> Self {
        TraceHeader {
            format: FORMAT_TAG.to_string(),
            service: service.into(),
            host: host.into(),
            clock_offset_ns,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("header serialization is infallible")
    }

    pub fn parse(line: &str) -> Result<Self, TraceFileError> {
        let value: Value = serde_json::from_str(line).map_err(|_| TraceFileError::MissingHeader)?;
        if value.get("format").is_none() {
            return Err(TraceFileError::MissingHeader);
        }
        let header: TraceHeader = serde_json::from_value(value)
            .map_err(|e| TraceFileError::BadHeader(e.to_string()))?;
        if header.format != FORMAT_TAG {
            return Err(TraceFileError::BadHeader(format!(
                "unsupported format `{}`",
                header.format
            )));
        }
        Ok(header)
    }
}

/// A parsed trace file. Events keep file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

/// Reads a trace from any buffered reader. Blank lines are skipped; a
/// timestamp inversion is reported, never repaired.
pub fn read_trace<R: BufRead>(reader: R) -> Result<TraceFile, TraceFileError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        None => return Err(TraceFileError::MissingHeader),
        Some(line) => TraceHeader::parse(&line?)?,
    };
    let mut events = Vec::new();
    let mut last_ts = i64::MIN;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = parse_event_line(&line).map_err(|source| TraceFileError::Parse {
            line: line_no,
            source,
        })?;
        if ev.ts < last_ts {
            return Err(TraceFileError::UnsortedFile { line: line_no });
        }
        last_ts = ev.ts;
        events.push(ev);
    }
    Ok(TraceFile { header, events })
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<TraceFile, TraceFileError> {
    let file = File::open(path)?;
    read_trace(BufReader::new(file))
}

pub fn write_trace<W: Write>(
    mut out: W,
    header: &TraceHeader,
    events: &[TraceEvent],
) -> io::Result<()> {
    writeln!(out, "{}", header.to_line())?;
    for ev in events {
        writeln!(out, "{}", ev.to_line())?;
    }
    out.flush()
}
