//! Text Gantt, JSON and SVG views of a span forest.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::span::{SpanForest, SpanKind, SpanNode};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("unsupported render format {0:?} (expected text, json or svg)")]
    UnsupportedFormat(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderFormat {
    TextGantt,
    Json,
    Svg,
}

impl FromStr for RenderFormat {
    type Err = RenderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" | "text_gantt" | "gantt" => Ok(RenderFormat::TextGantt),
            "json" => Ok(RenderFormat::Json),
            "svg" => Ok(RenderFormat::Svg),
            other => Err(RenderError::UnsupportedFormat(other.to_string())),
        }
    }
}

pub fn render(forest: &SpanForest, format: RenderFormat) -> String {
    match format {
        RenderFormat::TextGantt => text_gantt(forest),
        RenderFormat::Json => forest.to_json(),
        RenderFormat::Svg => svg(forest),
    }
}

/// Human-readable duration: `512ns`, `40.000us`, `18.234ms`, `1.500s`.
pub fn format_duration(ns: i64) -> String {
    let a = ns.unsigned_abs();
    let sign = if ns < 0 { "-" } else { "" };
    if a < 1_000 {
        format!("{sign}{a}ns")
    } else if a < 1_000_000 {
        format!("{sign}{:.3}us", a as f64 / 1e3)
    } else if a < 1_000_000_000 {
        format!("{sign}{:.3}ms", a as f64 / 1e6)
    } else {
        format!("{sign}{:.3}s", a as f64 / 1e9)
    }
}

const BAR_WIDTH: usize = 60;

struct Row<'a> {
    depth: usize,
    span: &'a SpanNode,
}

/// Server and redis spans become rows; client spans are not drawn on their
/// own, the downstream server row nests one level under the caller.
fn rows(root: &SpanNode) -> Vec<Row<'_>> {
    fn go<'a>(node: &'a SpanNode, depth: usize, out: &mut Vec<Row<'a>>) {
        let next = if node.kind == SpanKind::Client {
            depth
        } else {
            out.push(Row { depth, span: node });
            depth + 1
        };
        for child in &node.children {
            go(child, next, out);
        }
    }
    let mut out = Vec::new();
    go(root, 0, &mut out);
    out
}

fn text_gantt(forest: &SpanForest) -> String {
    let mut out = String::new();
    for (i, root) in forest.spans.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "request {}: {} {} total {}{}",
            i + 1,
            root.service,
            root.operation,
            format_duration(root.duration_ns()),
            if root.fully_complete() { "" } else { " (incomplete)" }
        );
        let rows = rows(root);
        let labels: Vec<String> = rows
            .iter()
            .map(|r| {
                format!(
                    "{}{} {} [{}..{}] {}",
                    "  ".repeat(r.depth),
                    r.span.service,
                    r.span.operation,
                    r.span.start_ns,
                    r.span.end_ns,
                    format_duration(r.span.duration_ns())
                )
            })
            .collect();
        let width = labels.iter().map(String::len).max().unwrap_or(0);
        let t0 = root.start_ns;
        let total = root.duration_ns().max(1) as i128;
        for (row, label) in rows.iter().zip(&labels) {
            let cell = |t: i64| -> i128 { ((t - t0) as i128 * BAR_WIDTH as i128) / total };
            let from = cell(row.span.start_ns).clamp(0, BAR_WIDTH as i128 - 1) as usize;
            let to = (cell(row.span.end_ns).clamp(0, BAR_WIDTH as i128) as usize).max(from + 1);
            let bar: String = (0..BAR_WIDTH)
                .map(|c| if c >= from && c < to { '#' } else { ' ' })
                .collect();
            let _ = writeln!(
                out,
                "{label:<width$} |{bar}|{}",
                if row.span.complete { "" } else { " incomplete" }
            );
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn svg(forest: &SpanForest) -> String {
    const LABEL: f64 = 140.0;
    const PLOT: f64 = 860.0;
    const LANE: f64 = 24.0;

    let mut lanes: Vec<&str> = Vec::new();
    let mut t0 = i64::MAX;
    let mut t1 = i64::MIN;
    for root in &forest.spans {
        root.walk(&mut |s, _| {
            if !lanes.contains(&s.service.as_str()) {
                lanes.push(&s.service);
            }
            t0 = t0.min(s.start_ns);
            t1 = t1.max(s.end_ns);
        });
    }
    if lanes.is_empty() {
        t0 = 0;
        t1 = 1;
    }
    let scale = PLOT / (t1 - t0).max(1) as f64;
    let height = LANE * lanes.len() as f64 + 20.0;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{height:.0}" font-family="monospace" font-size="11">"#,
        LABEL + PLOT + 10.0
    );
    for (i, lane) in lanes.iter().enumerate() {
        let y = i as f64 * LANE;
        let _ = writeln!(
            out,
            r#"<text x="4" y="{:.2}">{}</text>"#,
            y + 16.0,
            escape(lane)
        );
        let _ = writeln!(
            out,
            r##"<line x1="{LABEL}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#ddd"/>"##,
            y + LANE,
            LABEL + PLOT,
            y + LANE
        );
    }
    for root in &forest.spans {
        root.walk(&mut |s, _| {
            let lane = lanes.iter().position(|l| *l == s.service).unwrap_or(0) as f64;
            let (fill, inset) = match s.kind {
                SpanKind::Server => ("#4e79a7", 3.0),
                SpanKind::Client => ("#f28e2b", 8.0),
                SpanKind::Redis => ("#e15759", 3.0),
            };
            let x = LABEL + (s.start_ns - t0) as f64 * scale;
            let w = (s.duration_ns() as f64 * scale).max(1.0);
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{:.2}" width="{w:.2}" height="{:.2}" fill="{fill}"{}><title>{} {} {} [{}..{}] {}</title></rect>"#,
                lane * LANE + inset,
                LANE - 2.0 * inset,
                if s.complete { "" } else { r#" fill-opacity="0.4""# },
                escape(&s.service),
                s.kind,
                escape(&s.operation),
                s.start_ns,
                s.end_ns,
                format_duration(s.duration_ns())
            );
        });
    }
    let _ = writeln!(
        out,
        r#"<text x="{LABEL}" y="{:.2}">{} .. {}</text>"#,
        height - 4.0,
        t0,
        t1
    );
    out.push_str("</svg>\n");
    out
}
