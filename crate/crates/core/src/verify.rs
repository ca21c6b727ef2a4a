//! Whole-pipeline helpers and the comparison of a reconstructed forest with
//! the simulator's ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::aggregate::{self, AggregateError};
use crate::event::TraceEvent;
use crate::reconstruct::{self, ReconstructError, Reconstruction, ReconstructorConfig};
use crate::sim::{self, GroundTruth, SimError, TruthSpan};
use crate::span::{SpanForest, SpanKind, SpanNode};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
    #[error("ground truth: {0}")]
    GroundTruth(#[from] SimError),
}

/// Loads, merges and reconstructs an experiment directory.
pub fn analyze_experiment(dir: &Path, config: ReconstructorConfig) -> Result<(Vec<TraceEvent>, Reconstruction), PipelineError> {
    let exp = aggregate::load_experiment(dir)?;
    let merged = aggregate::merge_streams(exp)?;
    let rec = reconstruct::reconstruct(merged.iter().cloned(), config)?;
    Ok((merged, rec))
}

/// Span tree with client spans folded away, so a caller's server span
/// directly holds the downstream server span. Children are ordered.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CanonicalSpan {
    pub start_ns: i64,
    pub end_ns: i64,
    pub service: String,
    pub kind: SpanKind,
    pub operation: String,
    pub sockid: Option<i64>,
    pub complete: bool,
    pub children: Vec<CanonicalSpan>,
}

impl CanonicalSpan {
    pub fn from_span(span: &SpanNode) -> Vec<CanonicalSpan> {
        if span.kind == SpanKind::Client {
            let mut out: Vec<CanonicalSpan> = span.children.iter().flat_map(CanonicalSpan::from_span).collect();
            out.sort();
            return out;
        }
        let mut children: Vec<CanonicalSpan> = span.children.iter().flat_map(CanonicalSpan::from_span).collect();
        children.sort();
        vec![CanonicalSpan {
            start_ns: span.start_ns,
            end_ns: span.end_ns,
            service: span.service.clone(),
            kind: span.kind,
            operation: span.operation.clone(),
            sockid: span.sockid,
            complete: span.complete,
            children,
        }]
    }

    pub fn from_truth(span: &TruthSpan) -> CanonicalSpan {
        let mut children: Vec<CanonicalSpan> = span.children.iter().map(CanonicalSpan::from_truth).collect();
        children.sort();
        CanonicalSpan {
            start_ns: span.start_ns,
            end_ns: span.end_ns,
            service: span.service.clone(),
            kind: span.kind,
            operation: span.operation.clone(),
            sockid: span.sockid,
            complete: true,
            children,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub total: usize,
    pub matched: usize,
    pub reconstructed_roots: usize,
    /// Ground-truth request indices without an identical reconstructed tree.
    pub unmatched: Vec<usize>,
}

impl VerifyReport {
    /// Every request matched and nothing extra was reconstructed.
    pub fn is_exact(&self) -> bool {
        self.matched == self.total && self.reconstructed_roots == self.total
    }

    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            100.0
        } else {
            100.0 * self.matched as f64 / self.total as f64
        }
    }
}

/// Multiset comparison of root trees: each ground-truth request consumes
/// one identical reconstructed root.
pub fn compare(forest: &SpanForest, truth: &GroundTruth) -> VerifyReport {
    let mut pool: BTreeMap<CanonicalSpan, usize> = BTreeMap::new();
    let mut reconstructed_roots = 0;
    for root in &forest.spans {
        for c in CanonicalSpan::from_span(root) {
            reconstructed_roots += 1;
            *pool.entry(c).or_default() += 1;
        }
    }
    let mut unmatched = Vec::new();
    for (i, req) in truth.requests.iter().enumerate() {
        match pool.get_mut(&CanonicalSpan::from_truth(&req.root)) {
            Some(n) if *n > 0 => *n -= 1,
            _ => unmatched.push(i),
        }
    }
    VerifyReport {
        total: truth.requests.len(),
        matched: truth.requests.len() - unmatched.len(),
        reconstructed_roots,
        unmatched,
    }
}

/// Reconstructs `dir` and compares it with the ground truth stored there.
pub fn verify_experiment(dir: &Path, config: ReconstructorConfig) -> Result<VerifyReport, PipelineError> {
    let truth = sim::read_ground_truth(dir)?;
    let (_, rec) = analyze_experiment(dir, config)?;
    Ok(compare(&rec.forest, &truth))
}
