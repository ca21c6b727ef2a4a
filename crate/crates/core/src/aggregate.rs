//! Experiment loading: per-container trace files are read, shifted by their
//! declared clock offsets and merged into a single time-ordered stream.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::event::{self, TraceEvent, TraceFileError, TraceHeader};

#[derive(Debug, thiserror::Error)]
pub enum AggregateError {
    #[error("timestamp {ts} with clock offset {offset_ns} overflows")]
    OverflowedTimestamp { ts: i64, offset_ns: i64 },
    #[error("no *.trace files in {0}")]
    EmptyExperiment(PathBuf),
    #[error("cannot list {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{file}: {source}")]
    File { file: String, source: TraceFileError },
    #[error("{file}: events out of timestamp order at position {position}")]
    UnsortedFile { file: String, position: usize },
}

/// One trace file after its clock offset has been applied to every event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadedTrace {
    pub file_name: String,
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Experiment {
    pub traces: Vec<LoadedTrace>,
    /// Earliest adjusted timestamp in the experiment (0 when it holds no events).
    pub epoch_ns: i64,
    pub merged_count: usize,
}

impl Experiment {
    pub fn from_traces(traces: Vec<LoadedTrace>) -> Self {
        let merged_count = traces.iter().map(|t| t.events.len()).sum();
        let epoch_ns = traces
            .iter()
            .filter_map(|t| t.events.first().map(|e| e.ts))
            .min()
            .unwrap_or(0);
        Experiment {
            traces,
            epoch_ns,
            merged_count,
        }
    }
}

pub fn apply_clock_offset(mut ev: TraceEvent, offset_ns: i64) -> Result<TraceEvent, AggregateError> {
    ev.ts = ev
        .ts
        .checked_add(offset_ns)
        .ok_or(AggregateError::OverflowedTimestamp {
            ts: ev.ts,
            offset_ns,
        })?;
    Ok(ev)
}

/// Reads one trace file and applies the offset declared in its header.
pub fn load_trace(path: &Path) -> Result<LoadedTrace, AggregateError> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parsed = event::read_trace_file(path).map_err(|source| AggregateError::File {
        file: file_name.clone(),
        source,
    })?;
    let offset = parsed.header.clock_offset_ns;
    let events = parsed
        .events
        .into_iter()
        .map(|ev| apply_clock_offset(ev, offset))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LoadedTrace {
        file_name,
        header: parsed.header,
        events,
    })
}

/// Lists the `*.trace` files of an experiment directory in name order.
pub fn trace_files(dir: &Path) -> Result<Vec<PathBuf>, AggregateError> {
    let io_err = |source| AggregateError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.is_file() && path.extension().is_some_and(|ext| ext == "trace") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_experiment(dir: impl AsRef<Path>) -> Result<Experiment, AggregateError> {
    let dir = dir.as_ref();
    let files = trace_files(dir)?;
    if files.is_empty() {
        return Err(AggregateError::EmptyExperiment(dir.to_path_buf()));
    }
    let traces = files
        .iter()
        .map(|path| load_trace(path))
        .collect::<Result<Vec<_>, _>>()?;
    log::debug!(
        "loaded {} trace files from {}",
        traces.len(),
        dir.display()
    );
    Ok(Experiment::from_traces(traces))
}

/// K-way merge over the per-file streams. Ties on timestamp are broken by
/// service name, then by position inside the file, then by file order.
pub struct MergedStream {
    sources: Vec<std::vec::IntoIter<TraceEvent>>,
    heads: Vec<Option<TraceEvent>>,
    positions: Vec<usize>,
    file_names: Vec<String>,
    service_rank: HashMap<String, u32>,
    heap: BinaryHeap<Reverse<(i64, u32, usize, usize)>>,
}

impl MergedStream {
    pub fn new(exp: Experiment) -> Self {
        let names: BTreeSet<&str> = exp
            .traces
            .iter()
            .flat_map(|t| t.events.iter().map(|e| e.service.as_str()))
            .collect();
        let service_rank: HashMap<String, u32> = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), i as u32))
            .collect();
        let n = exp.traces.len();
        let mut stream = MergedStream {
            sources: Vec::with_capacity(n),
            heads: Vec::with_capacity(n),
            positions: vec![0; n],
            file_names: Vec::with_capacity(n),
            service_rank,
            heap: BinaryHeap::with_capacity(n),
        };
        for (idx, trace) in exp.traces.into_iter().enumerate() {
            stream.file_names.push(trace.file_name);
            stream.sources.push(trace.events.into_iter());
            stream.heads.push(None);
            stream.refill(idx);
        }
        stream
    }

    fn refill(&mut self, idx: usize) {
        if let Some(ev) = self.sources[idx].next() {
            let rank = self.service_rank[&ev.service];
            self.heap
                .push(Reverse((ev.ts, rank, self.positions[idx], idx)));
            self.positions[idx] += 1;
            self.heads[idx] = Some(ev);
        }
    }
}

impl Iterator for MergedStream {
    type Item = Result<TraceEvent, AggregateError>;

    fn next(&mut self) -> Option<Self::Item> {
        let Reverse((ts, _, _, idx)) = self.heap.pop()?;
        let ev = self.heads[idx].take().expect("heap entry has a head event");
        self.refill(idx);
        if let Some(next) = &self.heads[idx] {
            if next.ts < ts {
                let err = AggregateError::UnsortedFile {
                    file: self.file_names[idx].clone(),
                    position: self.positions[idx] - 1,
                };
                self.heap.clear();
                return Some(Err(err));
            }
        }
        Some(Ok(ev))
    }
}

pub fn merge_streams(exp: Experiment) -> Result<Vec<TraceEvent>, AggregateError> {
    let count = exp.merged_count;
    let mut out = Vec::with_capacity(count);
    for ev in MergedStream::new(exp) {
        out.push(ev?);
    }
    debug_assert_eq!(out.len(), count);
    Ok(out)
}

/// Writes a merged stream in the trace line format, under a synthetic header.
pub fn write_merged<W: Write>(out: W, events: &[TraceEvent]) -> io::Result<()> {
    event::write_trace(out, &TraceHeader::new("merged", "aggregate", 0), events)
}
