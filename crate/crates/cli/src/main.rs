use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;

use vspan_core::analysis;
use vspan_core::aggregate;
use vspan_core::reconstruct::{orphans_to_json, ReconstructorConfig};
use vspan_core::render::{render, RenderError, RenderFormat};
use vspan_core::sim::{self, Noise, Workload};
use vspan_core::span::SpanForest;
use vspan_core::verify;

#[derive(Parser, Debug)]
#[command(name = "vspan", version, about = "Rebuild request spans from raw runtime traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a topology and write an experiment directory.
    Simulate {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        requests: usize,
        #[arg(long, default_value_t = 5.0)]
        mean_ms: f64,
        #[arg(long, default_value_t = 1.0)]
        stddev_ms: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Allocator gaps and decoy async records.
        #[arg(long)]
        noise: bool,
        /// Probability of losing each event.
        #[arg(long, default_value_t = 0.0)]
        drop_rate: f64,
        /// Local clock skews, e.g. `user=+3ms,auth=-250us`.
        #[arg(long)]
        skew: Option<String>,
    },
    /// Merge and reconstruct an experiment into spans.json.
    Analyze {
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        orphans: Option<PathBuf>,
        #[arg(long)]
        dump_sht: Option<PathBuf>,
        #[arg(long)]
        dump_merged: Option<PathBuf>,
        /// Track several outgoing calls per request.
        #[arg(long)]
        fanout: bool,
    },
    /// Draw spans as a text Gantt, SVG or JSON.
    Render {
        #[arg(long)]
        spans: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
        /// Standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latency breakdown, critical path and service graph as JSON.
    Stats {
        #[arg(long)]
        spans: PathBuf,
    },
    /// Reconstruct an experiment and compare it with its ground truth.
    Verify {
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        fanout: bool,
    },
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Mismatch,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VSPAN_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Mismatch) => ExitCode::from(3),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    let file = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// A closed pipe on the reading side is not an error.
fn print_stdout(text: &str) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e).context("writing standard output"),
        _ => Ok(()),
    }
}

fn read_spans(path: &Path) -> anyhow::Result<SpanForest> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    SpanForest::from_json(&text).with_context(|| format!("{} is not a spans document", path.display()))
}

fn config(fanout: bool) -> ReconstructorConfig {
    ReconstructorConfig {
        fanout_calls: fanout,
        ..ReconstructorConfig::default()
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate {
            topology,
            requests,
            mean_ms,
            stddev_ms,
            seed,
            out,
            noise,
            drop_rate,
            skew,
        } => {
            if !(0.0..=1.0).contains(&drop_rate) {
                return Err(Failure::Usage("--drop-rate must be within [0, 1]".into()));
            }
            let skew = match skew {
                Some(spec) => sim::parse_skew(&spec).map_err(Failure::Usage)?,
                None => Default::default(),
            };
            let topo = sim::load_topology(&topology).map_err(anyhow::Error::from)?;
            let wl = Workload::for_topology(&topo, requests, mean_ms * 1e6, stddev_ms * 1e6, seed);
            let mut model = if noise { Noise::decoys() } else { Noise::default() };
            model.drop_rate = drop_rate;
            let output = sim::simulate(&topo, &wl, &model).map_err(|e| match e {
                sim::SimError::InvalidWorkload(m) => Failure::Usage(m),
                other => Failure::Data(other.into()),
            })?;
            output.write_experiment(&out, &skew).map_err(anyhow::Error::from)?;
            info!(
                "wrote {} events for {} requests to {}",
                output.event_count(),
                requests,
                out.display()
            );
        }
        Command::Analyze {
            experiment,
            out,
            orphans,
            dump_sht,
            dump_merged,
            fanout,
        } => {
            let (merged, rec) =
                verify::analyze_experiment(&experiment, config(fanout)).map_err(anyhow::Error::from)?;
            write_text(&out, &rec.forest.to_json())?;
            if let Some(path) = orphans {
                write_text(&path, &orphans_to_json(&rec.orphans))?;
            }
            if let Some(path) = dump_sht {
                let mut w = create(&path)?;
                rec.sht.dump_jsonl(&mut w).and_then(|_| w.flush()).context("writing history dump")?;
            }
            if let Some(path) = dump_merged {
                let mut w = create(&path)?;
                aggregate::write_merged(&mut w, &merged)
                    .and_then(|_| w.flush())
                    .context("writing merged stream")?;
            }
            info!(
                "{} events, {} root spans, {} orphans",
                merged.len(),
                rec.forest.spans.len(),
                rec.orphans.len()
            );
        }
        Command::Render { spans, format, out } => {
            let format: RenderFormat = format.parse().map_err(|e: RenderError| Failure::Usage(e.to_string()))?;
            let forest = read_spans(&spans)?;
            let text = render(&forest, format);
            match out {
                Some(path) => write_text(&path, &text)?,
                None => print_stdout(&text)?,
            }
        }
        Command::Stats { spans } => {
            let forest = read_spans(&spans)?;
            let stats = analysis::forest_stats(&forest);
            let text = serde_json::to_string_pretty(&stats).context("serializing stats")?;
            print_stdout(&(text + "\n"))?;
        }
        Command::Verify { experiment, fanout } => {
            let report = verify::verify_experiment(&experiment, config(fanout)).map_err(anyhow::Error::from)?;
            print_stdout(&format!(
                "{}/{} requests matched ({:.1}%), {} roots reconstructed\n",
                report.matched,
                report.total,
                report.percent(),
                report.reconstructed_roots
            ))?;
            if !report.is_exact() {
                eprintln!("{} requests unmatched", report.total - report.matched);
                return Err(Failure::Mismatch);
            }
        }
    }
    Ok(())
}
