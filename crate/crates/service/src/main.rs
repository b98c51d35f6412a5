use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use docstruct_core::eval::{match_detections, DetectionReport, EvalConfig};
use docstruct_core::incremental::ForgettingExperiment;
use docstruct_core::synth::{
    generate_indexed, simulate_set, GenConfig, GroundTruthDoc, NoiseConfig,
};
use docstruct_core::{structure, DocumentLayout, PipelineConfig, ProposalSet};
use docstruct_service::{http, Service, ServiceConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Document layout structuring: synthetic data, the geometric pipeline,
/// evaluation, incremental training experiments and the review service.
#[derive(Parser)]
#[command(name = "docstruct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ground-truth corpus (one page per line).
    Synth {
        #[arg(long, default_value_t = 10)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator settings as JSON; its seed is replaced by --seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: Output,
    },
    /// Turn ground-truth pages into noisy detector proposals.
    Simulate {
        /// Ground-truth JSONL, `-` for stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noise settings as JSON; its seed is replaced by --seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fragmentation: Option<f64>,
        #[arg(long)]
        jitter: Option<f64>,
        #[command(flatten)]
        out: Output,
    },
    /// Run the structuring pipeline on proposal sets.
    Structure {
        /// Proposal-set JSONL, `-` for stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        /// Replace region combination with plain NMS.
        #[arg(long)]
        no_combine: bool,
        #[command(flatten)]
        out: Output,
    },
    /// Score layouts against ground truth.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        /// Layout JSONL, matched to truth pages by page id.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 0.85)]
        iou: f64,
        #[command(flatten)]
        out: Output,
    },
    /// Base training, plain fine-tuning and incremental training on a
    /// synthetic cluster task; prints errors and loss histories.
    TrainIncr(TrainIncr),
    /// Start the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "DOCSTRUCT_DATA_DIR", default_value = "docstruct-data")]
        data_dir: PathBuf,
    },
}

#[derive(Args)]
struct Output {
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainIncr {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Experiment settings as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight of the distillation term.
    #[arg(long)]
    alpha: Option<f64>,
    /// Fraction of each batch drawn from the feedback set.
    #[arg(long)]
    p: Option<f64>,
    /// Weight of the classification term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Angular margin of the a-softmax head.
    #[arg(long)]
    m: Option<u32>,
    #[command(flatten)]
    out: Output,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f))
        .with_context(|| format!("parsing {}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader: Box<dyn BufRead> = if path == Path::new("-") {
        Box::new(BufReader::new(io::stdin()))
    } else {
        Box::new(BufReader::new(
            File::open(path).with_context(|| format!("opening {}", path.display()))?,
        ))
    };
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}: line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn writer(out: &Output) -> Result<Box<dyn Write>> {
    Ok(match &out.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn write_lines<T: Serialize>(out: &Output, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = writer(out)?;
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(out: &Output, value: &T) -> Result<()> {
    let mut w = writer(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth {
            count,
            seed,
            config,
            out,
        } => {
            let mut cfg: GenConfig = config
                .as_deref()
                .map(read_json)
                .transpose()?
                .unwrap_or_default();
            cfg.seed = seed;
            let docs = (0..count)
                .map(|i| generate_indexed(&cfg, i))
                .collect::<Result<Vec<_>, _>>()?;
            write_lines(&out, docs)
        }
        Command::Simulate {
            input,
            seed,
            config,
            fragmentation,
            jitter,
            out,
        } => {
            let mut noise: NoiseConfig = config
                .as_deref()
                .map(read_json)
                .transpose()?
                .unwrap_or_default();
            noise.seed = seed;
            if let Some(f) = fragmentation {
                noise.fragmentation_rate = f;
            }
            if let Some(j) = jitter {
                noise.jitter_sigma = j;
            }
            let docs: Vec<GroundTruthDoc> = read_jsonl(&input)?;
            let sets = docs
                .iter()
                .map(|d| simulate_set(d, &noise))
                .collect::<Result<Vec<_>, _>>()?;
            write_lines(&out, sets)
        }
        Command::Structure {
            input,
            no_combine,
            out,
        } => {
            let cfg = if no_combine {
                PipelineConfig::without_combination()
            } else {
                PipelineConfig::default()
            };
            let sets: Vec<ProposalSet> = read_jsonl(&input)?;
            let mut w = writer(&out)?;
            for s in &sets {
                // layouts have one canonical serialization
                w.write_all(structure(&s.page_id, &s.regions, &cfg).to_json().as_bytes())?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            Ok(())
        }
        Command::Eval {
            truth,
            pred,
            iou,
            out,
        } => {
            let cfg = EvalConfig::new(iou)?;
            let truth: Vec<GroundTruthDoc> = read_jsonl(&truth)?;
            let pred: Vec<DocumentLayout> = read_jsonl(&pred)?;
            let by_id: std::collections::HashMap<&str, &DocumentLayout> =
                pred.iter().map(|l| (l.page_id.as_str(), l)).collect();
            let mut missing = 0usize;
            let report: DetectionReport = truth
                .iter()
                .map(|t| {
                    let p = by_id
                        .get(t.page_id.as_str())
                        .map(|l| l.flatten(false))
                        .unwrap_or_else(|| {
                            missing += 1;
                            Vec::new()
                        });
                    match_detections(&p, &t.regions(), &cfg)
                })
                .collect();
            if missing > 0 {
                log::warn!("{missing} truth pages have no layout; scored as all misses");
            }
            let mut json = report.to_json();
            json["pages"] = truth.len().into();
            json["iou_threshold"] = iou.into();
            write_json(&out, &json)
        }
        Command::TrainIncr(args) => {
            let mut exp: ForgettingExperiment = args
                .config
                .as_deref()
                .map(read_json)
                .transpose()?
                .unwrap_or_default();
            exp.task.seed = args.seed;
            exp.base.seed = args.seed;
            exp.update.seed = args.seed;
            if let Some(a) = args.alpha {
                exp.update.alpha = a;
            }
            if let Some(p) = args.p {
                exp.update.new_data_rate = p;
            }
            if let Some(l) = args.lambda {
                exp.base.lambda = l;
                exp.update.lambda = l;
            }
            if let Some(m) = args.m {
                exp.base.margin = m;
                exp.update.margin = m;
            }
            let report = exp.run()?;
            write_json(
                &args.out,
                &serde_json::json!({"settings": exp, "report": report}),
            )
        }
        Command::Serve { addr, data_dir } => {
            let svc = Arc::new(Service::open(ServiceConfig::new(&data_dir))?);
            log::info!("data directory {}", data_dir.display());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                log::info!("listening on {addr}");
                axum::serve(listener, http::router(svc.clone()))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
            svc.snapshot()?;
            log::info!("shut down cleanly");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
        assert!(Cli::try_parse_from(["docstruct", "synth", "--count", "x"]).is_err());
        assert!(Cli::try_parse_from(["docstruct", "structure", "--no-combine"]).is_ok());
    }
}
