//! `tad` command line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tad_core::curation::{CommandHook, CurationStore, DatasetManifest, ModelComposition, ReviewVerdict, Verdict};
use tad_core::evaluation::{
    alarm_series, average_precision, categorize, Bucket, GroundTruthFrame, OutcomeCount, DEFAULT_MATCH_IOU,
};
use tad_core::incidents::{EventType, IncidentEvent};
use tad_core::simulation::{run_closed_loop, LoopConfig, ScenarioSuite};
use tad_core::{Detection, ObjectClass};

use crate::config::{resolve_config_path, PipelineConfig, SourceConfig, TrainerConfig, CONFIG_ENV};
use crate::ingest::DetectionRecord;
use crate::pipeline::run_pipeline;
use crate::store::{EventFilter, EventStore, ReviewStatus};

#[derive(Debug, Parser)]
#[command(name = "tad", version, about = "Tunnel CCTV incident detection")]
pub struct Cli {
    /// Pipeline config (JSON). The TAD_CONFIG environment variable wins over this flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Event store directory, overriding the config.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run detection records (JSON lines) through tracking and the incident rules.
    Track {
        /// Input file, or `-` for stdin. Defaults to the configured source.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// List stored events.
    Events(EventArgs),
    /// File a review verdict on an event.
    Verdict {
        id: u64,
        #[arg(long, value_parser = parse_verdict)]
        verdict: Verdict,
        #[arg(long)]
        negative_class: Option<ObjectClass>,
        #[arg(long)]
        reviewer: String,
    },
    /// Alarm counts per hour or day.
    Alarms {
        #[arg(long, default_value = "day")]
        bucket: Bucket,
        #[arg(long = "type")]
        event_type: Option<EventType>,
        #[arg(long)]
        channel: Option<String>,
    },
    /// Score detections against ground truth.
    Evaluate {
        /// Detection records, JSON lines.
        #[arg(long)]
        detections: PathBuf,
        /// Ground-truth frames, JSON lines.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MATCH_IOU)]
        iou: f64,
    },
    /// Manage manifests and models.
    #[command(subcommand)]
    Curate(CurateCommand),
    /// Run the simulated self-enhancement loop and print its report.
    Simulate {
        #[arg(long, default_value_t = 2)]
        rounds: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Serve the review API.
    Serve {
        /// Listen address, overriding the config.
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct EventArgs {
    #[arg(long)]
    pub status: Option<ReviewStatus>,
    #[arg(long = "type")]
    pub event_type: Option<EventType>,
    #[arg(long)]
    pub channel: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub page: usize,
    #[arg(long, default_value_t = 50)]
    pub per_page: usize,
}

#[derive(Debug, Subcommand)]
pub enum CurateCommand {
    /// Register a dataset manifest file.
    Register { manifest: PathBuf },
    /// Train and register a first model on the named manifests.
    Baseline {
        #[arg(required = true)]
        manifests: Vec<String>,
    },
    /// Retrain on the reviewed false positives of the event store.
    Round {
        /// Model to improve; defaults to the latest.
        #[arg(long)]
        model: Option<String>,
    },
    /// Print the training set of a model, optionally writing its manifest.
    Compose {
        model: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List registered models.
    Models,
    /// List registered manifests with their class counts.
    Manifests,
}

fn parse_verdict(s: &str) -> Result<Verdict, String> {
    match s {
        "tp" | "true_positive" => Ok(Verdict::TruePositive),
        "fp" | "false_positive" => Ok(Verdict::FalsePositive),
        _ => Err(format!("unknown verdict `{s}` (expected tp or fp)")),
    }
}

/// Loads the config. A missing default `tad.json` is tolerated when no
/// path was given explicitly.
pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let explicit = std::env::var_os(CONFIG_ENV).is_some_and(|v| !v.is_empty()) || cli.config.is_some();
    let path = resolve_config_path(cli.config.as_deref());
    let mut cfg = if !explicit && !path.exists() {
        PipelineConfig::new("tad-store")
    } else {
        PipelineConfig::load(&path)?
    };
    if let Some(s) = &cli.store {
        cfg.store.dir = s.clone();
    }
    Ok(cfg)
}

fn print_json(out: &mut dyn Write, v: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, v)?;
    writeln!(out)?;
    Ok(())
}

fn curation(cfg: &PipelineConfig) -> Result<CurationStore> {
    let c = cfg.curation.as_ref().context("no curation section in the config")?;
    Ok(CurationStore::open(&c.dir)?)
}

pub fn command_hook(t: &TrainerConfig) -> CommandHook {
    let mut h = CommandHook::new(&t.program, &t.work_dir);
    h.args = t.args.clone();
    h
}

fn trainer(cfg: &PipelineConfig) -> Result<CommandHook> {
    let t = cfg
        .curation
        .as_ref()
        .and_then(|c| c.trainer.as_ref())
        .context("no curation.trainer in the config")?;
    Ok(command_hook(t))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Runs `cli`, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Simulate { rounds, seed } => {
            let cfg = match &cli.config {
                Some(_) => load_config(&cli)?.simulation.unwrap_or_default(),
                None => LoopConfig::default(),
            };
            let suite = ScenarioSuite::standard(*seed);
            let report = run_closed_loop(&suite, *rounds, &cfg)?;
            return print_json(out, &report);
        }
        Command::Evaluate { detections, truth, iou } => return evaluate(detections, truth, *iou, out),
        _ => {}
    }

    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Track { input } => {
            let mut store = EventStore::open(&cfg.store.dir)?;
            let source = input.map_or_else(
                || cfg.source.clone(),
                |p| {
                    Some(if p.as_os_str() == "-" {
                        SourceConfig::Stdin
                    } else {
                        SourceConfig::File { path: p }
                    })
                },
            );
            let summary = match source {
                None => bail!("no input: pass --input or configure a source"),
                Some(SourceConfig::Stdin) => run_pipeline(&cfg, io::stdin().lock(), "stdin", &mut store)?,
                Some(SourceConfig::File { path }) => {
                    let f = File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
                    run_pipeline(&cfg, BufReader::new(f), &path.to_string_lossy(), &mut store)?
                }
            };
            print_json(out, &summary)
        }
        Command::Events(a) => {
            let store = EventStore::open(&cfg.store.dir)?;
            let filter = EventFilter {
                status: a.status,
                event_type: a.event_type,
                channel: a.channel,
            };
            print_json(out, &store.page(&filter, a.page, a.per_page))
        }
        Command::Verdict {
            id,
            verdict,
            negative_class,
            reviewer,
        } => {
            let mut store = EventStore::open(&cfg.store.dir)?;
            let o = store.record_verdict(ReviewVerdict {
                event_id: id,
                verdict,
                negative_class,
                reviewer,
                reviewed_at: Utc::now(),
            })?;
            print_json(out, &o.record)
        }
        Command::Alarms {
            bucket,
            event_type,
            channel,
        } => {
            let store = EventStore::open(&cfg.store.dir)?;
            let filter = EventFilter {
                status: None,
                event_type,
                channel,
            };
            let events: Vec<IncidentEvent> = store
                .events()
                .iter()
                .filter(|r| filter.matches(r))
                .map(|r| r.event.clone())
                .collect();
            print_json(out, &alarm_series(&events, bucket, None))
        }
        Command::Curate(c) => curate(&cfg, c, out),
        Command::Serve { bind } => {
            let bind = bind.unwrap_or_else(|| cfg.server.bind.clone());
            serve(&cfg, &bind)
        }
        Command::Simulate { .. } | Command::Evaluate { .. } => unreachable!("handled above"),
    }
}

fn curate(cfg: &PipelineConfig, c: CurateCommand, out: &mut dyn Write) -> Result<()> {
    let mut store = curation(cfg)?;
    match c {
        CurateCommand::Register { manifest } => {
            let m = DatasetManifest::load(&manifest)?;
            let summary = json!({
                "name": m.name(),
                "images": m.image_count(),
                "counts": m.class_counts(),
            });
            store.register_manifest(m)?;
            print_json(out, &summary)
        }
        CurateCommand::Baseline { manifests } => {
            let mut hook = trainer(cfg)?;
            let comp = ModelComposition::new(store.next_model_id(), manifests)?;
            print_json(out, &store.register_baseline(comp, &mut hook, Utc::now())?)
        }
        CurateCommand::Round { model } => {
            let mut hook = trainer(cfg)?;
            let current = match model {
                Some(m) => m,
                None => store
                    .latest_model()
                    .context("no baseline model is registered")?
                    .model_id
                    .clone(),
            };
            let events = EventStore::open(&cfg.store.dir)?;
            let verdicts = events.current_verdicts();
            print_json(
                out,
                &store.loop_round(&current, events.events(), &verdicts, &mut hook, Utc::now())?,
            )
        }
        CurateCommand::Compose { model, out: path } => {
            let set = store.recompose(&model)?;
            if let Some(p) = path {
                set.manifest.save(&p)?;
            }
            print_json(
                out,
                &json!({ "model": model, "images": set.images, "counts": set.counts, "members": set.members }),
            )
        }
        CurateCommand::Models => print_json(out, &store.models()),
        CurateCommand::Manifests => {
            let list: Vec<_> = store
                .manifests()
                .iter()
                .map(|m| json!({ "name": m.name(), "provenance": m.provenance(), "images": m.image_count(), "counts": m.class_counts() }))
                .collect();
            print_json(out, &list)
        }
    }
}

fn evaluate(detections: &Path, truth: &Path, iou: f64, out: &mut dyn Write) -> Result<()> {
    let records: Vec<DetectionRecord> = read_jsonl(detections)?;
    let truth: Vec<GroundTruthFrame> = read_jsonl(truth)?;
    let dets: Vec<Detection> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.to_detection()
                .map_err(|e| anyhow::anyhow!("{}:{}: {e}", detections.display(), i + 1))
        })
        .collect::<Result<_>>()?;

    type FrameKey = (String, u64);
    let mut frames: BTreeMap<FrameKey, (Vec<Detection>, Option<&GroundTruthFrame>)> = BTreeMap::new();
    for d in &dets {
        frames
            .entry((d.channel_id.clone(), d.frame_index))
            .or_default()
            .0
            .push(d.clone());
    }
    for t in &truth {
        frames
            .entry((t.channel_id().to_string(), t.frame_index()))
            .or_default()
            .1 = Some(t);
    }
    let mut outcomes: BTreeMap<ObjectClass, OutcomeCount> = BTreeMap::new();
    for ((channel, frame), (d, t)) in &frames {
        let empty;
        let t = match t {
            Some(t) => *t,
            None => {
                empty = GroundTruthFrame::new(channel.clone(), *frame, Vec::new())?;
                &empty
            }
        };
        for (class, c) in categorize(d, t, iou) {
            *outcomes.entry(class).or_default() += c;
        }
    }
    let ap: BTreeMap<ObjectClass, Option<f64>> = ObjectClass::POSITIVE
        .into_iter()
        .map(|c| (c, average_precision(&dets, &truth, c, iou).ok()))
        .collect();
    print_json(
        out,
        &json!({ "frames": frames.len(), "average_precision": ap, "outcomes": outcomes }),
    )
}

fn serve(cfg: &PipelineConfig, bind: &str) -> Result<()> {
    let events = EventStore::open(&cfg.store.dir)?;
    let curation = cfg.curation.as_ref().map(|c| CurationStore::open(&c.dir)).transpose()?;
    let trainer = cfg
        .curation
        .as_ref()
        .and_then(|c| c.trainer.as_ref())
        .map(|t| Box::new(command_hook(t)) as crate::api::Trainer);
    let app = crate::api::router(crate::api::shared(events, curation, trainer));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .with_context(|| format!("cannot listen on {bind}"))?;
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
