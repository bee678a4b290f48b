//! Drives detection streams through per-channel monitors into the event store.

use std::collections::BTreeMap;
use std::io::BufRead;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use tad_core::incidents::{ChannelMonitor, EventType, IncidentEvent};
use tad_core::tracking::TrackingError;
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::ingest::{Demux, FrameBatch, LineOutcome, Reject};
use crate::store::{EventStore, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("reading input: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    /// Detection passes run, including filled gap passes.
    pub passes: u64,
    pub filled: u64,
    /// Input frames dropped for not falling on the detection stride.
    pub off_stride: u64,
    pub tracks: u64,
    pub events: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub lines: u64,
    pub blank: u64,
    pub records: u64,
    pub quarantined: u64,
    pub channels: BTreeMap<String, ChannelSummary>,
    pub events: BTreeMap<EventType, u64>,
    pub suppressed: u64,
    pub below_floor: u64,
    /// Ids of the first and last stored event of this run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_ids: Option<(u64, u64)>,
}

struct ChannelState {
    monitor: ChannelMonitor,
    last: Option<(u64, DateTime<Utc>)>,
    summary: ChannelSummary,
}

/// Per-channel monitors fed with completed frame batches.
///
/// Frames are processed only on multiples of the detection stride. Missing
/// stride frames between two processed frames run as empty passes with
/// linearly interpolated timestamps, so tracks age out and presence streaks
/// break. At most `max_age + 2` such passes are run per gap; beyond that an
/// empty pass changes nothing.
pub struct Pipeline {
    cfg: PipelineConfig,
    channels: BTreeMap<String, ChannelState>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        Self {
            cfg,
            channels: BTreeMap::new(),
        }
    }

    /// Whether records from `channel` are accepted. With no channels
    /// configured every channel is, on the default travel axis.
    pub fn accepts(cfg: &PipelineConfig, channel: &str) -> bool {
        cfg.channels.is_empty() || cfg.channels.contains_key(channel)
    }

    fn state(&mut self, channel: &str) -> &mut ChannelState {
        let cfg = &self.cfg;
        self.channels
            .entry(channel.to_string())
            .or_insert_with(|| ChannelState {
                monitor: ChannelMonitor::new(
                    channel,
                    cfg.axis(channel).unwrap_or_default(),
                    cfg.tracker.clone(),
                    cfg.rules.clone(),
                ),
                last: None,
                summary: ChannelSummary::default(),
            })
    }

    pub fn process(&mut self, batch: FrameBatch) -> Result<Vec<IncidentEvent>, PipelineError> {
        let stride = self.cfg.tracker.detection_stride.max(1);
        let max_fill = u64::from(self.cfg.tracker.max_age) + 2;
        let st = self.state(&batch.channel);
        if !batch.frame.is_multiple_of(stride) {
            st.summary.off_stride += 1;
            return Ok(Vec::new());
        }
        let mut events = Vec::new();
        if let Some((f0, t0)) = st.last {
            let span = (batch.frame - f0) as f64;
            let dt = (batch.t - t0).num_nanoseconds().unwrap_or(i64::MAX) as f64;
            let mut f = f0 + stride;
            let mut filled = 0;
            while f < batch.frame && filled < max_fill {
                let t = t0 + Duration::nanoseconds((dt * (f - f0) as f64 / span).round() as i64);
                events.extend(st.monitor.process_frame(f, t, &[], None)?.events);
                st.summary.filled += 1;
                st.summary.passes += 1;
                filled += 1;
                f += stride;
            }
        }
        let out = st
            .monitor
            .process_frame(batch.frame, batch.t, &batch.detections, batch.image_ref.as_deref())?;
        events.extend(out.events);
        st.summary.passes += 1;
        st.last = Some((batch.frame, batch.t));
        st.summary.events += events.len() as u64;
        Ok(events)
    }

    /// Folds per-channel counters into `summary`.
    pub fn finish(self, summary: &mut RunSummary) {
        for (name, st) in self.channels {
            let stats = st.monitor.stats();
            summary.suppressed += stats.suppressed;
            summary.below_floor += stats.below_floor;
            let mut cs = st.summary;
            cs.tracks = st.monitor.tracker().tracks_created();
            summary.channels.insert(name, cs);
        }
    }
}

/// Streams `source` through the pipeline, appending events to `store` and
/// quarantining bad lines under `source_name`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    source: impl BufRead,
    source_name: &str,
    store: &mut EventStore,
) -> Result<RunSummary, PipelineError> {
    let accept_cfg = cfg.clone();
    let mut demux = Demux::with_channel_filter(move |c| Pipeline::accepts(&accept_cfg, c));
    let mut pipeline = Pipeline::new(cfg.clone());
    let mut summary = RunSummary::default();
    let mut rejects: Vec<Reject> = Vec::new();

    let mut handle =
        |batch: FrameBatch, summary: &mut RunSummary, store: &mut EventStore| -> Result<(), PipelineError> {
            summary.records += batch.detections.len() as u64;
            for ev in pipeline.process(batch)? {
                *summary.events.entry(ev.event_type).or_default() += 1;
                let id = store.append(ev)?.id;
                summary.event_ids = Some(summary.event_ids.map_or((id, id), |(a, _)| (a, id)));
            }
            Ok(())
        };

    for line in source.lines() {
        match demux.push_line(&line?) {
            LineOutcome::Blank => summary.blank += 1,
            LineOutcome::Accepted => {}
            LineOutcome::Completed(b) => handle(b, &mut summary, store)?,
            LineOutcome::Rejected(r) => rejects.push(r),
        }
    }
    for b in demux.finish() {
        handle(b, &mut summary, store)?;
    }
    summary.lines = demux.lines_seen();
    summary.quarantined = rejects.len() as u64;
    store.quarantine(source_name, &rejects)?;
    store.flush()?;
    pipeline.finish(&mut summary);
    Ok(summary)
}
