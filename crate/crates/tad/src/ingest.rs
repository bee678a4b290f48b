//! DetectionRecord JSON lines: parsing, validation and per-channel ordering.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tad_core::geometry::BoundingBox;
use tad_core::{Detection, ObjectClass};

/// Wire form of one detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub channel: String,
    pub frame: u64,
    pub t: DateTime<Utc>,
    pub class: ObjectClass,
    pub conf: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl DetectionRecord {
    pub fn to_detection(&self) -> Result<Detection, String> {
        Detection::new(self.bbox, self.class, self.conf, self.frame, self.channel.clone()).map_err(|e| e.to_string())
    }
}

/// A quarantined input line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
    pub text: String,
}

/// All records of one channel at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub channel: String,
    pub frame: u64,
    pub t: DateTime<Utc>,
    pub image_ref: Option<String>,
    pub detections: Vec<Detection>,
}

/// What [`Demux::push_line`] did with a line.
#[derive(Debug, Clone, PartialEq)]
pub enum LineOutcome {
    Blank,
    Accepted,
    /// The channel moved to a later frame; the finished batch is returned.
    Completed(FrameBatch),
    Rejected(Reject),
}

type ChannelFilter = Box<dyn Fn(&str) -> bool>;

/// Streaming demultiplexer: validates each line and groups records into
/// per-channel frame batches. A batch is complete once its channel reports a
/// later frame, or at [`Demux::finish`].
#[derive(Default)]
pub struct Demux {
    line_no: u64,
    open: HashMap<String, FrameBatch>,
    /// Channel name to order of first appearance.
    order: BTreeMap<String, usize>,
    accept: Option<ChannelFilter>,
}

impl Demux {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records whose channel fails `accept` are quarantined.
    pub fn with_channel_filter(accept: impl Fn(&str) -> bool + 'static) -> Self {
        Self {
            accept: Some(Box::new(accept)),
            ..Self::default()
        }
    }

    pub fn lines_seen(&self) -> u64 {
        self.line_no
    }

    pub fn push_line(&mut self, text: &str) -> LineOutcome {
        self.line_no += 1;
        let line = self.line_no;
        if text.trim().is_empty() {
            return LineOutcome::Blank;
        }
        let reject = |reason: String| {
            LineOutcome::Rejected(Reject {
                line,
                reason,
                text: text.to_string(),
            })
        };
        let rec: DetectionRecord = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => return reject(format!("unparseable record: {e}")),
        };
        if rec.channel.is_empty() || rec.channel.contains('/') {
            return reject("channel must be non-empty and contain no '/'".into());
        }
        if let Some(accept) = &self.accept {
            if !accept(&rec.channel) {
                return reject(format!("channel `{}` is not configured", rec.channel));
            }
        }
        let det = match rec.to_detection() {
            Ok(d) => d,
            Err(e) => return reject(e),
        };
        match self.open.get_mut(&rec.channel) {
            Some(b) if rec.frame < b.frame => reject(format!(
                "out-of-order frame {} on channel `{}` after frame {}",
                rec.frame, rec.channel, b.frame
            )),
            Some(b) if rec.frame == b.frame => {
                if b.image_ref.is_none() {
                    b.image_ref = rec.image_ref;
                }
                b.detections.push(det);
                LineOutcome::Accepted
            }
            Some(b) if rec.t < b.t => reject(format!(
                "timestamp {} on channel `{}` precedes frame {} at {}",
                rec.t, rec.channel, b.frame, b.t
            )),
            _ => {
                let n = self.order.len();
                self.order.entry(rec.channel.clone()).or_insert(n);
                let fresh = FrameBatch {
                    channel: rec.channel.clone(),
                    frame: rec.frame,
                    t: rec.t,
                    image_ref: rec.image_ref,
                    detections: vec![det],
                };
                match self.open.insert(rec.channel, fresh) {
                    Some(done) => LineOutcome::Completed(done),
                    None => LineOutcome::Accepted,
                }
            }
        }
    }

    /// Remaining open batches, in order of channel first appearance.
    pub fn finish(&mut self) -> Vec<FrameBatch> {
        let mut rest: Vec<FrameBatch> = self.open.drain().map(|(_, b)| b).collect();
        rest.sort_by_key(|b| self.order[&b.channel]);
        rest
    }
}

/// Per-channel ordered batches of a whole input.
#[derive(Debug, Default)]
pub struct Ingested {
    pub streams: BTreeMap<String, Vec<FrameBatch>>,
    pub rejects: Vec<Reject>,
    pub lines: u64,
    pub blank: u64,
    pub records: u64,
}

/// Reads all of `source` into per-channel streams.
pub fn ingest(source: impl BufRead) -> std::io::Result<Ingested> {
    let mut demux = Demux::new();
    let mut out = Ingested::default();
    let take = |b: FrameBatch, out: &mut Ingested| {
        out.records += b.detections.len() as u64;
        out.streams.entry(b.channel.clone()).or_default().push(b);
    };
    for line in source.lines() {
        match demux.push_line(&line?) {
            LineOutcome::Blank => out.blank += 1,
            LineOutcome::Accepted => {}
            LineOutcome::Completed(b) => take(b, &mut out),
            LineOutcome::Rejected(r) => out.rejects.push(r),
        }
    }
    for b in demux.finish() {
        take(b, &mut out);
    }
    out.lines = demux.lines_seen();
    Ok(out)
}
