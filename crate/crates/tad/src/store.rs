//! Append-only event and verdict logs with an in-memory index rebuilt on open.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tad_core::curation::{CurationError, EventRecord, ReviewVerdict};
use tad_core::incidents::{EventType, IncidentEvent};
use thiserror::Error;

use crate::ingest::Reject;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const REJECTS_FILE: &str = "rejects.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Inconsistent { path: PathBuf, line: usize, reason: String },
    #[error("event {0} does not exist")]
    UnknownEvent(u64),
    #[error(transparent)]
    Verdict(#[from] CurationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Reviewed,
    Unreviewed,
}

impl std::str::FromStr for ReviewStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reviewed" => Ok(Self::Reviewed),
            "unreviewed" => Ok(Self::Unreviewed),
            other => Err(format!("unknown status `{other}` (expected reviewed or unreviewed)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventFilter {
    pub status: Option<ReviewStatus>,
    pub event_type: Option<EventType>,
    pub channel: Option<String>,
}

impl EventFilter {
    pub fn matches(&self, r: &EventRecord) -> bool {
        self.status
            .is_none_or(|s| (s == ReviewStatus::Reviewed) == r.review.is_some())
            && self.event_type.is_none_or(|t| t == r.event.event_type)
            && self.channel.as_ref().is_none_or(|c| *c == r.event.channel_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub page: usize,
    pub per_page: usize,
    pub total: usize,
    pub events: Vec<EventRecord>,
}

/// Result of submitting a verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct VerdictOutcome {
    pub record: EventRecord,
    /// False when the same reviewer had already filed the same verdict.
    pub appended: bool,
}

#[derive(Debug)]
pub struct EventStore {
    dir: PathBuf,
    events: Vec<EventRecord>,
    by_id: HashMap<u64, usize>,
    verdicts: Vec<ReviewVerdict>,
    event_log: File,
    verdict_log: File,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn append_handle(path: &Path) -> Result<File, StoreError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|source| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push((i + 1, v));
    }
    Ok(out)
}

impl EventStore {
    /// Opens or creates the store. Fails early if the directory or either log
    /// is not writable.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let events_path = dir.join(EVENTS_FILE);
        let verdicts_path = dir.join(VERDICTS_FILE);
        let event_log = append_handle(&events_path)?;
        let verdict_log = append_handle(&verdicts_path)?;

        let mut store = Self {
            dir,
            events: Vec::new(),
            by_id: HashMap::new(),
            verdicts: Vec::new(),
            event_log,
            verdict_log,
        };
        for (line, rec) in read_lines::<EventRecord>(&events_path)? {
            if store.events.last().is_some_and(|last| rec.id <= last.id) {
                return Err(StoreError::Inconsistent {
                    path: events_path,
                    line,
                    reason: format!("event id {} is not increasing", rec.id),
                });
            }
            store.by_id.insert(rec.id, store.events.len());
            store.events.push(EventRecord { review: None, ..rec });
        }
        for (line, v) in read_lines::<ReviewVerdict>(&verdicts_path)? {
            let Some(&idx) = store.by_id.get(&v.event_id) else {
                return Err(StoreError::Inconsistent {
                    path: verdicts_path,
                    line,
                    reason: format!("verdict for unknown event {}", v.event_id),
                });
            };
            store.events[idx].review = Some(v.clone());
            store.verdicts.push(v);
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn events_path(&self) -> PathBuf {
        self.dir.join(EVENTS_FILE)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn next_id(&self) -> u64 {
        self.events.last().map_or(1, |r| r.id + 1)
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn get(&self, id: u64) -> Option<&EventRecord> {
        self.by_id.get(&id).map(|&i| &self.events[i])
    }

    /// Every verdict ever filed, in filing order.
    pub fn verdicts(&self) -> &[ReviewVerdict] {
        &self.verdicts
    }

    /// The latest verdict of every reviewed event.
    pub fn current_verdicts(&self) -> Vec<ReviewVerdict> {
        self.events.iter().filter_map(|r| r.review.clone()).collect()
    }

    pub fn append(&mut self, event: IncidentEvent) -> Result<EventRecord, StoreError> {
        let rec = EventRecord {
            id: self.next_id(),
            event,
            review: None,
        };
        let mut line = serde_json::to_string(&rec).expect("event records serialize");
        line.push('\n');
        let path = self.events_path();
        self.event_log.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.by_id.insert(rec.id, self.events.len());
        self.events.push(rec.clone());
        Ok(rec)
    }

    pub fn flush(&mut self) -> Result<(), StoreError> {
        let path = self.events_path();
        self.event_log.sync_data().map_err(io_err(&path))
    }

    /// Files a verdict. Repeating a reviewer's latest verdict on an event is
    /// a no-op.
    pub fn record_verdict(&mut self, v: ReviewVerdict) -> Result<VerdictOutcome, StoreError> {
        let idx = *self
            .by_id
            .get(&v.event_id)
            .ok_or(StoreError::UnknownEvent(v.event_id))?;
        v.validate_for(self.events[idx].event.event_type)?;
        let same = self
            .verdicts
            .iter()
            .rev()
            .find(|p| p.event_id == v.event_id && p.reviewer == v.reviewer)
            .is_some_and(|p| p.verdict == v.verdict && p.negative_class == v.negative_class);
        if same {
            return Ok(VerdictOutcome {
                record: self.events[idx].clone(),
                appended: false,
            });
        }
        let mut line = serde_json::to_string(&v).expect("verdicts serialize");
        line.push('\n');
        let path = self.dir.join(VERDICTS_FILE);
        self.verdict_log.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.verdict_log.sync_data().map_err(io_err(&path))?;
        self.events[idx].review = Some(v.clone());
        self.verdicts.push(v);
        Ok(VerdictOutcome {
            record: self.events[idx].clone(),
            appended: true,
        })
    }

    /// One-based page of matching events in id order.
    pub fn page(&self, filter: &EventFilter, page: usize, per_page: usize) -> Page {
        let page = page.max(1);
        let per_page = per_page.max(1);
        let matching: Vec<&EventRecord> = self.events.iter().filter(|r| filter.matches(r)).collect();
        let events = matching
            .iter()
            .skip((page - 1).saturating_mul(per_page))
            .take(per_page)
            .map(|r| (*r).clone())
            .collect();
        Page {
            page,
            per_page,
            total: matching.len(),
            events,
        }
    }

    /// Appends quarantined input lines, tagged with their source, to the
    /// reject log.
    pub fn quarantine(&self, source: &str, rejects: &[Reject]) -> Result<(), StoreError> {
        if rejects.is_empty() {
            return Ok(());
        }
        #[derive(Serialize)]
        struct Line<'a> {
            source: &'a str,
            #[serde(flatten)]
            reject: &'a Reject,
        }
        let path = self.dir.join(REJECTS_FILE);
        let mut f = append_handle(&path)?;
        let mut buf = String::new();
        for r in rejects {
            buf += &serde_json::to_string(&Line { source, reject: r }).expect("rejects serialize");
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(io_err(&path))
    }
}
