//! SORT-style per-channel car tracker: constant-velocity Kalman prediction,
//! optimal IoU association and a tentative/confirmed/dead track lifecycle.

mod assignment;
mod kalman;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assignment::{assign_by_score, associate, gated_iou, Association};
pub use kalman::{kalman_predict, kalman_update, KalmanConfig, KalmanState, StateCovariance, StateVector};

use crate::detection::{Detection, ObjectClass};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackingError {
    #[error("innovation covariance is singular even after regularization")]
    NumericalDegeneracy,
    #[error("channel {channel}: frame {got} arrived after frame {last}")]
    OutOfOrder { channel: String, last: u64, got: u64 },
    #[error("detection for frame {got} passed to step for frame {expected}")]
    FrameMismatch { expected: u64, got: u64 },
    #[error("detection from channel `{got}` passed to tracker for `{expected}`")]
    ChannelMismatch { expected: String, got: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub iou_threshold: f64,
    /// Matched updates needed before a track is confirmed.
    pub min_hits: u32,
    /// Frames a track may go unmatched before it is reaped.
    pub max_age: u32,
    /// Observations kept per track.
    pub history_len: usize,
    /// Frames between detection passes. The service feeds the tracker only
    /// every `detection_stride`-th frame.
    pub detection_stride: u64,
    pub kalman: KalmanConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            min_hits: 3,
            max_age: 5,
            history_len: 150,
            detection_stride: 1,
            kalman: KalmanConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Dead,
}

/// A matched detection box at a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame_index: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub track_id: u64,
    pub state: KalmanState,
    pub object_class: ObjectClass,
    pub hits: u32,
    pub age_since_update: u32,
    pub status: TrackStatus,
    history: VecDeque<Observation>,
}

impl Track {
    pub fn history(&self) -> impl ExactSizeIterator<Item = &Observation> {
        self.history.iter()
    }

    pub fn last_observation(&self) -> Option<&Observation> {
        self.history.back()
    }

    /// Observations with `frame_index > current_frame - span`, oldest first.
    pub fn window(&self, current_frame: u64, span: u64) -> Vec<Observation> {
        let start = (current_frame + 1).saturating_sub(span);
        self.history
            .iter()
            .filter(|o| o.frame_index >= start && o.frame_index <= current_frame)
            .copied()
            .collect()
    }

    fn snapshot(&self, frame_index: u64) -> TrackSnapshot {
        TrackSnapshot {
            track_id: self.track_id,
            frame_index,
            object_class: self.object_class,
            bbox: self.state.to_box(),
            observed: self.history.back().map(|o| o.bbox),
            hits: self.hits,
            age_since_update: self.age_since_update,
            status: self.status,
        }
    }
}

/// Externally visible state of a track after a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSnapshot {
    pub track_id: u64,
    pub frame_index: u64,
    #[serde(rename = "class")]
    pub object_class: ObjectClass,
    /// Filtered box.
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Most recent matched detection box.
    pub observed: Option<BoundingBox>,
    pub hits: u32,
    pub age_since_update: u32,
    pub status: TrackStatus,
}

/// Tracker for one channel. Frames must be stepped in increasing order.
#[derive(Debug, Clone)]
pub struct Tracker {
    channel_id: String,
    cfg: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<u64>,
    reaped: u64,
}

impl Tracker {
    pub fn new(channel_id: impl Into<String>, cfg: TrackerConfig) -> Self {
        Self {
            channel_id: channel_id.into(),
            cfg,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
            reaped: 0,
        }
    }

    pub fn channel_id(&self) -> &str {
        &self.channel_id
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Live (tentative or confirmed) tracks, ordered by id.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn track(&self, track_id: u64) -> Option<&Track> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    /// Number of track ids handed out so far.
    pub fn tracks_created(&self) -> u64 {
        self.next_id - 1
    }

    pub fn tracks_reaped(&self) -> u64 {
        self.reaped
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.last_frame
    }

    /// Advances the tracker by one detection pass.
    ///
    /// Only `car` detections are tracked; other classes are ignored here.
    /// Returns the confirmed tracks matched in this frame, ordered by id.
    pub fn step(&mut self, frame_index: u64, detections: &[Detection]) -> Result<Vec<TrackSnapshot>, TrackingError> {
        if let Some(last) = self.last_frame {
            if frame_index <= last {
                return Err(TrackingError::OutOfOrder {
                    channel: self.channel_id.clone(),
                    last,
                    got: frame_index,
                });
            }
        }
        for d in detections {
            if d.frame_index != frame_index {
                return Err(TrackingError::FrameMismatch {
                    expected: frame_index,
                    got: d.frame_index,
                });
            }
            if d.channel_id != self.channel_id {
                return Err(TrackingError::ChannelMismatch {
                    expected: self.channel_id.clone(),
                    got: d.channel_id.clone(),
                });
            }
        }

        let cars: Vec<&Detection> = detections
            .iter()
            .filter(|d| d.object_class == ObjectClass::Car)
            .collect();

        // predict, staged so a failing update leaves the tracker untouched
        let mut staged: Vec<Track> = self
            .tracks
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.state = kalman_predict(&t.state, &self.cfg.kalman);
                t.age_since_update += 1;
                t
            })
            .collect();

        let predicted: Vec<BoundingBox> = staged.iter().map(|t| t.state.to_box()).collect();
        let det_boxes: Vec<BoundingBox> = cars.iter().map(|d| d.bbox).collect();
        let assoc = associate(&predicted, &det_boxes, self.cfg.iou_threshold);

        for &(ti, di) in &assoc.matches {
            let t = &mut staged[ti];
            let obs = cars[di].bbox;
            t.state = kalman_update(&t.state, &obs, &self.cfg.kalman)?;
            t.hits += 1;
            t.age_since_update = 0;
            push_bounded(
                &mut t.history,
                Observation { frame_index, bbox: obs },
                self.cfg.history_len,
            );
            if t.hits >= self.cfg.min_hits {
                t.status = TrackStatus::Confirmed;
            }
        }

        let max_age = self.cfg.max_age;
        let before = staged.len();
        staged.retain(|t| t.age_since_update <= max_age);
        let reaped = (before - staged.len()) as u64;

        for &di in &assoc.unmatched_detections {
            let d = cars[di];
            let mut history = VecDeque::with_capacity(self.cfg.history_len.min(16));
            push_bounded(
                &mut history,
                Observation {
                    frame_index,
                    bbox: d.bbox,
                },
                self.cfg.history_len,
            );
            staged.push(Track {
                track_id: self.next_id,
                state: KalmanState::from_box(&d.bbox, &self.cfg.kalman),
                object_class: ObjectClass::Car,
                hits: 1,
                age_since_update: 0,
                status: if self.cfg.min_hits <= 1 {
                    TrackStatus::Confirmed
                } else {
                    TrackStatus::Tentative
                },
                history,
            });
            self.next_id += 1;
        }

        self.tracks = staged;
        self.reaped += reaped;
        self.last_frame = Some(frame_index);

        Ok(self
            .tracks
            .iter()
            .filter(|t| t.status == TrackStatus::Confirmed && t.age_since_update == 0)
            .map(|t| t.snapshot(frame_index))
            .collect())
    }
}

fn push_bounded(history: &mut VecDeque<Observation>, obs: Observation, cap: usize) {
    if cap == 0 {
        return;
    }
    while history.len() >= cap {
        history.pop_front();
    }
    history.push_back(obs);
}
