//! Incident rules: stoppage and wrong-way judgment on car tracks, persistence
//! and cooldown for fire/person presence, and negative-class suppression.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::detection::{Detection, ObjectClass};
use crate::geometry::{
    displacement_sign, overlap_area_ratio, overlapped_line_length_ratio, BoundingBox, Displacement, TravelAxis,
    DEFAULT_DEAD_BAND,
};
use crate::tracking::{Observation, TrackSnapshot, Tracker, TrackerConfig, TrackingError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Fire,
    Person,
    Stoppage,
    WrongWay,
}

impl EventType {
    pub const ALL: [EventType; 4] = [
        EventType::Fire,
        EventType::Person,
        EventType::Stoppage,
        EventType::WrongWay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::Fire => "fire",
            EventType::Person => "person",
            EventType::Stoppage => "stoppage",
            EventType::WrongWay => "wrong_way",
        }
    }

    /// Detector class behind a presence alarm.
    pub fn presence_class(self) -> Option<ObjectClass> {
        match self {
            EventType::Fire => Some(ObjectClass::Fire),
            EventType::Person => Some(ObjectClass::Person),
            _ => None,
        }
    }

    pub fn is_track_based(self) -> bool {
        matches!(self, EventType::Stoppage | EventType::WrongWay)
    }
}

impl std::str::FromStr for EventType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown event type `{s}`"))
    }
}

/// One raised alarm. `track_id` is set exactly for stoppage and wrong-way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentEvent {
    pub event_type: EventType,
    #[serde(rename = "channel")]
    pub channel_id: String,
    pub frame_start: u64,
    pub frame_end: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<u64>,
    #[serde(rename = "box")]
    pub evidence_box: BoundingBox,
    pub score: f64,
    #[serde(rename = "t")]
    pub wall_clock: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleConfig {
    /// Minimum IoU with the window's first box for every box of a stopped car.
    pub stoppage_overlap_threshold: f64,
    /// Travel-axis overlap below which a retreating car is driving the wrong way.
    pub wrongway_line_ratio_threshold: f64,
    pub judgment_window_frames: u64,
    pub alarm_cooldown_frames: u64,
    /// Consecutive detection passes a fire/person must persist before alarming.
    pub persistence_frames: u32,
    pub detection_confidence_floor: BTreeMap<ObjectClass, f64>,
    /// IoU a negative-class detection needs with a candidate to suppress it.
    pub negative_overlap_threshold: f64,
    pub direction_dead_band: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            stoppage_overlap_threshold: 0.9,
            wrongway_line_ratio_threshold: 0.75,
            judgment_window_frames: 75,
            alarm_cooldown_frames: 300,
            persistence_frames: 3,
            detection_confidence_floor: BTreeMap::from([(ObjectClass::Fire, 0.5), (ObjectClass::Person, 0.5)]),
            negative_overlap_threshold: 0.5,
            direction_dead_band: DEFAULT_DEAD_BAND,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(format!("{name} must lie in (0, 1), got {v}"))
            }
        };
        unit("stoppage_overlap_threshold", self.stoppage_overlap_threshold)?;
        unit("wrongway_line_ratio_threshold", self.wrongway_line_ratio_threshold)?;
        unit("negative_overlap_threshold", self.negative_overlap_threshold)?;
        if self.judgment_window_frames == 0 {
            return Err("judgment_window_frames must be positive".into());
        }
        if self.alarm_cooldown_frames == 0 {
            return Err("alarm_cooldown_frames must be positive".into());
        }
        if self.persistence_frames == 0 {
            return Err("persistence_frames must be positive".into());
        }
        if self.direction_dead_band.is_nan() || self.direction_dead_band < 0.0 {
            return Err("direction_dead_band must be non-negative".into());
        }
        for (c, v) in &self.detection_confidence_floor {
            if !(0.0..=1.0).contains(v) {
                return Err(format!("confidence floor for {c} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn confidence_floor(&self, class: ObjectClass) -> f64 {
        self.detection_confidence_floor.get(&class).copied().unwrap_or(0.0)
    }
}

/// Observations of one confirmed track over a judgment window, oldest first.
#[derive(Debug, Clone, Copy)]
pub struct TrackWindow<'a> {
    pub channel_id: &'a str,
    pub track_id: u64,
    pub observations: &'a [Observation],
}

impl TrackWindow<'_> {
    fn span(&self) -> u64 {
        match (self.observations.first(), self.observations.last()) {
            (Some(a), Some(b)) => b.frame_index - a.frame_index + 1,
            _ => 0,
        }
    }
}

/// Stoppage iff every box in the window overlaps the window's first box with
/// IoU at or above the threshold. Score is the minimum ratio. Windows spanning
/// fewer than `judgment_window_frames` frames are not judged.
pub fn judge_stoppage(window: &TrackWindow<'_>, cfg: &RuleConfig, wall_clock: DateTime<Utc>) -> Option<IncidentEvent> {
    if window.span() < cfg.judgment_window_frames {
        return None;
    }
    let (first, last) = (window.observations.first()?, window.observations.last()?);
    let mut min_ratio = 1.0f64;
    for o in window.observations {
        let r = overlap_area_ratio(&first.bbox, &o.bbox);
        if r < cfg.stoppage_overlap_threshold {
            return None;
        }
        min_ratio = min_ratio.min(r);
    }
    Some(IncidentEvent {
        event_type: EventType::Stoppage,
        channel_id: window.channel_id.to_string(),
        frame_start: first.frame_index,
        frame_end: last.frame_index,
        track_id: Some(window.track_id),
        evidence_box: last.bbox,
        score: min_ratio,
        wall_clock,
        image_ref: None,
    })
}

/// Wrong way iff the car moved backward along the travel axis between the
/// window's first and last boxes and their projected overlap ratio is below
/// the threshold. Score is `1 - ratio`.
pub fn judge_wrong_way(
    window: &TrackWindow<'_>,
    ax: TravelAxis,
    cfg: &RuleConfig,
    wall_clock: DateTime<Utc>,
) -> Option<IncidentEvent> {
    if window.span() < cfg.judgment_window_frames {
        return None;
    }
    let (first, last) = (window.observations.first()?, window.observations.last()?);
    if displacement_sign(&first.bbox, &last.bbox, ax, cfg.direction_dead_band) != Displacement::Backward {
        return None;
    }
    let ratio = overlapped_line_length_ratio(&first.bbox, &last.bbox, ax);
    if ratio >= cfg.wrongway_line_ratio_threshold {
        return None;
    }
    Some(IncidentEvent {
        event_type: EventType::WrongWay,
        channel_id: window.channel_id.to_string(),
        frame_start: first.frame_index,
        frame_end: last.frame_index,
        track_id: Some(window.track_id),
        evidence_box: last.bbox,
        score: 1.0 - ratio,
        wall_clock,
        image_ref: None,
    })
}

/// True when a detection of the candidate's negative class overlaps it with
/// IoU at or above `overlap_threshold` and has strictly higher confidence.
pub fn suppress_by_negative_class(candidate: &Detection, co_located: &[Detection], overlap_threshold: f64) -> bool {
    let Some(negative) = candidate.object_class.negative_counterpart() else {
        return false;
    };
    co_located.iter().any(|d| {
        d.object_class == negative
            && d.confidence > candidate.confidence
            && overlap_area_ratio(&d.bbox, &candidate.bbox) >= overlap_threshold
    })
}

/// Frame at which the next alarm for a key becomes allowed.
#[derive(Debug, Clone, Default)]
struct Cooldown {
    last_alarm: HashMap<(EventType, Option<u64>), u64>,
}

impl Cooldown {
    fn ready(&self, key: (EventType, Option<u64>), frame: u64, cooldown: u64) -> bool {
        match self.last_alarm.get(&key) {
            Some(&last) => frame >= last + cooldown,
            None => true,
        }
    }

    fn fire(&mut self, key: (EventType, Option<u64>), frame: u64) {
        self.last_alarm.insert(key, frame);
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Streak {
    start: u64,
    len: u32,
}

/// Per-channel persistence streaks and cooldowns for fire/person alarms.
#[derive(Debug, Clone, Default)]
pub struct PresenceState {
    streaks: HashMap<EventType, Streak>,
    cooldown: Cooldown,
}

impl PresenceState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Feeds one detection pass of fire/person detections (already filtered by
/// confidence floor and suppression) into the persistence state machine.
///
/// Must be called for every pass, including passes with no detections, so
/// that streaks break.
pub fn judge_presence(
    state: &mut PresenceState,
    channel_id: &str,
    frame_index: u64,
    wall_clock: DateTime<Utc>,
    detections: &[Detection],
    cfg: &RuleConfig,
) -> Vec<IncidentEvent> {
    let mut events = Vec::new();
    for event_type in [EventType::Fire, EventType::Person] {
        let class = event_type.presence_class().expect("presence type");
        let best = detections
            .iter()
            .filter(|d| d.object_class == class)
            .max_by(|a, b| a.confidence.total_cmp(&b.confidence));
        let Some(best) = best else {
            state.streaks.remove(&event_type);
            continue;
        };
        let streak = state.streaks.entry(event_type).or_insert(Streak {
            start: frame_index,
            len: 0,
        });
        streak.len = streak.len.saturating_add(1);
        if streak.len < cfg.persistence_frames {
            continue;
        }
        let key = (event_type, None);
        if !state.cooldown.ready(key, frame_index, cfg.alarm_cooldown_frames) {
            continue;
        }
        state.cooldown.fire(key, frame_index);
        events.push(IncidentEvent {
            event_type,
            channel_id: channel_id.to_string(),
            frame_start: streak.start,
            frame_end: frame_index,
            track_id: None,
            evidence_box: best.bbox,
            score: best.confidence,
            wall_clock,
            image_ref: None,
        });
    }
    events
}

/// Everything the monitor produced for one detection pass.
#[derive(Debug, Clone, Default)]
pub struct FrameOutcome {
    pub tracks: Vec<TrackSnapshot>,
    pub events: Vec<IncidentEvent>,
    /// Fire/person candidates suppressed by a dominating negative-class detection.
    pub suppressed: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorStats {
    pub frames: u64,
    pub suppressed: u64,
    pub below_floor: u64,
}

/// Tracker plus incident rules for one channel.
#[derive(Debug, Clone)]
pub struct ChannelMonitor {
    tracker: Tracker,
    axis: TravelAxis,
    rules: RuleConfig,
    presence: PresenceState,
    track_cooldown: Cooldown,
    stats: MonitorStats,
}

impl ChannelMonitor {
    pub fn new(channel_id: impl Into<String>, axis: TravelAxis, tracker: TrackerConfig, rules: RuleConfig) -> Self {
        Self {
            tracker: Tracker::new(channel_id, tracker),
            axis,
            rules,
            presence: PresenceState::new(),
            track_cooldown: Cooldown::default(),
            stats: MonitorStats::default(),
        }
    }

    pub fn channel_id(&self) -> &str {
        self.tracker.channel_id()
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn stats(&self) -> MonitorStats {
        self.stats
    }

    /// Runs one detection pass through tracking and every incident rule.
    /// Events are ordered stoppage/wrong-way by track id, then fire, person.
    pub fn process_frame(
        &mut self,
        frame_index: u64,
        wall_clock: DateTime<Utc>,
        detections: &[Detection],
        image_ref: Option<&str>,
    ) -> Result<FrameOutcome, TrackingError> {
        let tracks = self.tracker.step(frame_index, detections)?;
        self.stats.frames += 1;
        let mut events = Vec::new();
        let channel = self.tracker.channel_id().to_string();
        let span = self.rules.judgment_window_frames;

        for snap in &tracks {
            let Some(track) = self.tracker.track(snap.track_id) else {
                continue;
            };
            let Some(window) = judgment_window(track.history(), frame_index, span) else {
                continue;
            };
            let tw = TrackWindow {
                channel_id: &channel,
                track_id: snap.track_id,
                observations: &window,
            };
            let candidates = [
                judge_stoppage(&tw, &self.rules, wall_clock),
                judge_wrong_way(&tw, self.axis, &self.rules, wall_clock),
            ];
            for ev in candidates.into_iter().flatten() {
                let key = (ev.event_type, ev.track_id);
                if self
                    .track_cooldown
                    .ready(key, frame_index, self.rules.alarm_cooldown_frames)
                {
                    self.track_cooldown.fire(key, frame_index);
                    events.push(ev);
                }
            }
        }

        let mut presence = Vec::new();
        let mut suppressed = Vec::new();
        for d in detections {
            if !matches!(d.object_class, ObjectClass::Fire | ObjectClass::Person) {
                continue;
            }
            if d.confidence < self.rules.confidence_floor(d.object_class) {
                self.stats.below_floor += 1;
                continue;
            }
            if suppress_by_negative_class(d, detections, self.rules.negative_overlap_threshold) {
                suppressed.push(d.clone());
            } else {
                presence.push(d.clone());
            }
        }
        self.stats.suppressed += suppressed.len() as u64;
        events.extend(judge_presence(
            &mut self.presence,
            &channel,
            frame_index,
            wall_clock,
            &presence,
            &self.rules,
        ));

        if let Some(r) = image_ref {
            for ev in &mut events {
                ev.image_ref = Some(r.to_string());
            }
        }
        Ok(FrameOutcome {
            tracks,
            events,
            suppressed,
        })
    }
}

/// The latest observation at or before `current - span + 1` followed by every
/// later observation. `None` when the track is younger than the span.
fn judgment_window<'a>(
    history: impl Iterator<Item = &'a Observation>,
    current: u64,
    span: u64,
) -> Option<Vec<Observation>> {
    let cutoff = (current + 1).checked_sub(span)?;
    let obs: Vec<Observation> = history.copied().collect();
    let anchor = obs.iter().rposition(|o| o.frame_index <= cutoff)?;
    Some(obs[anchor..].to_vec())
}
