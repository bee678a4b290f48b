//! Detection scoring: TP/FP/FN/TN outcome counts, precision-recall curves,
//! all-point interpolated average precision, re-inference false-positive
//! rates and bucketed alarm counts.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Duration, DurationRound, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{Detection, ObjectClass};
use crate::geometry::{overlap_area_ratio, BoundingBox};
use crate::incidents::{suppress_by_negative_class, EventType, IncidentEvent};

/// IoU needed for a detection to match a truth object.
pub const DEFAULT_MATCH_IOU: f64 = 0.5;
/// IoU a negative-class detection needs to turn a would-be FP into a TN.
pub const DEFAULT_SUPPRESSION_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvaluationError {
    #[error("no ground-truth objects of class {0}; average precision is undefined")]
    AbsentClass(ObjectClass),
    #[error("empty image set; re-inference rate is undefined")]
    EmptyImageSet,
    #[error("ground truth may only contain positive classes, found {0}")]
    NegativeTruth(ObjectClass),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "class")]
    pub object_class: ObjectClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawTruthFrame {
    frame_index: u64,
    #[serde(rename = "channel")]
    channel_id: String,
    objects: Vec<TruthObject>,
}

/// Labeled objects of one frame. Only car, person and fire may appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTruthFrame", into = "RawTruthFrame")]
pub struct GroundTruthFrame {
    frame_index: u64,
    channel_id: String,
    objects: Vec<TruthObject>,
}

impl GroundTruthFrame {
    pub fn new(
        channel_id: impl Into<String>,
        frame_index: u64,
        objects: Vec<TruthObject>,
    ) -> Result<Self, EvaluationError> {
        if let Some(o) = objects.iter().find(|o| o.object_class.is_negative()) {
            return Err(EvaluationError::NegativeTruth(o.object_class));
        }
        Ok(Self {
            frame_index,
            channel_id: channel_id.into(),
            objects,
        })
    }

    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    pub fn channel_id(&self) -> &str {
        &self.channel_id
    }

    pub fn objects(&self) -> &[TruthObject] {
        &self.objects
    }

    pub fn count(&self, class: ObjectClass) -> usize {
        self.objects.iter().filter(|o| o.object_class == class).count()
    }
}

impl TryFrom<RawTruthFrame> for GroundTruthFrame {
    type Error = EvaluationError;

    fn try_from(r: RawTruthFrame) -> Result<Self, Self::Error> {
        GroundTruthFrame::new(r.channel_id, r.frame_index, r.objects)
    }
}

impl From<GroundTruthFrame> for RawTruthFrame {
    fn from(g: GroundTruthFrame) -> Self {
        RawTruthFrame {
            frame_index: g.frame_index,
            channel_id: g.channel_id,
            objects: g.objects,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCount {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl std::ops::AddAssign for OutcomeCount {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Greedy confidence-descending one-to-one matching of `dets` (all of one
/// class) against `truth` boxes. Returns, per detection, the matched truth
/// index. Ties in confidence keep input order.
fn greedy_match(dets: &[&Detection], truth: &[&BoundingBox], iou_threshold: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut taken = vec![false; truth.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truth.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = overlap_area_ratio(&dets[i].bbox, t);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// Outcome counts per positive class for one frame.
///
/// Positive-class detections are greedily matched to same-class truth at
/// `iou_match_threshold`: matched is TP, unmatched detection FP, unmatched
/// truth FN. An unmatched fire/person detection that a dominating
/// negative-class detection suppresses counts as TN instead of FP.
pub fn categorize(
    detections: &[Detection],
    truth: &GroundTruthFrame,
    iou_match_threshold: f64,
) -> BTreeMap<ObjectClass, OutcomeCount> {
    categorize_with(detections, truth, iou_match_threshold, DEFAULT_SUPPRESSION_IOU)
}

pub fn categorize_with(
    detections: &[Detection],
    truth: &GroundTruthFrame,
    iou_match_threshold: f64,
    suppression_iou: f64,
) -> BTreeMap<ObjectClass, OutcomeCount> {
    let mut out = BTreeMap::new();
    for class in ObjectClass::POSITIVE {
        let dets: Vec<&Detection> = detections.iter().filter(|d| d.object_class == class).collect();
        let gt: Vec<&BoundingBox> = truth
            .objects
            .iter()
            .filter(|o| o.object_class == class)
            .map(|o| &o.bbox)
            .collect();
        let matched = greedy_match(&dets, &gt, iou_match_threshold);
        let mut c = OutcomeCount::default();
        for (d, m) in dets.iter().zip(&matched) {
            if m.is_some() {
                c.tp += 1;
            } else if suppress_by_negative_class(d, detections, suppression_iou) {
                c.tn += 1;
            } else {
                c.fp += 1;
            }
        }
        c.fn_ = gt.len() as u64 - c.tp;
        out.insert(class, c);
    }
    out
}

/// One point of a precision-recall sweep; `threshold` is the confidence of
/// the lowest-ranked detection admitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
}

/// Precision-recall sweep over a dataset for one class, in descending
/// confidence order. Matching is greedy in that same global order.
pub fn precision_recall_curve(
    detections: &[Detection],
    truth: &[GroundTruthFrame],
    class: ObjectClass,
    iou_match_threshold: f64,
) -> Result<Vec<PrPoint>, EvaluationError> {
    let mut gt: HashMap<(&str, u64), Vec<&BoundingBox>> = HashMap::new();
    let mut n_truth = 0usize;
    for frame in truth {
        let boxes = gt.entry((frame.channel_id.as_str(), frame.frame_index)).or_default();
        for o in frame.objects.iter().filter(|o| o.object_class == class) {
            boxes.push(&o.bbox);
            n_truth += 1;
        }
    }
    if n_truth == 0 {
        return Err(EvaluationError::AbsentClass(class));
    }

    let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.object_class == class).collect();
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    let mut taken: HashMap<(&str, u64), Vec<bool>> = HashMap::new();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(dets.len());
    for (rank, d) in dets.iter().enumerate() {
        let key = (d.channel_id.as_str(), d.frame_index);
        if let Some(boxes) = gt.get(&key) {
            let used = taken.entry(key).or_insert_with(|| vec![false; boxes.len()]);
            let mut best: Option<(usize, f64)> = None;
            for (j, b) in boxes.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let iou = overlap_area_ratio(&d.bbox, b);
                if iou >= iou_match_threshold && best.is_none_or(|(_, x)| iou > x) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
                tp += 1;
            }
        }
        curve.push(PrPoint {
            precision: tp as f64 / (rank + 1) as f64,
            recall: tp as f64 / n_truth as f64,
            threshold: d.confidence,
        });
    }
    Ok(curve)
}

/// All-point interpolated AP: the sum over recall increments of the
/// increment times the best precision achieved at that recall or beyond.
pub fn average_precision(
    detections: &[Detection],
    truth: &[GroundTruthFrame],
    class: ObjectClass,
    iou_match_threshold: f64,
) -> Result<f64, EvaluationError> {
    let curve = precision_recall_curve(detections, truth, class, iou_match_threshold)?;
    Ok(interpolated_area(&curve))
}

fn interpolated_area(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    ap
}

/// Percentage of images on which `detect` still emits at least one detection
/// of `target`. The images are expected to carry no truth of `target`.
pub fn fp_reinference_rate<I, F>(images: &[I], mut detect: F, target: ObjectClass) -> Result<f64, EvaluationError>
where
    F: FnMut(&I) -> Vec<Detection>,
{
    if images.is_empty() {
        return Err(EvaluationError::EmptyImageSet);
    }
    let hits = images
        .iter()
        .filter(|img| detect(img).iter().any(|d| d.object_class == target))
        .count();
    Ok(100.0 * hits as f64 / images.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Hour,
    Day,
}

impl Bucket {
    pub fn width(self) -> Duration {
        match self {
            Bucket::Hour => Duration::hours(1),
            Bucket::Day => Duration::days(1),
        }
    }

    /// Start of the bucket containing `t`.
    pub fn floor(self, t: DateTime<Utc>) -> DateTime<Utc> {
        t.duration_trunc(self.width())
            .expect("bucket widths are far below the timestamp range")
    }
}

impl std::str::FromStr for Bucket {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hour" => Ok(Bucket::Hour),
            "day" => Ok(Bucket::Day),
            other => Err(format!("unknown bucket `{other}` (expected hour or day)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesLine {
    pub channel: String,
    pub event_type: EventType,
    pub counts: Vec<u64>,
}

/// Alarm counts per bucket. Every bucket in the range is present, including
/// empty ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmSeries {
    pub bucket: Bucket,
    pub starts: Vec<DateTime<Utc>>,
    pub totals: Vec<u64>,
    pub series: Vec<SeriesLine>,
}

impl AlarmSeries {
    pub fn total(&self) -> u64 {
        self.totals.iter().sum()
    }

    /// Totals of one event type per bucket, across channels.
    pub fn totals_for(&self, event_type: EventType) -> Vec<u64> {
        let mut out = vec![0; self.starts.len()];
        for line in self.series.iter().filter(|l| l.event_type == event_type) {
            for (o, c) in out.iter_mut().zip(&line.counts) {
                *o += c;
            }
        }
        out
    }
}

/// Buckets event counts per `(channel, event_type)`.
///
/// With `range = Some((from, to))` the buckets cover `[from, to)` and events
/// outside are ignored; otherwise the range spans the first to the last
/// event.
pub fn alarm_series(
    events: &[IncidentEvent],
    bucket: Bucket,
    range: Option<(DateTime<Utc>, DateTime<Utc>)>,
) -> AlarmSeries {
    let (start, end) = match range {
        Some((from, to)) => (bucket.floor(from), to),
        None => match (
            events.iter().map(|e| e.wall_clock).min(),
            events.iter().map(|e| e.wall_clock).max(),
        ) {
            (Some(lo), Some(hi)) => (bucket.floor(lo), hi + Duration::nanoseconds(1)),
            _ => {
                return AlarmSeries {
                    bucket,
                    starts: Vec::new(),
                    totals: Vec::new(),
                    series: Vec::new(),
                }
            }
        },
    };

    let mut starts = Vec::new();
    let mut t = start;
    while t < end {
        starts.push(t);
        t += bucket.width();
    }
    let n = starts.len();
    let mut totals = vec![0u64; n];
    let mut lines: BTreeMap<(String, EventType), Vec<u64>> = BTreeMap::new();
    for e in events {
        if e.wall_clock < start || e.wall_clock >= end {
            continue;
        }
        let idx = ((bucket.floor(e.wall_clock) - start).num_seconds() / bucket.width().num_seconds()) as usize;
        if idx >= n {
            continue;
        }
        totals[idx] += 1;
        lines
            .entry((e.channel_id.clone(), e.event_type))
            .or_insert_with(|| vec![0; n])[idx] += 1;
    }
    AlarmSeries {
        bucket,
        starts,
        totals,
        series: lines
            .into_iter()
            .map(|((channel, event_type), counts)| SeriesLine {
                channel,
                event_type,
                counts,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(class: ObjectClass, conf: f64, b: BoundingBox, frame: u64) -> Detection {
        Detection::new(b, class, conf, frame, "ch").unwrap()
    }

    fn truth(frame: u64, objs: &[(ObjectClass, BoundingBox)]) -> GroundTruthFrame {
        GroundTruthFrame::new(
            "ch",
            frame,
            objs.iter()
                .map(|(c, b)| TruthObject {
                    bbox: *b,
                    object_class: *c,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn truth_rejects_negative_classes() {
        let r = GroundTruthFrame::new(
            "ch",
            0,
            vec![TruthObject {
                bbox: bb(0.0, 0.0, 1.0, 1.0),
                object_class: ObjectClass::FalseFire,
            }],
        );
        assert_eq!(r.unwrap_err(), EvaluationError::NegativeTruth(ObjectClass::FalseFire));
        let json = r#"{"frame_index":0,"channel":"ch","objects":[{"box":[0,0,1,1],"class":"false_person"}]}"#;
        assert!(serde_json::from_str::<GroundTruthFrame>(json).is_err());
    }

    #[test]
    fn perfect_detections_are_all_tp() {
        let car = bb(0.0, 0.0, 40.0, 20.0);
        let person = bb(50.0, 0.0, 54.0, 10.0);
        let gt = truth(0, &[(ObjectClass::Car, car), (ObjectClass::Person, person)]);
        let dets = vec![
            det(ObjectClass::Car, 0.9, car, 0),
            det(ObjectClass::Person, 0.8, person, 0),
        ];
        let c = categorize(&dets, &gt, 0.5);
        assert_eq!(
            c[&ObjectClass::Car],
            OutcomeCount {
                tp: 1,
                ..Default::default()
            }
        );
        assert_eq!(
            c[&ObjectClass::Person],
            OutcomeCount {
                tp: 1,
                ..Default::default()
            }
        );
        assert_eq!(c[&ObjectClass::Fire], OutcomeCount::default());
    }

    #[test]
    fn person_on_empty_truth_is_fp() {
        let gt = truth(0, &[]);
        let c = categorize(&[det(ObjectClass::Person, 0.8, bb(0.0, 0.0, 4.0, 10.0), 0)], &gt, 0.5);
        assert_eq!(
            c[&ObjectClass::Person],
            OutcomeCount {
                fp: 1,
                ..Default::default()
            }
        );
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let car = bb(0.0, 0.0, 40.0, 20.0);
        let gt = truth(0, &[(ObjectClass::Car, car)]);
        let dets = vec![
            det(ObjectClass::Car, 0.9, car, 0),
            det(ObjectClass::Car, 0.8, bb(1.0, 0.0, 41.0, 20.0), 0),
        ];
        let c = categorize(&dets, &gt, 0.5);
        assert_eq!(
            c[&ObjectClass::Car],
            OutcomeCount {
                tp: 1,
                fp: 1,
                ..Default::default()
            }
        );
    }

    #[test]
    fn suppressed_false_alarm_is_tn() {
        let gt = truth(0, &[]);
        let glare = bb(0.0, 0.0, 30.0, 30.0);
        let dets = vec![
            det(ObjectClass::Fire, 0.6, glare, 0),
            det(ObjectClass::FalseFire, 0.9, glare, 0),
        ];
        let c = categorize(&dets, &gt, 0.5);
        assert_eq!(
            c[&ObjectClass::Fire],
            OutcomeCount {
                tn: 1,
                ..Default::default()
            }
        );
    }

    #[test]
    fn missed_truth_is_fn() {
        let gt = truth(0, &[(ObjectClass::Fire, bb(0.0, 0.0, 50.0, 50.0))]);
        let c = categorize(&[], &gt, 0.5);
        assert_eq!(c[&ObjectClass::Fire].fn_, 1);
    }

    #[test]
    fn ap_perfect_detector() {
        let frames: Vec<_> = (0..5)
            .map(|f| truth(f, &[(ObjectClass::Car, bb(f as f64, 0.0, f as f64 + 30.0, 20.0))]))
            .collect();
        let dets: Vec<_> = frames
            .iter()
            .map(|g| det(ObjectClass::Car, 1.0, g.objects()[0].bbox, g.frame_index()))
            .collect();
        assert_eq!(average_precision(&dets, &frames, ObjectClass::Car, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn ap_half_when_top_detection_is_wrong() {
        let target = bb(0.0, 0.0, 20.0, 20.0);
        let gt = vec![truth(0, &[(ObjectClass::Fire, target)])];
        let dets = vec![
            det(ObjectClass::Fire, 0.9, bb(100.0, 100.0, 120.0, 120.0), 0),
            det(ObjectClass::Fire, 0.8, target, 0),
        ];
        // PR: (0, 0) then (1/2, 1): all recall is reached at precision 1/2
        assert_eq!(average_precision(&dets, &gt, ObjectClass::Fire, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn ap_absent_class_is_error() {
        let gt = vec![truth(0, &[(ObjectClass::Car, bb(0.0, 0.0, 1.0, 1.0))])];
        assert_eq!(
            average_precision(&[], &gt, ObjectClass::Fire, 0.5),
            Err(EvaluationError::AbsentClass(ObjectClass::Fire))
        );
    }

    #[test]
    fn pr_curve_recall_is_monotone() {
        let gt = vec![
            truth(0, &[(ObjectClass::Car, bb(0.0, 0.0, 10.0, 10.0))]),
            truth(1, &[(ObjectClass::Car, bb(0.0, 0.0, 10.0, 10.0))]),
        ];
        let dets = vec![
            det(ObjectClass::Car, 0.3, bb(0.0, 0.0, 10.0, 10.0), 1),
            det(ObjectClass::Car, 0.7, bb(50.0, 0.0, 60.0, 10.0), 0),
            det(ObjectClass::Car, 0.9, bb(0.0, 0.0, 10.0, 10.0), 0),
        ];
        let curve = precision_recall_curve(&dets, &gt, ObjectClass::Car, 0.5).unwrap();
        assert!(curve.windows(2).all(|w| w[1].recall >= w[0].recall));
        assert!(curve.windows(2).all(|w| w[1].threshold <= w[0].threshold));
        assert_eq!(curve.last().unwrap().recall, 1.0);
    }

    #[test]
    fn reinference_rate_counts_images() {
        let images: Vec<u32> = (0..100).collect();
        let rate = fp_reinference_rate(
            &images,
            |i| {
                if *i < 16 {
                    vec![det(ObjectClass::Person, 0.9, bb(0.0, 0.0, 1.0, 1.0), 0)]
                } else {
                    vec![det(ObjectClass::FalsePerson, 0.9, bb(0.0, 0.0, 1.0, 1.0), 0)]
                }
            },
            ObjectClass::Person,
        )
        .unwrap();
        assert_eq!(rate, 16.0);
        assert_eq!(
            fp_reinference_rate(&images, |_| vec![], ObjectClass::Person).unwrap(),
            0.0
        );
        let empty: Vec<u32> = vec![];
        assert_eq!(
            fp_reinference_rate(&empty, |_| vec![], ObjectClass::Person),
            Err(EvaluationError::EmptyImageSet)
        );
    }

    fn event(t: DateTime<Utc>, ty: EventType, ch: &str) -> IncidentEvent {
        IncidentEvent {
            event_type: ty,
            channel_id: ch.into(),
            frame_start: 0,
            frame_end: 0,
            track_id: None,
            evidence_box: bb(0.0, 0.0, 1.0, 1.0),
            score: 1.0,
            wall_clock: t,
            image_ref: None,
        }
    }

    #[test]
    fn day_buckets() {
        let d0 = Utc.with_ymd_and_hms(2018, 11, 1, 0, 0, 0).unwrap();
        let events = vec![
            event(d0 + Duration::hours(1), EventType::Fire, "c1"),
            event(d0 + Duration::hours(5), EventType::Fire, "c1"),
            event(d0 + Duration::hours(23), EventType::Fire, "c2"),
            event(d0 + Duration::hours(50), EventType::Person, "c1"),
        ];
        let s = alarm_series(&events, Bucket::Day, None);
        assert_eq!(s.starts.len(), 3);
        assert_eq!(s.totals, vec![3, 0, 1]);
        assert_eq!(s.totals_for(EventType::Fire), vec![3, 0, 0]);
        assert_eq!(s.total(), 4);
        let hourly = alarm_series(&events, Bucket::Hour, None);
        assert_eq!(hourly.starts.len(), 50);
        assert_eq!(hourly.total(), 4);
    }

    #[test]
    fn empty_log_gives_zero_series_over_range() {
        let d0 = Utc.with_ymd_and_hms(2018, 11, 1, 0, 0, 0).unwrap();
        let s = alarm_series(&[], Bucket::Day, Some((d0, d0 + Duration::days(7))));
        assert_eq!(s.totals, vec![0; 7]);
        assert!(s.series.is_empty());
    }
}
