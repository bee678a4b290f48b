//! Round-based retraining experiment: field alarms are auto-reviewed
//! against ground truth, folded into the training data as negative classes,
//! and each resulting model is scored on held-out clips.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::detector::{toy_infer, toy_train, ToyDetectorModel, ToyTrainConfig};
use super::scenario::{Raster, ScenarioFrames, ScenarioSpec};
use super::suite::ScenarioSuite;
use super::SimulationError;
use crate::curation::{
    ClassCounts, CurationStore, DatasetManifest, EventRecord, HookError, ManifestEntry, ManifestObject, MetricSnapshot,
    ModelComposition, Provenance, ReviewVerdict, TrainingHook, Verdict,
};
use crate::detection::{Detection, ObjectClass};
use crate::evaluation::{
    alarm_series, average_precision, fp_reinference_rate, AlarmSeries, Bucket, EvaluationError, GroundTruthFrame,
    DEFAULT_MATCH_IOU,
};
use crate::geometry::{overlap_area_ratio, TravelAxis};
use crate::incidents::{ChannelMonitor, EventType, IncidentEvent, RuleConfig};
use crate::tracking::TrackerConfig;

const FRAME_PERIOD_MS: i64 = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Every n-th training frame becomes a labeled image.
    pub train_stride: u64,
    /// Every n-th held-out frame is scored for AP.
    pub eval_stride: u64,
    pub detector: ToyTrainConfig,
    pub tracker: TrackerConfig,
    pub rules: RuleConfig,
    pub axis: TravelAxis,
    /// Midnight of the first simulated day.
    pub start: DateTime<Utc>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            train_stride: 6,
            eval_stride: 6,
            detector: ToyTrainConfig::default(),
            tracker: TrackerConfig::default(),
            rules: RuleConfig::default(),
            axis: TravelAxis::default(),
            start: Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

/// Field results that fed one retraining round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub scenarios: usize,
    pub frames: u64,
    pub events: BTreeMap<EventType, usize>,
    pub true_positive: usize,
    pub false_positive: usize,
    pub collected: ClassCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub model_id: String,
    pub training_images: usize,
    pub training_counts: ClassCounts,
    /// Held-out AP per positive class.
    pub average_precision: BTreeMap<ObjectClass, f64>,
    /// Re-inference FP rate (%) on held-out artifact frames, by positive class.
    pub held_out_fp_rate: BTreeMap<ObjectClass, f64>,
    /// Re-inference FP rate (%) on the model's own negative training images.
    pub trained_fp_rate: BTreeMap<ObjectClass, f64>,
    pub fire_alarms_per_day: f64,
    pub person_alarms_per_day: f64,
    /// Held-out alarms per day.
    pub alarm_series: AlarmSeries,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub rounds: Vec<RoundSummary>,
}

#[derive(Debug, Clone)]
struct Evaluation {
    metrics: MetricSnapshot,
    series: AlarmSeries,
}

/// Training hook backed by the toy detector and the suite's held-out clips.
pub struct ToyHook<'a> {
    suite: &'a ScenarioSuite,
    cfg: &'a LoopConfig,
    images: HashMap<String, Raster>,
    held_out: Vec<(Raster, GroundTruthFrame)>,
    models: HashMap<String, ToyDetectorModel>,
    /// Negative training images per model, with the positive class they imitate.
    trained_fp: HashMap<String, Vec<(String, ObjectClass)>>,
    evaluations: HashMap<String, Evaluation>,
}

impl<'a> ToyHook<'a> {
    pub fn new(suite: &'a ScenarioSuite, cfg: &'a LoopConfig) -> Result<Self, SimulationError> {
        let mut held_out = Vec::new();
        for spec in &suite.held_out {
            for (f, r, t) in ScenarioFrames::new(spec)? {
                if f % cfg.eval_stride.max(1) == 0 {
                    held_out.push((r, t));
                }
            }
        }
        Ok(Self {
            suite,
            cfg,
            images: HashMap::new(),
            held_out,
            models: HashMap::new(),
            trained_fp: HashMap::new(),
            evaluations: HashMap::new(),
        })
    }

    pub fn model(&self, model_id: &str) -> Option<&ToyDetectorModel> {
        self.models.get(model_id)
    }

    pub fn add_image(&mut self, image_ref: String, raster: Raster) {
        self.images.insert(image_ref, raster);
    }

    /// Renders the training clips into a labeled manifest.
    pub fn labeled_manifest(&mut self, name: &str) -> Result<DatasetManifest, SimulationError> {
        let mut entries = Vec::new();
        for spec in &self.suite.train {
            for (f, r, t) in ScenarioFrames::new(spec)? {
                if f % self.cfg.train_stride.max(1) != 0 || t.objects().is_empty() {
                    continue;
                }
                let image = spec.image_ref(f);
                entries.push(ManifestEntry {
                    image: image.clone(),
                    objects: t
                        .objects()
                        .iter()
                        .map(|o| ManifestObject {
                            bbox: o.bbox,
                            object_class: o.object_class,
                        })
                        .collect(),
                });
                self.images.insert(image, r);
            }
        }
        Ok(DatasetManifest::new(
            name,
            Provenance::Labeled,
            self.cfg.start,
            entries,
        )?)
    }

    fn run_evaluation(&self, model_id: &str) -> Result<Evaluation, SimulationError> {
        let model = self
            .models
            .get(model_id)
            .ok_or_else(|| SimulationError::MissingImage(format!("model {model_id}")))?;
        let mut metrics = MetricSnapshot::default();

        let mut dets = Vec::new();
        let mut truth = Vec::new();
        for (r, t) in &self.held_out {
            dets.extend(toy_infer(model, r, t.channel_id(), t.frame_index())?);
            truth.push(t.clone());
        }
        for class in ObjectClass::POSITIVE {
            match average_precision(&dets, &truth, class, DEFAULT_MATCH_IOU) {
                Ok(ap) => {
                    metrics.average_precision.insert(class, ap);
                }
                Err(EvaluationError::AbsentClass(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }

        let mut events: Vec<IncidentEvent> = Vec::new();
        let mut artifact_frames: BTreeMap<ObjectClass, Vec<Vec<Detection>>> = BTreeMap::new();
        for (day, clips) in self.suite.held_out_fp.iter().enumerate() {
            for (i, spec) in clips.iter().enumerate() {
                let mut monitor = ChannelMonitor::new(
                    spec.channel_id.clone(),
                    self.cfg.axis,
                    self.cfg.tracker.clone(),
                    self.cfg.rules.clone(),
                );
                let t0 = self.cfg.start + Duration::days(day as i64) + Duration::hours(i as i64 * 2 + 1);
                for (f, r, _) in ScenarioFrames::new(spec)? {
                    let d = toy_infer(model, &r, &spec.channel_id, f)?;
                    let t = t0 + Duration::milliseconds(f as i64 * FRAME_PERIOD_MS);
                    let out = monitor.process_frame(f, t, &d, Some(&spec.image_ref(f)))?;
                    events.extend(out.events);
                    for class in [ObjectClass::Person, ObjectClass::Fire] {
                        if spec.artifact_visible(f, class) {
                            artifact_frames.entry(class).or_default().push(d.clone());
                        }
                    }
                }
            }
        }
        for (class, frames) in &artifact_frames {
            let rate = fp_reinference_rate(frames, |d| d.clone(), *class)?;
            metrics.fp_reinference_rate.insert(format!("held_out/{class}"), rate);
        }

        let mut trained: BTreeMap<ObjectClass, Vec<Vec<Detection>>> = BTreeMap::new();
        for (image, class) in self.trained_fp.get(model_id).into_iter().flatten() {
            let r = self
                .images
                .get(image)
                .ok_or_else(|| SimulationError::MissingImage(image.clone()))?;
            trained.entry(*class).or_default().push(toy_infer(model, r, image, 0)?);
        }
        for (class, frames) in &trained {
            let rate = fp_reinference_rate(frames, |d| d.clone(), *class)?;
            metrics.fp_reinference_rate.insert(format!("trained/{class}"), rate);
        }

        let days = self.suite.held_out_fp.len().max(1);
        let range = (self.cfg.start, self.cfg.start + Duration::days(days as i64));
        let series = alarm_series(&events, Bucket::Day, Some(range));
        for ty in [EventType::Fire, EventType::Person] {
            let n: u64 = series.totals_for(ty).iter().sum();
            metrics
                .extra
                .insert(format!("{}_alarms_per_day", ty.as_str()), n as f64 / days as f64);
        }
        Ok(Evaluation { metrics, series })
    }
}

impl TrainingHook for ToyHook<'_> {
    fn train(&mut self, model_id: &str, training_set: &DatasetManifest) -> Result<(), HookError> {
        let (model, _) =
            toy_train(training_set, &self.images, &self.cfg.detector).map_err(|e| HookError(e.to_string()))?;
        let mut fp_images = BTreeSet::new();
        for e in training_set.entries() {
            for o in &e.objects {
                if let Some(p) = o.object_class.positive_counterpart() {
                    fp_images.insert((e.image.clone(), p));
                }
            }
        }
        self.trained_fp
            .insert(model_id.to_string(), fp_images.into_iter().collect());
        self.models.insert(model_id.to_string(), model);
        Ok(())
    }

    fn evaluate(&mut self, model_id: &str) -> Result<MetricSnapshot, HookError> {
        let ev = self.run_evaluation(model_id).map_err(|e| HookError(e.to_string()))?;
        let metrics = ev.metrics.clone();
        self.evaluations.insert(model_id.to_string(), ev);
        Ok(metrics)
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "trainer": "toy-nearest-prototype",
            "config": self.cfg.detector,
        })
    }
}

/// Reviews an event against the clip's truth at its last frame: presence
/// alarms need a same-class truth box at the match IoU, track alarms a car.
fn auto_verdict(spec: &ScenarioSpec, rec: &EventRecord) -> ReviewVerdict {
    let truth = spec.truth_at(rec.event.frame_end);
    let class = rec.event.event_type.presence_class().unwrap_or(ObjectClass::Car);
    let real = truth
        .objects()
        .iter()
        .any(|o| o.object_class == class && overlap_area_ratio(&o.bbox, &rec.event.evidence_box) >= DEFAULT_MATCH_IOU);
    ReviewVerdict {
        event_id: rec.id,
        verdict: if real {
            Verdict::TruePositive
        } else {
            Verdict::FalsePositive
        },
        negative_class: if real {
            None
        } else {
            rec.event
                .event_type
                .presence_class()
                .and_then(ObjectClass::negative_counterpart)
        },
        reviewer: "auto".into(),
        reviewed_at: rec.event.wall_clock,
    }
}

fn summary(
    round: usize,
    store: &CurationStore,
    hook: &ToyHook<'_>,
    model_id: &str,
    field: Option<FieldSummary>,
) -> Result<RoundSummary, SimulationError> {
    let composed = store.recompose(model_id)?;
    let ev = hook
        .evaluations
        .get(model_id)
        .ok_or_else(|| SimulationError::MissingImage(format!("evaluation of {model_id}")))?;
    let rate = |prefix: &str| -> BTreeMap<ObjectClass, f64> {
        [ObjectClass::Person, ObjectClass::Fire]
            .into_iter()
            .filter_map(|c| {
                ev.metrics
                    .fp_reinference_rate
                    .get(&format!("{prefix}/{c}"))
                    .map(|v| (c, *v))
            })
            .collect()
    };
    Ok(RoundSummary {
        round,
        model_id: model_id.to_string(),
        training_images: composed.images,
        training_counts: composed.counts,
        average_precision: ev.metrics.average_precision.clone(),
        held_out_fp_rate: rate("held_out"),
        trained_fp_rate: rate("trained"),
        fire_alarms_per_day: ev.metrics.extra.get("fire_alarms_per_day").copied().unwrap_or(0.0),
        person_alarms_per_day: ev.metrics.extra.get("person_alarms_per_day").copied().unwrap_or(0.0),
        alarm_series: ev.series.clone(),
        field,
    })
}

/// Round 0 trains on the labeled clips alone. Each later round runs the
/// incident pipeline with the current model over that round's field clips,
/// reviews every alarm against ground truth, and retrains through
/// [`CurationStore::loop_round`].
pub fn run_closed_loop(
    suite: &ScenarioSuite,
    rounds: usize,
    cfg: &LoopConfig,
) -> Result<ClosedLoopReport, SimulationError> {
    let mut hook = ToyHook::new(suite, cfg)?;
    run_closed_loop_with(&mut hook, rounds)
}

/// [`run_closed_loop`] on a caller-owned hook, so the trained models stay
/// available afterwards.
pub fn run_closed_loop_with(hook: &mut ToyHook<'_>, rounds: usize) -> Result<ClosedLoopReport, SimulationError> {
    let (suite, cfg) = (hook.suite, hook.cfg);
    if suite.train.is_empty() || suite.held_out.is_empty() || suite.held_out_fp.iter().all(Vec::is_empty) {
        return Err(SimulationError::IncompleteSuite(
            "train, held_out and held_out_fp clips are required".into(),
        ));
    }
    if rounds > 0 && suite.field.iter().all(Vec::is_empty) {
        return Err(SimulationError::IncompleteSuite(
            "field clips are required for retraining rounds".into(),
        ));
    }

    let mut store = CurationStore::in_memory();
    let labeled = hook.labeled_manifest("labeled")?;
    store.register_manifest(labeled)?;
    let baseline = store.register_baseline(
        ModelComposition::new(store.next_model_id(), vec!["labeled".into()])?,
        hook,
        cfg.start,
    )?;
    let mut report = ClosedLoopReport {
        rounds: vec![summary(0, &store, hook, &baseline.model_id, None)?],
    };

    let mut current = baseline.model_id;
    let mut next_id = 1u64;
    let field_rounds: Vec<&Vec<ScenarioSpec>> = suite.field.iter().filter(|f| !f.is_empty()).collect();
    for round in 1..=rounds {
        let clips = field_rounds[(round - 1) % field_rounds.len()];
        let model = hook.models.get(&current).expect("current model is trained").clone();
        let mut records = Vec::new();
        let mut verdicts = Vec::new();
        let mut field = FieldSummary {
            scenarios: clips.len(),
            ..FieldSummary::default()
        };
        let field_start = cfg.start + Duration::days(100 * round as i64);
        for (i, spec) in clips.iter().enumerate() {
            let mut monitor = ChannelMonitor::new(
                spec.channel_id.clone(),
                cfg.axis,
                cfg.tracker.clone(),
                cfg.rules.clone(),
            );
            let t0 = field_start + Duration::hours(i as i64);
            for (f, r, _) in ScenarioFrames::new(spec)? {
                field.frames += 1;
                let d = toy_infer(&model, &r, &spec.channel_id, f)?;
                let image = spec.image_ref(f);
                let out = monitor.process_frame(
                    f,
                    t0 + Duration::milliseconds(f as i64 * FRAME_PERIOD_MS),
                    &d,
                    Some(&image),
                )?;
                if out.events.is_empty() {
                    continue;
                }
                hook.add_image(image, r);
                for event in out.events {
                    *field.events.entry(event.event_type).or_default() += 1;
                    let rec = EventRecord {
                        id: next_id,
                        event,
                        review: None,
                    };
                    next_id += 1;
                    let v = auto_verdict(spec, &rec);
                    match v.verdict {
                        Verdict::TruePositive => field.true_positive += 1,
                        Verdict::FalsePositive => field.false_positive += 1,
                    }
                    verdicts.push(v);
                    records.push(rec);
                }
            }
        }
        let now = field_start + Duration::days(1);
        let r = store.loop_round(&current, &records, &verdicts, hook, now)?;
        field.collected = r.collected;
        current = r.new_model;
        report.rounds.push(summary(round, &store, hook, &current, Some(field))?);
    }
    Ok(report)
}
