//! False-positive curation: turn reviewed field alarms into negative-class
//! training data, compose training sets from registered manifests, and run
//! retraining rounds against a pluggable training hook.
//!
//! On disk a curation store is a directory:
//!
//! ```text
//! manifests.jsonl        registration order, one {"name", "file"} per line
//! manifests/<name>.json  one manifest document each
//! models.jsonl           append-only model registry
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::ObjectClass;
use crate::geometry::BoundingBox;
use crate::incidents::{EventType, IncidentEvent};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("verdicts reference unknown events: {0:?}")]
    UnknownEvents(Vec<u64>),
    #[error("invalid verdict for event {event_id}: {reason}")]
    InvalidVerdict { event_id: u64, reason: String },
    #[error("manifest `{name}` is invalid: {reason}")]
    InvalidManifest { name: String, reason: String },
    #[error("composition `{name}` is invalid: {reason}")]
    InvalidComposition { name: String, reason: String },
    #[error("unresolved manifest names: {0:?}")]
    UnresolvedManifests(Vec<String>),
    #[error("manifest `{0}` is already registered")]
    DuplicateManifest(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("model `{0}` is already registered")]
    DuplicateModel(String),
    #[error("training hook failed: {0}")]
    Hook(#[from] HookError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt record in {path} line {line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CurationError + '_ {
    move |source| CurationError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Labeled,
    FpCollected,
    /// Merged training set handed to a trainer.
    Composed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "class")]
    pub object_class: ObjectClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub objects: Vec<ManifestObject>,
}

/// Object count per class; every class is always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassCounts(BTreeMap<ObjectClass, u64>);

impl Default for ClassCounts {
    fn default() -> Self {
        Self(ObjectClass::ALL.into_iter().map(|c| (c, 0)).collect())
    }
}

impl ClassCounts {
    pub fn get(&self, class: ObjectClass) -> u64 {
        self.0.get(&class).copied().unwrap_or(0)
    }

    pub fn add(&mut self, class: ObjectClass, n: u64) {
        *self.0.entry(class).or_insert(0) += n;
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        for (c, n) in &other.0 {
            self.add(*c, *n);
        }
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ObjectClass, u64)> + '_ {
        self.0.iter().map(|(c, n)| (*c, *n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawManifest {
    name: String,
    provenance: Provenance,
    created: DateTime<Utc>,
    entries: Vec<ManifestEntry>,
}

/// Named collection of labeled images. Manifests collected from false
/// positives hold negative-class objects only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawManifest", into = "RawManifest")]
pub struct DatasetManifest {
    name: String,
    provenance: Provenance,
    created: DateTime<Utc>,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(
        name: impl Into<String>,
        provenance: Provenance,
        created: DateTime<Utc>,
        entries: Vec<ManifestEntry>,
    ) -> Result<Self, CurationError> {
        let name = name.into();
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(CurationError::InvalidManifest {
                reason: "name must be non-empty, not start with '.', and contain no path separators".into(),
                name,
            });
        }
        if provenance == Provenance::FpCollected {
            let positive = entries
                .iter()
                .flat_map(|e| &e.objects)
                .find(|o| !o.object_class.is_negative());
            if let Some(o) = positive {
                return Err(CurationError::InvalidManifest {
                    name,
                    reason: format!("fp_collected manifest contains positive class {}", o.object_class),
                });
            }
        }
        Ok(Self {
            name,
            provenance,
            created,
            entries,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn created(&self) -> DateTime<Utc> {
        self.created
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_count(&self) -> usize {
        self.entries.len()
    }

    pub fn class_counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for o in self.entries.iter().flat_map(|e| &e.objects) {
            c.add(o.object_class, 1);
        }
        c
    }

    pub fn load(path: &Path) -> Result<Self, CurationError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| CurationError::Corrupt {
            path: path.to_path_buf(),
            line: source.line(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CurationError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, json.as_bytes())
    }
}

impl TryFrom<RawManifest> for DatasetManifest {
    type Error = CurationError;

    fn try_from(r: RawManifest) -> Result<Self, Self::Error> {
        DatasetManifest::new(r.name, r.provenance, r.created, r.entries)
    }
}

impl From<DatasetManifest> for RawManifest {
    fn from(m: DatasetManifest) -> Self {
        RawManifest {
            name: m.name,
            provenance: m.provenance,
            created: m.created,
            entries: m.entries,
        }
    }
}

/// A model's training data: an ordered list of manifest names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelComposition {
    pub model_name: String,
    pub manifests: Vec<String>,
}

impl ModelComposition {
    pub fn new(model_name: impl Into<String>, manifests: Vec<String>) -> Result<Self, CurationError> {
        let c = Self {
            model_name: model_name.into(),
            manifests,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        let invalid = |reason: &str| CurationError::InvalidComposition {
            name: self.model_name.clone(),
            reason: reason.into(),
        };
        if self.manifests.is_empty() {
            return Err(invalid("at least one manifest is required"));
        }
        let mut seen = HashSet::new();
        if !self.manifests.iter().all(|m| seen.insert(m)) {
            return Err(invalid("manifest names must be unique"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    TruePositive,
    FalsePositive,
}

/// Human (or automatic) triage outcome for one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub event_id: u64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_class: Option<ObjectClass>,
    pub reviewer: String,
    pub reviewed_at: DateTime<Utc>,
}

impl ReviewVerdict {
    /// Checks the verdict against the type of the event it reviews: a false
    /// positive on a fire (person) event must carry `false_fire`
    /// (`false_person`); other verdicts carry no negative class.
    pub fn validate_for(&self, event_type: EventType) -> Result<(), CurationError> {
        let invalid = |reason: String| CurationError::InvalidVerdict {
            event_id: self.event_id,
            reason,
        };
        if self.reviewer.trim().is_empty() {
            return Err(invalid("reviewer must not be empty".into()));
        }
        let expected = event_type.presence_class().and_then(ObjectClass::negative_counterpart);
        match (self.verdict, expected, self.negative_class) {
            (Verdict::TruePositive, _, None) => Ok(()),
            (Verdict::TruePositive, _, Some(c)) => Err(invalid(format!(
                "true_positive verdicts carry no negative class, got {c}"
            ))),
            (Verdict::FalsePositive, Some(e), Some(c)) if c == e => Ok(()),
            (Verdict::FalsePositive, Some(e), Some(c)) => Err(invalid(format!(
                "{} event needs negative class {e}, got {c}",
                event_type.as_str()
            ))),
            (Verdict::FalsePositive, Some(e), None) => Err(invalid(format!(
                "false_positive on a {} event requires negative class {e}",
                event_type.as_str()
            ))),
            (Verdict::FalsePositive, None, None) => Ok(()),
            (Verdict::FalsePositive, None, Some(c)) => Err(invalid(format!(
                "{} events have no negative class, got {c}",
                event_type.as_str()
            ))),
        }
    }
}

/// A persisted incident with its store id and latest review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: u64,
    #[serde(flatten)]
    pub event: IncidentEvent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<ReviewVerdict>,
}

impl EventRecord {
    /// Still image reference, or `<channel>/<frame_end>` when none was recorded.
    pub fn image_ref(&self) -> String {
        self.event
            .image_ref
            .clone()
            .unwrap_or_else(|| format!("{}/{}", self.event.channel_id, self.event.frame_end))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectReport {
    pub manifest: DatasetManifest,
    /// Events whose verdict was true_positive; they add nothing.
    pub ignored_true_positive: Vec<u64>,
    /// False positives on stoppage/wrong-way events, which have no negative class.
    pub skipped_without_class: Vec<u64>,
    /// Event ids that produced manifest entries.
    pub consumed: Vec<u64>,
}

impl CollectReport {
    pub fn is_no_op(&self) -> bool {
        self.manifest.is_empty()
    }
}

/// Builds an `fp_collected` manifest with one entry per false-positive
/// fire/person event: the event's still image with its evidence box
/// relabeled to the verdict's negative class.
///
/// When an event has several verdicts the latest one decides.
pub fn collect_fp(
    name: &str,
    events: &[EventRecord],
    verdicts: &[ReviewVerdict],
    created: DateTime<Utc>,
) -> Result<CollectReport, CurationError> {
    let by_id: HashMap<u64, &EventRecord> = events.iter().map(|e| (e.id, e)).collect();
    let mut unknown: Vec<u64> = verdicts
        .iter()
        .map(|v| v.event_id)
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !unknown.is_empty() {
        unknown.sort_unstable();
        unknown.dedup();
        return Err(CurationError::UnknownEvents(unknown));
    }

    let mut latest: BTreeMap<u64, &ReviewVerdict> = BTreeMap::new();
    for v in verdicts {
        v.validate_for(by_id[&v.event_id].event.event_type)?;
        match latest.get(&v.event_id) {
            Some(prev) if prev.reviewed_at > v.reviewed_at => {}
            _ => {
                latest.insert(v.event_id, v);
            }
        }
    }

    let mut report = CollectReport {
        manifest: DatasetManifest::new(name, Provenance::FpCollected, created, Vec::new())?,
        ignored_true_positive: Vec::new(),
        skipped_without_class: Vec::new(),
        consumed: Vec::new(),
    };
    let mut entries = Vec::new();
    for (id, v) in latest {
        let rec = by_id[&id];
        match (v.verdict, v.negative_class) {
            (Verdict::TruePositive, _) => report.ignored_true_positive.push(id),
            (Verdict::FalsePositive, None) => report.skipped_without_class.push(id),
            (Verdict::FalsePositive, Some(class)) => {
                entries.push(ManifestEntry {
                    image: rec.image_ref(),
                    objects: vec![ManifestObject {
                        bbox: rec.event.evidence_box,
                        object_class: class,
                    }],
                });
                report.consumed.push(id);
            }
        }
    }
    report.manifest = DatasetManifest::new(name, Provenance::FpCollected, created, entries)?;
    Ok(report)
}

/// Registered manifests in registration order.
#[derive(Debug, Clone, Default)]
pub struct ManifestRegistry {
    manifests: Vec<DatasetManifest>,
}

impl ManifestRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, m: DatasetManifest) -> Result<(), CurationError> {
        if self.get(m.name()).is_some() {
            return Err(CurationError::DuplicateManifest(m.name().to_string()));
        }
        self.manifests.push(m);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DatasetManifest> {
        self.manifests.iter().find(|m| m.name() == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetManifest> {
        self.manifests.iter()
    }

    pub fn len(&self) -> usize {
        self.manifests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifests.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedSet {
    pub manifest: DatasetManifest,
    pub counts: ClassCounts,
    pub images: usize,
    /// Per-member counts, in merge order.
    pub members: Vec<(String, ClassCounts)>,
}

/// Concatenates the named manifests, in registry order then entry order,
/// into one training manifest named after the model.
pub fn compose_training_set(
    composition: &ModelComposition,
    registry: &ManifestRegistry,
) -> Result<ComposedSet, CurationError> {
    composition.validate()?;
    let missing: Vec<String> = composition
        .manifests
        .iter()
        .filter(|n| registry.get(n).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(CurationError::UnresolvedManifests(missing));
    }
    let wanted: HashSet<&str> = composition.manifests.iter().map(String::as_str).collect();
    let mut entries = Vec::new();
    let mut counts = ClassCounts::default();
    let mut members = Vec::new();
    let mut created = None::<DateTime<Utc>>;
    for m in registry.iter().filter(|m| wanted.contains(m.name())) {
        let c = m.class_counts();
        counts.merge(&c);
        members.push((m.name().to_string(), c));
        entries.extend(m.entries().iter().cloned());
        created = Some(created.map_or(m.created(), |t| t.max(m.created())));
    }
    let images = entries.len();
    let manifest = DatasetManifest::new(
        composition.model_name.clone(),
        Provenance::Composed,
        created.expect("composition has at least one manifest"),
        entries,
    )?;
    Ok(ComposedSet {
        manifest,
        counts,
        images,
        members,
    })
}

/// Evaluation numbers recorded for a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    #[serde(default)]
    pub average_precision: BTreeMap<ObjectClass, f64>,
    /// Re-inference false-positive rate (%) keyed by `<image set>/<class>`.
    #[serde(default)]
    pub fp_reinference_rate: BTreeMap<String, f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct HookError(pub String);

/// Trainer plugged into a curation round: the toy detector of the simulator
/// or an external training command.
pub trait TrainingHook {
    /// Trains a model called `model_id` on the composed training set.
    fn train(&mut self, model_id: &str, training_set: &DatasetManifest) -> Result<(), HookError>;

    /// Evaluates a previously trained model.
    fn evaluate(&mut self, model_id: &str) -> Result<MetricSnapshot, HookError>;

    /// Opaque description of the trainer, stored with each model record.
    fn metadata(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

/// Training conditions of the field detector, kept as opaque trainer
/// metadata. Nothing in this crate executes them.
pub fn reference_training_conditions() -> serde_json::Value {
    serde_json::json!({
        "deep_learning_model": "Faster R-CNN",
        "gpu": "NVIDIA GTX 1070",
        "os": "Linuxmint 18.3",
        "epoch": 10,
        "learning_rate": 0.001,
        "convolutional_layer": "VGGnet 16 layer",
    })
}

/// Runs an external trainer:
///
/// * `<program> <args..> train <manifest.json> <model_id>`: exit 0 on success.
/// * `<program> <args..> evaluate <model_id>`: prints a [`MetricSnapshot`]
///   JSON document on stdout.
///
/// The composed manifest is written to `work_dir/<model_id>.manifest.json`.
#[derive(Debug, Clone)]
pub struct CommandHook {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub work_dir: PathBuf,
    pub metadata: serde_json::Value,
}

impl CommandHook {
    pub fn new(program: impl Into<PathBuf>, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
            work_dir: work_dir.into(),
            metadata: reference_training_conditions(),
        }
    }

    fn run(&self, extra: &[&str]) -> Result<Vec<u8>, HookError> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .args(extra)
            .output()
            .map_err(|e| HookError(format!("cannot run {}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(HookError(format!(
                "{} {} exited with {}: {}",
                self.program.display(),
                extra.join(" "),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(out.stdout)
    }
}

impl TrainingHook for CommandHook {
    fn train(&mut self, model_id: &str, training_set: &DatasetManifest) -> Result<(), HookError> {
        fs::create_dir_all(&self.work_dir)
            .map_err(|e| HookError(format!("cannot create {}: {e}", self.work_dir.display())))?;
        let path = self.work_dir.join(format!("{model_id}.manifest.json"));
        training_set.save(&path).map_err(|e| HookError(e.to_string()))?;
        self.run(&["train", &path.to_string_lossy(), model_id])?;
        Ok(())
    }

    fn evaluate(&mut self, model_id: &str) -> Result<MetricSnapshot, HookError> {
        let stdout = self.run(&["evaluate", model_id])?;
        serde_json::from_slice(&stdout).map_err(|e| HookError(format!("evaluate output is not a metric snapshot: {e}")))
    }

    fn metadata(&self) -> serde_json::Value {
        self.metadata.clone()
    }
}

/// One line of the model registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub composition: ModelComposition,
    pub metrics: MetricSnapshot,
    pub created: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Events whose verdicts were folded into this model's training data.
    #[serde(default)]
    pub consumed_events: Vec<u64>,
    #[serde(default)]
    pub trainer: serde_json::Value,
}

/// Outcome of one retraining round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub previous_model: String,
    pub new_model: String,
    /// Name of the registered false-positive manifest; `None` for a no-op round.
    pub fp_manifest: Option<String>,
    pub collected: ClassCounts,
    pub training_counts: ClassCounts,
    pub training_images: usize,
    pub before: MetricSnapshot,
    pub after: MetricSnapshot,
    pub ignored_true_positive: Vec<u64>,
    pub skipped_without_class: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexLine {
    name: String,
    file: String,
}

/// Manifest and model registries, optionally persisted to a directory.
///
/// Mutating methods take `&mut self`; callers sharing a store serialize
/// writers behind a lock.
#[derive(Debug, Clone, Default)]
pub struct CurationStore {
    root: Option<PathBuf>,
    manifests: ManifestRegistry,
    models: Vec<ModelRecord>,
}

impl CurationStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CurationError> {
        let root = root.into();
        let mdir = root.join("manifests");
        fs::create_dir_all(&mdir).map_err(io_err(&mdir))?;
        let mut store = Self {
            root: Some(root.clone()),
            ..Self::default()
        };
        let index_path = root.join("manifests.jsonl");
        for line in read_jsonl::<IndexLine>(&index_path)? {
            let m = DatasetManifest::load(&mdir.join(&line.file))?;
            store.manifests.register(m)?;
        }
        store.models = read_jsonl(&root.join("models.jsonl"))?;
        Ok(store)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn manifests(&self) -> &ManifestRegistry {
        &self.manifests
    }

    pub fn models(&self) -> &[ModelRecord] {
        &self.models
    }

    pub fn model(&self, id: &str) -> Option<&ModelRecord> {
        self.models.iter().find(|m| m.model_id == id)
    }

    pub fn latest_model(&self) -> Option<&ModelRecord> {
        self.models.last()
    }

    /// Id the next registered model will get.
    pub fn next_model_id(&self) -> String {
        format!("model-{}", self.models.len())
    }

    pub fn consumed_events(&self) -> HashSet<u64> {
        self.models
            .iter()
            .flat_map(|m| m.consumed_events.iter().copied())
            .collect()
    }

    pub fn register_manifest(&mut self, m: DatasetManifest) -> Result<(), CurationError> {
        if self.manifests.get(m.name()).is_some() {
            return Err(CurationError::DuplicateManifest(m.name().to_string()));
        }
        let mut journal = Journal::default();
        if let Err(e) = self.persist_manifest(&m, &mut journal) {
            journal.rollback();
            return Err(e);
        }
        self.manifests.register(m)
    }

    /// Recomposes a registered model's training set.
    pub fn recompose(&self, model_id: &str) -> Result<ComposedSet, CurationError> {
        let rec = self
            .model(model_id)
            .ok_or_else(|| CurationError::UnknownModel(model_id.to_string()))?;
        compose_training_set(&rec.composition, &self.manifests)
    }

    /// Trains, evaluates and registers a first model on `composition`.
    pub fn register_baseline(
        &mut self,
        composition: ModelComposition,
        hook: &mut dyn TrainingHook,
        now: DateTime<Utc>,
    ) -> Result<ModelRecord, CurationError> {
        let model_id = self.next_model_id();
        let composed = compose_training_set(&composition, &self.manifests)?;
        hook.train(&model_id, &composed.manifest)?;
        let metrics = hook.evaluate(&model_id)?;
        let rec = ModelRecord {
            model_id,
            composition,
            metrics,
            created: now,
            parent: None,
            consumed_events: Vec::new(),
            trainer: hook.metadata(),
        };
        let mut journal = Journal::default();
        if let Err(e) = self.persist_model(&rec, &mut journal) {
            journal.rollback();
            return Err(e);
        }
        self.models.push(rec.clone());
        Ok(rec)
    }

    /// One self-enhancement round on top of `current_model`:
    /// collect false positives from `verdicts`, compose the previous
    /// training set plus the new negatives, train, evaluate, register.
    ///
    /// Verdicts on events already consumed by an earlier round are ignored.
    /// Nothing is registered unless every step succeeds.
    pub fn loop_round(
        &mut self,
        current_model: &str,
        events: &[EventRecord],
        verdicts: &[ReviewVerdict],
        hook: &mut dyn TrainingHook,
        now: DateTime<Utc>,
    ) -> Result<RoundReport, CurationError> {
        let current = self
            .model(current_model)
            .ok_or_else(|| CurationError::UnknownModel(current_model.to_string()))?
            .clone();
        let consumed = self.consumed_events();
        let fresh: Vec<ReviewVerdict> = verdicts
            .iter()
            .filter(|v| !consumed.contains(&v.event_id))
            .cloned()
            .collect();

        let model_id = self.next_model_id();
        let fp_name = format!("fp-{model_id}");
        let collected = collect_fp(&fp_name, events, &fresh, now)?;

        let mut registry = self.manifests.clone();
        let mut manifests = current.composition.manifests.clone();
        let fp_manifest = if collected.is_no_op() {
            None
        } else {
            registry.register(collected.manifest.clone())?;
            manifests.push(fp_name.clone());
            Some(collected.manifest.clone())
        };
        let composition = ModelComposition::new(model_id.clone(), manifests)?;
        let composed = compose_training_set(&composition, &registry)?;

        hook.train(&model_id, &composed.manifest)?;
        let after = hook.evaluate(&model_id)?;

        let rec = ModelRecord {
            model_id: model_id.clone(),
            composition,
            metrics: after.clone(),
            created: now,
            parent: Some(current.model_id.clone()),
            consumed_events: collected.consumed.clone(),
            trainer: hook.metadata(),
        };

        let mut journal = Journal::default();
        let persisted = fp_manifest
            .as_ref()
            .map_or(Ok(()), |m| self.persist_manifest(m, &mut journal))
            .and_then(|_| self.persist_model(&rec, &mut journal));
        if let Err(e) = persisted {
            journal.rollback();
            return Err(e);
        }
        self.manifests = registry;
        self.models.push(rec);

        Ok(RoundReport {
            previous_model: current.model_id,
            new_model: model_id,
            fp_manifest: fp_manifest.map(|m| m.name().to_string()),
            collected: collected.manifest.class_counts(),
            training_counts: composed.counts,
            training_images: composed.images,
            before: current.metrics,
            after,
            ignored_true_positive: collected.ignored_true_positive,
            skipped_without_class: collected.skipped_without_class,
        })
    }

    fn persist_manifest(&self, m: &DatasetManifest, journal: &mut Journal) -> Result<(), CurationError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let file = format!("{}.json", m.name());
        let path = root.join("manifests").join(&file);
        if path.exists() {
            return Err(CurationError::DuplicateManifest(m.name().to_string()));
        }
        m.save(&path)?;
        journal.created.push(path);
        let line = IndexLine {
            name: m.name().to_string(),
            file,
        };
        append_jsonl(&root.join("manifests.jsonl"), &line, journal)
    }

    fn persist_model(&self, rec: &ModelRecord, journal: &mut Journal) -> Result<(), CurationError> {
        match &self.root {
            Some(root) => append_jsonl(&root.join("models.jsonl"), rec, journal),
            None => Ok(()),
        }
    }
}

/// Undo log for a multi-file write.
#[derive(Default)]
struct Journal {
    created: Vec<PathBuf>,
    appended: Vec<(PathBuf, u64)>,
}

impl Journal {
    fn rollback(self) {
        for (path, len) in self.appended.into_iter().rev() {
            if let Ok(f) = OpenOptions::new().write(true).open(&path) {
                let _ = f.set_len(len);
            }
        }
        for path in self.created {
            let _ = fs::remove_file(path);
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CurationError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T, journal: &mut Journal) -> Result<(), CurationError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let len = f.metadata().map_err(io_err(path))?.len();
    journal.appended.push((path.to_path_buf(), len));
    let mut line = serde_json::to_string(value).expect("record serializes");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CurationError> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CurationError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}
