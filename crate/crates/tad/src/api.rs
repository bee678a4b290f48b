//! HTTP review API over the event store and the curation registry.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::Serialize;
use serde_json::{json, Value};
use tad_core::curation::{CurationError, CurationStore, EventRecord, ReviewVerdict, TrainingHook, Verdict};
use tad_core::evaluation::{alarm_series, Bucket};
use tad_core::incidents::{EventType, IncidentEvent};
use tad_core::ObjectClass;

use crate::store::{EventFilter, EventStore, ReviewStatus, StoreError};

pub const DEFAULT_PER_PAGE: usize = 50;
pub const MAX_PER_PAGE: usize = 500;

pub type Trainer = Box<dyn TrainingHook + Send + Sync>;

pub struct AppState {
    pub events: EventStore,
    pub curation: Option<CurationStore>,
    pub trainer: Option<Trainer>,
}

pub type SharedState = Arc<RwLock<AppState>>;

pub fn shared(events: EventStore, curation: Option<CurationStore>, trainer: Option<Trainer>) -> SharedState {
    Arc::new(RwLock::new(AppState {
        events,
        curation,
        trainer,
    }))
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/events", get(list_events))
        .route("/events/{id}", get(get_event))
        .route("/events/{id}/verdict", post(post_verdict))
        .route("/stats/alarms", get(alarms))
        .route("/models", get(models))
        .route("/curation/round", post(curation_round))
        .with_state(state)
}

/// JSON error body: `{"error": .., "fields": {name: problem}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: BTreeMap<String, String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            fields: BTreeMap::new(),
        }
    }

    fn invalid(fields: BTreeMap<String, String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: "invalid request".into(),
            fields,
        }
    }

    fn not_found(id: u64) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("event {id} does not exist"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if !self.fields.is_empty() {
            body["fields"] = json!(self.fields);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownEvent(id) => Self::not_found(id),
            StoreError::Verdict(CurationError::InvalidVerdict { reason, .. }) => {
                Self::invalid(BTreeMap::from([("negative_class".to_string(), reason)]))
            }
            other => Self::internal(other),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn read(state: &SharedState) -> std::sync::RwLockReadGuard<'_, AppState> {
    state.read().unwrap_or_else(|p| p.into_inner())
}

/// Runs a mutation on the blocking pool under the write lock.
async fn write<T: Send + 'static>(
    state: &SharedState,
    f: impl FnOnce(&mut AppState) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut guard = state.write().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    })
    .await
    .map_err(ApiError::internal)?
}

fn parse_id(raw: &str) -> ApiResult<u64> {
    raw.parse()
        .map_err(|_| ApiError::invalid(BTreeMap::from([("id".into(), format!("`{raw}` is not an event id"))])))
}

/// Parses query parameters, collecting one diagnostic per bad field.
struct Params {
    raw: HashMap<String, String>,
    errors: BTreeMap<String, String>,
}

impl Params {
    fn new(raw: HashMap<String, String>, allowed: &[&str]) -> Self {
        let errors = raw
            .keys()
            .filter(|k| !allowed.contains(&k.as_str()))
            .map(|k| (k.clone(), "unknown parameter".to_string()))
            .collect();
        Self { raw, errors }
    }

    fn get<T: std::str::FromStr>(&mut self, name: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw.get(name)?;
        match v.parse() {
            Ok(x) => Some(x),
            Err(e) => {
                self.errors.insert(name.into(), e.to_string());
                None
            }
        }
    }

    fn finish(self) -> ApiResult<()> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(ApiError::invalid(self.errors))
        }
    }
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Serialize)]
struct EventView {
    #[serde(flatten)]
    record: EventRecord,
    /// Still image of the evidence frame, `<channel>/<frame>` when none was recorded.
    image: String,
}

impl From<EventRecord> for EventView {
    fn from(record: EventRecord) -> Self {
        Self {
            image: record.image_ref(),
            record,
        }
    }
}

fn event_filter(p: &mut Params) -> EventFilter {
    EventFilter {
        status: p.get::<ReviewStatus>("status"),
        event_type: p.get::<EventType>("type"),
        channel: p.get::<String>("channel"),
    }
}

async fn list_events(
    State(state): State<SharedState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let mut p = Params::new(q, &["status", "type", "channel", "page", "per_page"]);
    let filter = event_filter(&mut p);
    let page = p.get::<usize>("page").unwrap_or(1);
    let per_page = p.get::<usize>("per_page").unwrap_or(DEFAULT_PER_PAGE);
    if page == 0 {
        p.errors.insert("page".into(), "pages start at 1".into());
    }
    if per_page == 0 || per_page > MAX_PER_PAGE {
        p.errors
            .insert("per_page".into(), format!("must lie in 1..={MAX_PER_PAGE}"));
    }
    p.finish()?;
    let page = read(&state).events.page(&filter, page, per_page);
    let events: Vec<EventView> = page.events.into_iter().map(EventView::from).collect();
    Ok(Json(json!({
        "page": page.page,
        "per_page": page.per_page,
        "total": page.total,
        "events": events,
    })))
}

async fn get_event(State(state): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<EventView>> {
    let id = parse_id(&id)?;
    let rec = read(&state)
        .events
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(id))?;
    Ok(Json(rec.into()))
}

fn parse_verdict(id: u64, body: &Value, now: DateTime<Utc>) -> ApiResult<ReviewVerdict> {
    let Some(obj) = body.as_object() else {
        return Err(ApiError::invalid(BTreeMap::from([(
            "body".into(),
            "expected a JSON object".into(),
        )])));
    };
    let mut errors = BTreeMap::new();
    for k in obj.keys() {
        if !["event_id", "verdict", "negative_class", "reviewer", "reviewed_at"].contains(&k.as_str()) {
            errors.insert(k.clone(), "unknown field".to_string());
        }
    }
    let verdict = match obj.get("verdict") {
        None => {
            errors.insert("verdict".into(), "required".into());
            None
        }
        Some(v) => serde_json::from_value::<Verdict>(v.clone())
            .map_err(|_| errors.insert("verdict".into(), "expected true_positive or false_positive".into()))
            .ok(),
    };
    let negative_class = match obj.get("negative_class") {
        None | Some(Value::Null) => None,
        Some(v) => match serde_json::from_value::<ObjectClass>(v.clone()) {
            Ok(c) => Some(c),
            Err(_) => {
                errors.insert("negative_class".into(), format!("unknown class {v}"));
                None
            }
        },
    };
    let reviewer = match obj.get("reviewer").and_then(Value::as_str) {
        Some(r) if !r.trim().is_empty() => Some(r.to_string()),
        _ => {
            errors.insert("reviewer".into(), "required non-empty string".into());
            None
        }
    };
    let reviewed_at = match obj.get("reviewed_at") {
        None | Some(Value::Null) => Some(now),
        Some(v) => serde_json::from_value::<DateTime<Utc>>(v.clone())
            .map_err(|_| errors.insert("reviewed_at".into(), "expected an RFC 3339 timestamp".into()))
            .ok(),
    };
    match obj.get("event_id") {
        None | Some(Value::Null) => {}
        Some(v) if v.as_u64() == Some(id) => {}
        Some(v) => {
            errors.insert("event_id".into(), format!("{v} does not match the path id {id}"));
        }
    }
    match (verdict, reviewer, reviewed_at) {
        (Some(verdict), Some(reviewer), Some(reviewed_at)) if errors.is_empty() => Ok(ReviewVerdict {
            event_id: id,
            verdict,
            negative_class,
            reviewer,
            reviewed_at,
        }),
        _ => Err(ApiError::invalid(errors)),
    }
}

async fn post_verdict(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<(StatusCode, Json<EventView>)> {
    let id = parse_id(&id)?;
    if read(&state).events.get(id).is_none() {
        return Err(ApiError::not_found(id));
    }
    let body: Value = serde_json::from_slice(&body)
        .map_err(|e| ApiError::invalid(BTreeMap::from([("body".into(), format!("not JSON: {e}"))])))?;
    let verdict = parse_verdict(id, &body, Utc::now())?;
    let out = write(&state, move |s| Ok(s.events.record_verdict(verdict)?)).await?;
    let status = if out.appended {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    };
    Ok((status, Json(out.record.into())))
}

async fn alarms(State(state): State<SharedState>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<Value>> {
    let mut p = Params::new(q, &["bucket", "type", "channel", "status", "from", "to"]);
    let bucket = p.get::<Bucket>("bucket").unwrap_or(Bucket::Day);
    let filter = event_filter(&mut p);
    let from = p.get::<DateTime<Utc>>("from");
    let to = p.get::<DateTime<Utc>>("to");
    let range = match (from, to) {
        (Some(a), Some(b)) if a < b => Some((a, b)),
        (Some(_), Some(_)) => {
            p.errors.insert("to".into(), "must be after from".into());
            None
        }
        (None, None) => None,
        _ => {
            p.errors.insert("from".into(), "from and to go together".into());
            None
        }
    };
    p.finish()?;
    let events: Vec<IncidentEvent> = read(&state)
        .events
        .events()
        .iter()
        .filter(|r| filter.matches(r))
        .map(|r| r.event.clone())
        .collect();
    let series = alarm_series(&events, bucket, range);
    Ok(Json(json!({ "total": series.total(), "series": series })))
}

async fn models(State(state): State<SharedState>) -> Json<Value> {
    let s = read(&state);
    let models = s.curation.as_ref().map(|c| c.models().to_vec()).unwrap_or_default();
    Json(json!({ "models": models }))
}

async fn curation_round(State(state): State<SharedState>, body: axum::body::Bytes) -> ApiResult<Json<Value>> {
    let body: Value = if body.is_empty() {
        json!({})
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::invalid(BTreeMap::from([("body".into(), format!("not JSON: {e}"))])))?
    };
    let model = match body.get("model") {
        None | Some(Value::Null) => None,
        Some(Value::String(m)) => Some(m.clone()),
        Some(_) => {
            return Err(ApiError::invalid(BTreeMap::from([(
                "model".into(),
                "expected a model id".into(),
            )])))
        }
    };
    write(&state, move |s| {
        let AppState {
            events,
            curation,
            trainer,
        } = s;
        let conflict = |m: &str| ApiError::new(StatusCode::CONFLICT, m);
        let curation = curation
            .as_mut()
            .ok_or_else(|| conflict("no curation store is configured"))?;
        let trainer = trainer.as_mut().ok_or_else(|| conflict("no trainer is configured"))?;
        let current = match model {
            Some(m) => m,
            None => curation
                .latest_model()
                .ok_or_else(|| conflict("no baseline model is registered"))?
                .model_id
                .clone(),
        };
        let verdicts = events.current_verdicts();
        let report = curation
            .loop_round(&current, events.events(), &verdicts, trainer.as_mut(), Utc::now())
            .map_err(|e| match e {
                CurationError::UnknownModel(m) => ApiError::new(StatusCode::NOT_FOUND, format!("unknown model `{m}`")),
                CurationError::Hook(h) => ApiError::new(StatusCode::BAD_GATEWAY, format!("training hook failed: {h}")),
                other => ApiError::internal(other),
            })?;
        Ok(Json(json!(report)))
    })
    .await
}
