//! HTTP JSON API over one loaded dataset, lag suite, set of shift references,
//! tipping-site configuration and record store.
//!
//! Reads run concurrently against an immutable [`Session`]. Intervention runs
//! and record mutations pass through a single writer gate; the cached result
//! of the latest run is swapped in atomically.

mod error;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use mcbw_core::dataset::{canonical_channels, channel_index, input_index, AnomalyDataset, FieldChannel, Provenance, Role, N_INPUTS};
use mcbw_core::emulator::LagSuite;
use mcbw_core::grid::{GridHierarchy, IcosahedralGrid, LatLonBox, RegionCatalog};
use mcbw_core::intervention::{run_scenario, Aggregation, InterventionScenario, ResponseBundle};
use mcbw_core::records::{export_csv, InterventionRecord, NewRecord, RecordStore};
use mcbw_core::shift::{DensityGrid, ShiftReference, ShiftScore};
use mcbw_core::tipping::{assess, SiteAssessment, SitesConfig, TippingSite};
use mcbw_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use error::{ApiError, ErrorBody};

pub const API_SCHEMA_VERSION: u32 = 1;

/// Map projections offered to clients; rendering happens client-side.
pub const PROJECTIONS_JSON: &str = include_str!("../config/projections.json");

pub fn projections() -> Vec<String> {
    serde_json::from_str(PROJECTIONS_JSON).expect("shipped projection list parses")
}

/// Everything a server instance works from.
#[derive(Debug)]
pub struct Session {
    /// Anomaly fields at the native grid level.
    pub dataset: AnomalyDataset,
    /// Raw fields on the same grid, if supplied.
    pub raw: Option<AnomalyDataset>,
    pub suite: Option<LagSuite>,
    /// One reference per input channel, canonical order.
    pub references: Option<Vec<ShiftReference>>,
    pub sites: SitesConfig,
    pub catalog: RegionCatalog,
}

impl Session {
    /// Checks that every artifact sits on the dataset's grid.
    pub fn validate(&self) -> Result<()> {
        let level = self.dataset.grid_level;
        self.dataset.validate()?;
        if self.dataset.provenance != Provenance::Anomaly {
            return Err(Error::InvalidArgument("the served dataset must hold anomalies".into()));
        }
        if let Some(raw) = &self.raw {
            raw.validate()?;
            if raw.grid_level != level || raw.n_months != self.dataset.n_months {
                return Err(Error::Shape(format!(
                    "raw dataset is level {} with {} months; anomalies are level {level} with {} months",
                    raw.grid_level, raw.n_months, self.dataset.n_months
                )));
            }
        }
        if let Some(suite) = &self.suite {
            if suite.grid_level() != level {
                return Err(Error::Shape(format!(
                    "lag suite is on grid level {} but the dataset is on level {level}",
                    suite.grid_level()
                )));
            }
            suite.check_dataset(&self.dataset)?;
        }
        if let Some(refs) = &self.references {
            if refs.len() != N_INPUTS {
                return Err(Error::Shape(format!("expected {N_INPUTS} shift references, got {}", refs.len())));
            }
            let nv = self.dataset.n_vertices();
            if let Some(r) = refs.iter().find(|r| r.n_vertices() != nv) {
                return Err(Error::Shape(format!(
                    "shift reference `{}` has {} vertices but grid level {level} has {nv}",
                    r.channel_id,
                    r.n_vertices()
                )));
            }
        }
        self.sites.validate()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub records_dir: PathBuf,
    /// Hard limit on one intervention run, gate wait included.
    pub run_timeout: Duration,
}

impl ServiceConfig {
    pub fn new(records_dir: impl Into<PathBuf>) -> Self {
        Self { records_dir: records_dir.into(), run_timeout: Duration::from_secs(60) }
    }
}

/// Result of the latest intervention run, kept for `/api/field` stage queries.
#[derive(Debug)]
struct RunCache {
    run_id: u64,
    baseline: Vec<f64>,
    perturbed: Vec<f64>,
    bundle: ResponseBundle,
}

pub struct AppState {
    session: Arc<Session>,
    grids: Arc<GridHierarchy>,
    cfg: ServiceConfig,
    gate: tokio::sync::Mutex<()>,
    records: RwLock<RecordStore>,
    last_run: RwLock<Option<Arc<RunCache>>>,
    next_run: AtomicU64,
}

impl AppState {
    pub fn new(session: Session, cfg: ServiceConfig) -> Result<Arc<Self>> {
        session.validate()?;
        let grids = GridHierarchy::new(session.dataset.grid_level)?;
        let records = RecordStore::open(&cfg.records_dir)?;
        Ok(Arc::new(Self {
            session: Arc::new(session),
            grids: Arc::new(grids),
            cfg,
            gate: tokio::sync::Mutex::new(()),
            records: RwLock::new(records),
            last_run: RwLock::new(None),
            next_run: AtomicU64::new(1),
        }))
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    fn last_run(&self) -> Option<Arc<RunCache>> {
        self.last_run.read().expect("run cache lock").clone()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/field", get(field))
        .route("/api/shift/{channel}", get(shift_density))
        .route("/api/intervention/run", post(run))
        .route("/api/records", post(create_record).get(list_records))
        .route("/api/records/export.csv", get(export_records))
        .route("/api/records/{id}", delete(delete_record))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Parses a JSON body, reporting the path of the first offending field.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let mut de = serde_json::Deserializer::from_slice(body);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." || path.is_empty() {
            ApiError::bad_request(format!("malformed JSON body: {inner}"))
        } else {
            ApiError::field(path, inner.to_string())
        }
    })?;
    de.end().map_err(|e| ApiError::bad_request(format!("malformed JSON body: {e}")))?;
    Ok(value)
}

fn ensure_finite<'a>(what: &str, values: impl IntoIterator<Item = &'a f64>) -> ApiResult<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "non_finite", format!("{what} contains non-finite values")))
    }
}

// ---------------------------------------------------------------- meta

#[derive(Serialize)]
struct GridLevel {
    level: usize,
    n_vertices: usize,
}

#[derive(Serialize)]
struct RegionEntry {
    name: String,
    #[serde(rename = "box")]
    bounds: LatLonBox,
}

#[derive(Serialize)]
struct Meta {
    schema_version: u32,
    channels: Vec<FieldChannel>,
    native_level: usize,
    grid_levels: Vec<GridLevel>,
    n_months: usize,
    start_year: i32,
    start_month: u32,
    lags: Vec<usize>,
    suite_loaded: bool,
    shift_loaded: bool,
    sites: Vec<TippingSite>,
    sites_note: String,
    regions: Vec<RegionEntry>,
    projections: Vec<String>,
    stages: Vec<&'static str>,
    last_run_id: Option<u64>,
}

async fn meta(State(st): State<Arc<AppState>>) -> Json<Meta> {
    let s = &st.session;
    let native = st.grids.native_level();
    Json(Meta {
        schema_version: API_SCHEMA_VERSION,
        channels: canonical_channels(),
        native_level: native,
        grid_levels: (0..=native)
            .map(|l| GridLevel { level: l, n_vertices: st.grids.level(l).expect("in range").len() })
            .collect(),
        n_months: s.dataset.n_months,
        start_year: s.dataset.start_year,
        start_month: s.dataset.start_month,
        lags: s.suite.as_ref().map(|x| x.lags()).unwrap_or_default(),
        suite_loaded: s.suite.is_some(),
        shift_loaded: s.references.is_some(),
        sites: s.sites.sites.clone(),
        sites_note: s.sites.note.clone(),
        regions: s.catalog.regions.iter().map(|(n, b)| RegionEntry { name: n.clone(), bounds: *b }).collect(),
        projections: projections(),
        stages: STAGES.to_vec(),
        last_run_id: st.last_run().map(|r| r.run_id),
    })
}

// ---------------------------------------------------------------- field

const STAGES: [&str; 6] = ["raw", "anomaly", "perturbed", "before", "after", "diff"];

#[derive(Serialize)]
struct FieldResponse {
    role: Role,
    channel: String,
    stage: String,
    level: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    time: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    run_id: Option<u64>,
    n_vertices: usize,
    values: Vec<f64>,
    lat: Vec<f64>,
    lon: Vec<f64>,
}

fn query_usize(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<usize>> {
    q.get(key)
        .map(|v| v.parse::<usize>().map_err(|_| ApiError::field(key, format!("`{v}` is not a non-negative integer"))))
        .transpose()
}

async fn field(State(st): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<FieldResponse>> {
    const KNOWN: [&str; 6] = ["role", "channel", "time", "level", "stage", "run_id"];
    if let Some(k) = q.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(ApiError::field(k.clone(), "unknown query parameter"));
    }
    let role = match q.get("role").map(String::as_str) {
        Some("input") => Role::Input,
        Some("output") => Role::Output,
        Some(other) => return Err(ApiError::field("role", format!("`{other}` is not input or output"))),
        None => return Err(ApiError::field("role", "required")),
    };
    let channel = q.get("channel").ok_or_else(|| ApiError::field("channel", "required"))?;
    let stage = q.get("stage").map(String::as_str).unwrap_or("anomaly");
    if !STAGES.contains(&stage) {
        return Err(ApiError::field("stage", format!("`{stage}` is not one of {}", STAGES.join(", "))));
    }
    let ci = channel_index(channel)
        .filter(|&c| (c < N_INPUTS) == (role == Role::Input))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no {role:?} channel `{channel}`").to_lowercase()))?;
    let native = st.grids.native_level();
    let level = query_usize(&q, "level")?.unwrap_or(native);
    if level > native {
        return Err(ApiError::field("level", format!("level {level} is finer than the native level {native}")));
    }
    let time = query_usize(&q, "time")?;
    let ds = &st.session.dataset;
    let nv = ds.n_vertices();

    let month = |time: Option<usize>| -> ApiResult<usize> {
        let t = time.ok_or_else(|| ApiError::field("time", "required for this stage"))?;
        if t >= ds.n_months {
            return Err(ApiError::field("time", format!("month {t} is outside the {}-month record", ds.n_months)));
        }
        Ok(t)
    };
    let (native_values, time, run_id): (Vec<f64>, Option<usize>, Option<u64>) = match stage {
        "raw" => {
            let raw = st.session.raw.as_ref().ok_or_else(|| ApiError::conflict("stage_unavailable", "no raw dataset is loaded"))?;
            let t = month(time)?;
            (raw.frame(ci, t).iter().map(|&v| v as f64).collect(), Some(t), None)
        }
        "anomaly" => {
            let t = month(time)?;
            (ds.frame(ci, t).iter().map(|&v| v as f64).collect(), Some(t), None)
        }
        _ => {
            let run = st.last_run().ok_or_else(|| ApiError::conflict("not_computed", format!("stage `{stage}` needs a completed intervention run")))?;
            if let Some(id) = query_usize(&q, "run_id")? {
                if id as u64 != run.run_id {
                    return Err(ApiError::conflict("stale_run", format!("run {id} has been replaced by run {}", run.run_id)));
                }
            }
            let (before, after) = match role {
                Role::Input => (&run.baseline, &run.perturbed),
                Role::Output => {
                    if stage == "perturbed" {
                        return Err(ApiError::field("stage", "`perturbed` applies to input channels"));
                    }
                    (&run.bundle.before, &run.bundle.after)
                }
            };
            let c = if role == Role::Input { ci } else { ci - N_INPUTS };
            let slice = |v: &[f64]| v[c * nv..(c + 1) * nv].to_vec();
            let values = match stage {
                "perturbed" | "after" => slice(after),
                "before" => slice(before),
                _ if role == Role::Output => slice(&run.bundle.diff),
                _ => slice(after).iter().zip(slice(before)).map(|(a, b)| a - b).collect(),
            };
            (values, None, Some(run.run_id))
        }
    };
    let values = if level == native { native_values } else { st.grids.coarsen_to(&native_values, level)? };
    ensure_finite("field", &values)?;
    let g = st.grids.level(level).expect("checked");
    Ok(Json(FieldResponse {
        role,
        channel: channel.clone(),
        stage: stage.into(),
        level,
        time,
        run_id,
        n_vertices: g.len(),
        values,
        lat: g.vertices().iter().map(|v| v.lat).collect(),
        lon: g.vertices().iter().map(|v| v.lon).collect(),
    }))
}

// ---------------------------------------------------------------- shift density

#[derive(Serialize)]
struct ShiftView {
    channel: String,
    explained: Vec<f64>,
    ood_threshold: f64,
    density: DensityGrid,
}

async fn shift_density(
    State(st): State<Arc<AppState>>,
    Path(channel): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<ShiftView>> {
    let refs = st.session.references.as_ref().ok_or_else(|| ApiError::conflict("missing_references", "no shift references are loaded"))?;
    let c = input_index(&channel).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no input channel `{channel}`")))?;
    let n = query_usize(&q, "n")?.unwrap_or(40);
    let r = &refs[c];
    let density = r.density_grid(n)?;
    ensure_finite("density", density.x.iter().chain(&density.y))?;
    // log-density may underflow to −∞ far from the data; clamp for JSON
    let floor = r.table[0] - 50.0;
    let density = DensityGrid { log_density: density.log_density.iter().map(|v| v.max(floor)).collect(), ..density };
    Ok(Json(ShiftView { channel, explained: r.explained.clone(), ood_threshold: r.ood_threshold, density }))
}

// ---------------------------------------------------------------- intervention

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelSummary {
    pub channel: String,
    /// Area-weighted global means.
    pub before_mean: f64,
    pub after_mean: f64,
    pub diff_mean: f64,
    pub diff_min: f64,
    pub diff_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelShift {
    pub channel: String,
    pub baseline: ShiftScore,
    pub perturbed: ShiftScore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResponse {
    pub run_id: u64,
    pub lags: Vec<usize>,
    pub aggregation: Aggregation,
    pub reference_time: Option<usize>,
    pub n_forced_vertices: usize,
    pub summary: Vec<ChannelSummary>,
    pub shift: Vec<ChannelShift>,
    pub tipping: Vec<SiteAssessment>,
}

fn compute_run(session: &Session, grid: &IcosahedralGrid, scenario: &InterventionScenario, run_id: u64) -> Result<(RunCache, RunResponse)> {
    let suite = session.suite.as_ref().expect("checked by caller");
    let refs = session.references.as_ref().expect("checked by caller");
    let run = run_scenario(&session.dataset, suite, grid, &session.catalog, scenario)?;
    let nv = grid.len();
    let b = &run.bundle;
    let summary = mcbw_core::dataset::output_ids()
        .enumerate()
        .map(|(c, id)| {
            let s = c * nv..(c + 1) * nv;
            let d = &b.diff[s.clone()];
            ChannelSummary {
                channel: id.into(),
                before_mean: grid.global_mean(&b.before[s.clone()]),
                after_mean: grid.global_mean(&b.after[s]),
                diff_mean: grid.global_mean(d),
                diff_min: d.iter().copied().fold(f64::INFINITY, f64::min),
                diff_max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let shift = scenario
        .perturbations
        .keys()
        .map(|id| {
            let c = input_index(id).expect("validated");
            let s = c * nv..(c + 1) * nv;
            Ok(ChannelShift {
                channel: id.clone(),
                baseline: refs[c].score(&run.baseline[s.clone()])?,
                perturbed: refs[c].score(&run.perturbed[s])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tipping = assess(b, &session.sites, grid)?;
    let response = RunResponse {
        run_id,
        lags: b.lags.clone(),
        aggregation: b.aggregation,
        reference_time: (!scenario.climatological_baseline).then_some(scenario.reference_time),
        n_forced_vertices: run.weights.iter().filter(|w| **w > 0.0).count(),
        summary,
        shift,
        tipping,
    };
    let cache = RunCache { run_id, baseline: run.baseline, perturbed: run.perturbed, bundle: run.bundle };
    Ok((cache, response))
}

fn check_run_finite(r: &RunResponse, c: &RunCache) -> ApiResult<()> {
    let summary = r.summary.iter().flat_map(|s| [&s.before_mean, &s.after_mean, &s.diff_mean, &s.diff_min, &s.diff_max]);
    let shift = r.shift.iter().flat_map(|s| {
        s.baseline.coords.iter().chain(&s.perturbed.coords).chain([&s.baseline.percentile, &s.perturbed.percentile])
    });
    let tipping = r.tipping.iter().flat_map(|t| [&t.percent_change.psl, &t.percent_change.pr, &t.percent_change.tas]);
    ensure_finite("run summary", summary.chain(shift).chain(tipping))?;
    ensure_finite("response fields", c.bundle.before.iter().chain(&c.bundle.after).chain(&c.perturbed))
}

async fn run(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<RunResponse>> {
    let scenario: InterventionScenario = parse_body(&body)?;
    scenario.validate()?;
    if st.session.suite.is_none() {
        return Err(ApiError::conflict("missing_suite", "no lag suite is loaded"));
    }
    if st.session.references.is_none() {
        return Err(ApiError::conflict("missing_references", "no shift references are loaded"));
    }
    let started = std::time::Instant::now();
    let timed_out = || {
        ApiError::new(StatusCode::GATEWAY_TIMEOUT, "timeout", format!("intervention run exceeded {:?}", st.cfg.run_timeout))
    };
    let work = async {
        let _writer = st.gate.lock().await;
        let run_id = st.next_run.fetch_add(1, Ordering::SeqCst);
        let (session, grids) = (st.session.clone(), st.grids.clone());
        let (cache, response) = tokio::task::spawn_blocking(move || compute_run(&session, grids.native(), &scenario, run_id))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
        check_run_finite(&response, &cache)?;
        // a run that finished past its budget is still a timeout; don't publish it
        if started.elapsed() > st.cfg.run_timeout {
            return Err(timed_out());
        }
        *st.last_run.write().expect("run cache lock") = Some(Arc::new(cache));
        Ok::<_, ApiError>(response)
    };
    match tokio::time::timeout(st.cfg.run_timeout, work).await {
        Ok(r) => r.map(Json),
        Err(_) => Err(timed_out()),
    }
}

// ---------------------------------------------------------------- records

async fn create_record(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<InterventionRecord>)> {
    let new: NewRecord = parse_body(&body)?;
    let _writer = st.gate.lock().await;
    let rec = st.records.write().expect("records lock").append(new)?;
    Ok((StatusCode::CREATED, Json(rec)))
}

async fn list_records(State(st): State<Arc<AppState>>) -> Json<Vec<InterventionRecord>> {
    Json(st.records.read().expect("records lock").list().to_vec())
}

async fn delete_record(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<InterventionRecord>> {
    let id: u64 = id.parse().map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("record `{id}`")))?;
    let _writer = st.gate.lock().await;
    let rec = st.records.write().expect("records lock").delete(id)?;
    Ok(Json(rec))
}

async fn export_records(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    let bytes = export_csv(st.records.read().expect("records lock").list())?;
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8"),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"records.csv\""),
        ],
        bytes,
    )
        .into_response())
}
