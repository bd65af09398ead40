//! Local HTTP service behind the mask selection UI: candidate galleries for the
//! training images, click-validated selections persisted to an append-only
//! journal, and the final selections file consumed by RL training.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Cursor, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{ImageFormat, RgbImage};
use lesionforge_core::candidates::{candidate_overlay, CenterOfMass, MaskCandidate, Selection};
use lesionforge_core::imaging::Point;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub const DEFAULT_PORT: u16 = 8741;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("port {port} is already in use")]
    PortInUse { port: u16 },
    #[error("journal {path}: {source}")]
    Journal { path: PathBuf, source: std::io::Error },
    #[error("duplicate image id {0}")]
    DuplicateImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A training image and its size-filtered candidates.
#[derive(Clone, Debug)]
pub struct ServedImage {
    pub id: String,
    pub image: RgbImage,
    pub candidates: Vec<MaskCandidate>,
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub run_id: String,
    pub journal_path: PathBuf,
    pub selections_path: PathBuf,
    /// Directory with the built UI; a placeholder page is served otherwise.
    pub static_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub image_id: String,
    pub chosen_cluster_id: u32,
    pub click: Point,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct SelectionRequest {
    pub cluster_id: u32,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub run_id: String,
    pub selected: usize,
    pub total: usize,
    pub complete: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageSummary {
    pub id: String,
    pub image_url: String,
    pub candidate_count: usize,
    pub selected: bool,
    pub selection: Option<SelectionRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidateView {
    pub cluster_id: u32,
    pub size: usize,
    pub center_of_mass: CenterOfMass,
    pub overlay_url: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidateGallery {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub image_url: String,
    pub candidates: Vec<CandidateView>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinalizeResponse {
    pub path: PathBuf,
    pub count: usize,
}

/// Error body for every non-2xx reply.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unselected: Vec<String>,
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Invalid(String),
    Incomplete(Vec<String>),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(e) => (StatusCode::NOT_FOUND, ErrorBody { error: e, unselected: vec![] }),
            ApiError::Invalid(e) => (StatusCode::UNPROCESSABLE_ENTITY, ErrorBody { error: e, unselected: vec![] }),
            ApiError::Incomplete(ids) => (
                StatusCode::CONFLICT,
                ErrorBody { error: format!("{} image(s) still need a selection", ids.len()), unselected: ids },
            ),
            ApiError::Internal(e) => (StatusCode::INTERNAL_SERVER_ERROR, ErrorBody { error: e, unselected: vec![] }),
        };
        (status, Json(body)).into_response()
    }
}

struct Writer {
    selections: BTreeMap<String, SelectionRecord>,
    journal: File,
}

/// Session state. Reads of the immutable gallery are lock-free; every
/// mutation goes through the single `writer` lock.
pub struct Session {
    config: SessionConfig,
    images: Vec<ServedImage>,
    index: HashMap<String, usize>,
    writer: Mutex<Writer>,
}

impl Session {
    /// Open the session, replaying any existing journal.
    pub fn open(config: SessionConfig, images: Vec<ServedImage>) -> Result<Arc<Self>, ServerError> {
        let mut index = HashMap::new();
        for (i, img) in images.iter().enumerate() {
            if index.insert(img.id.clone(), i).is_some() {
                return Err(ServerError::DuplicateImage(img.id.clone()));
            }
        }
        let journal_err = |source| ServerError::Journal { path: config.journal_path.clone(), source };
        if let Some(dir) = config.journal_path.parent() {
            fs::create_dir_all(dir).map_err(journal_err)?;
        }
        let mut session = Session {
            config: config.clone(),
            images,
            index,
            writer: Mutex::new(Writer {
                selections: BTreeMap::new(),
                journal: OpenOptions::new().create(true).append(true).open(&config.journal_path).map_err(journal_err)?,
            }),
        };
        let replayed = session.replay().map_err(journal_err)?;
        if replayed > 0 {
            info!("replayed {replayed} journal entries from {}", config.journal_path.display());
        }
        Ok(Arc::new(session))
    }

    fn replay(&mut self) -> std::io::Result<usize> {
        let reader = BufReader::new(File::open(&self.config.journal_path)?);
        let mut restored = BTreeMap::new();
        let mut count = 0;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<SelectionRecord>(&line) {
                Ok(rec) => match self.validate(&rec.image_id, rec.chosen_cluster_id, rec.click) {
                    Ok(()) => {
                        restored.insert(rec.image_id.clone(), rec);
                        count += 1;
                    }
                    Err(e) => warn!("journal line {}: {e:?}; ignored", n + 1),
                },
                Err(e) => warn!("journal line {} unreadable ({e}); ignored", n + 1),
            }
        }
        self.writer.get_mut().expect("fresh lock").selections = restored;
        Ok(count)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn images(&self) -> &[ServedImage] {
        &self.images
    }

    fn image(&self, id: &str) -> Result<&ServedImage, ApiError> {
        self.index.get(id).map(|&i| &self.images[i]).ok_or_else(|| ApiError::NotFound(format!("unknown image {id}")))
    }

    fn validate(&self, id: &str, cluster_id: u32, click: Point) -> Result<(), ApiError> {
        let img = self.image(id)?;
        let cand = img
            .candidates
            .iter()
            .find(|c| c.cluster_id == cluster_id)
            .ok_or_else(|| ApiError::Invalid(format!("cluster {cluster_id} is not a candidate for {id}")))?;
        if click.x >= cand.pixel_set.width() || click.y >= cand.pixel_set.height() {
            return Err(ApiError::Invalid(format!("click ({}, {}) lies outside the image", click.x, click.y)));
        }
        if !cand.pixel_set.contains(click) {
            return Err(ApiError::Invalid(format!(
                "click ({}, {}) lies outside cluster {cluster_id}; click inside the chosen mask",
                click.x, click.y
            )));
        }
        Ok(())
    }

    fn lock(&self) -> Result<std::sync::MutexGuard<'_, Writer>, ApiError> {
        self.writer.lock().map_err(|_| ApiError::Internal("session lock poisoned".into()))
    }

    /// Validate, journal (flushed to disk) and then apply a selection.
    pub fn select(&self, id: &str, req: &SelectionRequest) -> Result<SelectionRecord, ApiError> {
        let click = Point::new(req.x, req.y);
        self.validate(id, req.cluster_id, click)?;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let rec = SelectionRecord { image_id: id.to_string(), chosen_cluster_id: req.cluster_id, click, timestamp };
        let mut line = serde_json::to_string(&rec).map_err(|e| ApiError::Internal(e.to_string()))?;
        line.push('\n');
        let mut w = self.lock()?;
        w.journal
            .write_all(line.as_bytes())
            .and_then(|()| w.journal.sync_data())
            .map_err(|e| ApiError::Internal(format!("journal write failed: {e}")))?;
        w.selections.insert(id.to_string(), rec.clone());
        Ok(rec)
    }

    pub fn selection(&self, id: &str) -> Option<SelectionRecord> {
        self.writer.lock().ok()?.selections.get(id).cloned()
    }

    pub fn progress(&self) -> Progress {
        let selected = self.writer.lock().map(|w| w.selections.len()).unwrap_or(0);
        let total = self.images.len();
        Progress { run_id: self.config.run_id.clone(), selected, total, complete: selected == total }
    }

    /// Selections in image order, or the ids still missing one.
    pub fn selections(&self) -> Result<Vec<Selection>, ApiError> {
        let w = self.lock()?;
        let missing: Vec<String> =
            self.images.iter().filter(|i| !w.selections.contains_key(&i.id)).map(|i| i.id.clone()).collect();
        if !missing.is_empty() {
            return Err(ApiError::Incomplete(missing));
        }
        Ok(self
            .images
            .iter()
            .map(|i| {
                let r = &w.selections[&i.id];
                Selection {
                    image_id: r.image_id.clone(),
                    chosen_cluster_id: r.chosen_cluster_id,
                    click_x: r.click.x,
                    click_y: r.click.y,
                }
            })
            .collect())
    }

    /// Write the selections file (atomically replaced; identical content for
    /// an unchanged session).
    pub fn finalize(&self) -> Result<FinalizeResponse, ApiError> {
        let selections = self.selections()?;
        let path = &self.config.selections_path;
        write_selections(path, &selections).map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
        info!("wrote {} selections to {}", selections.len(), path.display());
        Ok(FinalizeResponse { path: path.clone(), count: selections.len() })
    }
}

/// Pretty JSON array of selections, written via a temporary file and rename.
pub fn write_selections(path: &Path, selections: &[Selection]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(selections)?;
    bytes.push(b'\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)
}

fn png_response(img: &RgbImage) -> Result<Response, ApiError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], buf.into_inner()).into_response())
}

type Shared = Arc<Session>;

async fn list_images(State(s): State<Shared>) -> Json<Vec<ImageSummary>> {
    Json(
        s.images
            .iter()
            .map(|img| {
                let selection = s.selection(&img.id);
                ImageSummary {
                    id: img.id.clone(),
                    image_url: format!("/api/images/{}/image.png", img.id),
                    candidate_count: img.candidates.len(),
                    selected: selection.is_some(),
                    selection,
                }
            })
            .collect(),
    )
}

async fn candidates(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<CandidateGallery>, ApiError> {
    let img = s.image(&id)?;
    Ok(Json(CandidateGallery {
        image_id: id.clone(),
        width: img.image.width() as usize,
        height: img.image.height() as usize,
        image_url: format!("/api/images/{id}/image.png"),
        candidates: img
            .candidates
            .iter()
            .map(|c| CandidateView {
                cluster_id: c.cluster_id,
                size: c.size,
                center_of_mass: c.center_of_mass,
                overlay_url: format!("/api/images/{id}/overlay/{}.png", c.cluster_id),
            })
            .collect(),
    }))
}

async fn base_image(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    png_response(&s.image(&id)?.image)
}

async fn overlay(State(s): State<Shared>, UrlPath((id, file)): UrlPath<(String, String)>) -> Result<Response, ApiError> {
    let img = s.image(&id)?;
    let cluster: u32 = file
        .strip_suffix(".png")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| ApiError::NotFound(format!("no overlay named {file}")))?;
    let cand = img
        .candidates
        .iter()
        .find(|c| c.cluster_id == cluster)
        .ok_or_else(|| ApiError::NotFound(format!("cluster {cluster} is not a candidate for {id}")))?;
    png_response(&candidate_overlay(&img.image, cand))
}

async fn select(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SelectionRequest>,
) -> Result<Json<SelectionRecord>, ApiError> {
    s.select(&id, &req).map(Json)
}

async fn finalize(State(s): State<Shared>) -> Result<Json<FinalizeResponse>, ApiError> {
    s.finalize().map(Json)
}

async fn progress(State(s): State<Shared>) -> Json<Progress> {
    Json(s.progress())
}

const PLACEHOLDER: &str = "<!doctype html><title>lesionforge</title>\
<p>The selection UI is not bundled with this server. API: <code>/api/images</code>, \
<code>/api/progress</code>.</p>";

pub fn router(session: Shared) -> Router {
    let api = Router::new()
        .route("/api/images", get(list_images))
        .route("/api/images/{id}/candidates", get(candidates))
        .route("/api/images/{id}/image.png", get(base_image))
        .route("/api/images/{id}/overlay/{file}", get(overlay))
        .route("/api/images/{id}/selection", post(select))
        .route("/api/finalize", post(finalize))
        .route("/api/progress", get(progress));
    let app = match &session.config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    };
    app.with_state(session)
}

/// Bind `127.0.0.1:port`; fails with [`ServerError::PortInUse`] when taken.
pub async fn bind(port: u16) -> Result<tokio::net::TcpListener, ServerError> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    tokio::net::TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServerError::PortInUse { port },
        _ => ServerError::Io(e),
    })
}

/// Serve until the process is stopped.
pub async fn serve(session: Shared, port: u16) -> Result<(), ServerError> {
    let listener = bind(port).await?;
    info!("selection service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(session)).await?;
    Ok(())
}
