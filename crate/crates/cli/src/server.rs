//! HTTP front of the rating store.

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use topiclabel_core::rating::{RatingError, RatingItem, RatingStore, RatingSubmission};

pub struct ServeSettings {
    pub dir: PathBuf,
    pub bind: String,
    pub scale: u8,
    pub reveal: bool,
    pub static_dir: Option<PathBuf>,
}

struct AppState {
    store: RatingStore,
    static_dir: Option<PathBuf>,
}

type Shared = Arc<AppState>;

const PLACEHOLDER: &str = r#"<!doctype html>
<html lang="en">
<head><meta charset="utf-8"><title>topiclabel rating</title></head>
<body>
<h1>topiclabel rating service</h1>
<p>The annotator UI bundle is not installed. Start the server with
<code>--static-dir</code> pointing at a built bundle, or use the JSON API:</p>
<ul>
<li><code>GET /api/items/next?rater=ID</code></li>
<li><code>POST /api/ratings</code></li>
<li><code>GET /api/progress?rater=ID</code></li>
<li><code>GET /api/agreement</code></li>
</ul>
</body>
</html>
"#;

struct ApiError(StatusCode, String);

impl From<RatingError> for ApiError {
    fn from(e: RatingError) -> Self {
        let status = match &e {
            RatingError::UnknownItem(_) => StatusCode::NOT_FOUND,
            RatingError::EmptyRater
            | RatingError::UnsupportedScale(_)
            | RatingError::ScaleMismatch { .. }
            | RatingError::ScoreOutOfRange { .. }
            | RatingError::Metrics(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Deserialize)]
struct RaterQuery {
    rater: String,
}

/// An item as served to a rater, with the session scale the UI renders.
#[derive(Serialize)]
struct ItemView {
    #[serde(flatten)]
    item: RatingItem,
    scale: u8,
}

async fn next_item(State(state): State<Shared>, Query(q): Query<RaterQuery>) -> Response {
    match state.store.next_item(&q.rater) {
        Some(item) => Json(ItemView {
            item,
            scale: state.store.scale(),
        })
        .into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn submit(State(state): State<Shared>, Json(sub): Json<RatingSubmission>) -> Result<Response, ApiError> {
    let rating = tokio::task::spawn_blocking(move || state.store.submit(sub))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(rating)).into_response())
}

async fn agreement(State(state): State<Shared>) -> Result<Response, ApiError> {
    Ok(Json(state.store.agreement_report()?).into_response())
}

async fn progress(State(state): State<Shared>, Query(q): Query<RaterQuery>) -> Response {
    Json(state.store.progress(&q.rater)).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json" | "map") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        Some("woff2") => "font/woff2",
        _ => "application/octet-stream",
    }
}

async fn static_file(state: &AppState, rel: &str) -> Response {
    let Some(root) = &state.static_dir else {
        return if rel == "index.html" {
            Html(PLACEHOLDER).into_response()
        } else {
            StatusCode::NOT_FOUND.into_response()
        };
    };
    let rel = Path::new(rel);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let path = root.join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) if rel == Path::new("index.html") => Html(PLACEHOLDER).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn index(State(state): State<Shared>) -> Response {
    static_file(&state, "index.html").await
}

async fn asset(State(state): State<Shared>, UrlPath(path): UrlPath<String>) -> Response {
    static_file(&state, &path).await
}

fn router(state: Shared) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/api/items/next", get(next_item))
        .route("/api/ratings", post(submit))
        .route("/api/agreement", get(agreement))
        .route("/api/progress", get(progress))
        .route("/{*path}", get(asset))
        .with_state(state)
}

pub fn serve(settings: ServeSettings) -> Result<()> {
    let items = settings.dir.join(topiclabel_core::rating::ITEMS_FILE);
    if !items.exists() {
        anyhow::bail!("missing {}; run `evaluate` first", items.display());
    }
    let store = RatingStore::open(&settings.dir, settings.scale, settings.reveal)
        .with_context(|| format!("opening rating store in {}", settings.dir.display()))?;
    let state = Arc::new(AppState {
        store,
        static_dir: settings.static_dir,
    });
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&settings.bind)
            .await
            .with_context(|| format!("binding {}", settings.bind))?;
        // Tests and scripts read the bound address from this line.
        println!("listening on http://{}", listener.local_addr()?);
        use std::io::Write;
        std::io::stdout().flush()?;
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
