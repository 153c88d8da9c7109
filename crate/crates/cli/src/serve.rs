//! `POST /v1/retrieve` and `GET /healthz` over a shared, immutable index.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clap::Args;
use cirank_core::clients::ModelClients;
use cirank_core::pipeline::ReferenceInput;
use cirank_core::{CompositeQuery, GalleryIndex, Pipeline, PipelineConfig, PipelineError, PromptSet};
use serde::Deserialize;
use serde_json::json;

use crate::config::ConfigArgs;
use crate::setup::{build_runtime, gallery_refs, index_path, load_index};
use crate::EXIT_OK;

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Index file (overrides "index" in the config).
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,
    /// Listen address; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Gallery manifest used to map image ids to image refs.
    #[arg(long, value_name = "FILE")]
    pub gallery: Option<PathBuf>,
    /// Worker threads for the HTTP runtime.
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

struct AppState {
    index: GalleryIndex,
    clients: ModelClients,
    prompts: Arc<PromptSet>,
    config: PipelineConfig,
    refs: Arc<HashMap<String, String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveRequest {
    relative_text: String,
    #[serde(default)]
    reference_image_id: Option<String>,
    #[serde(default)]
    reference_caption: Option<String>,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    rerank: Option<bool>,
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Response {
    (status, Json(json!({"error": msg.to_string()}))).into_response()
}

/// Runs one request to completion; blocking.
fn handle(state: &AppState, req: RetrieveRequest) -> Response {
    let mut cfg = state.config.clone();
    if let Some(r) = req.rerank {
        cfg.rerank = r;
    }
    let reference = req.reference_image_id.unwrap_or_default();
    let captions: Vec<String> = req.reference_caption.into_iter().filter(|c| !c.trim().is_empty()).collect();
    if reference.is_empty() {
        if captions.is_empty() {
            return error(
                StatusCode::BAD_REQUEST,
                "give reference_image_id, reference_caption, or both",
            );
        }
        cfg.reference_input = ReferenceInput::Caption;
    }
    let k = req.k.unwrap_or(10);
    if k == 0 {
        return error(StatusCode::BAD_REQUEST, "k must be >= 1");
    }
    let query = match CompositeQuery::new("request", reference, req.relative_text) {
        Ok(q) => q.with_captions(captions),
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let pipeline = match Pipeline::new(state.clients.clone(), state.prompts.clone(), cfg) {
        Ok(p) => p.with_image_refs(state.refs.clone()),
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    match pipeline.run(&query, &state.index) {
        Ok(mut run) => {
            run.final_list.truncate(k);
            Json(run.final_list).into_response()
        }
        Err(e @ PipelineError::Client { .. }) => error(StatusCode::SERVICE_UNAVAILABLE, e),
        Err(e @ (PipelineError::Validation(_) | PipelineError::Prompt(_))) => {
            error(StatusCode::BAD_REQUEST, e)
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn retrieve(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: RetrieveRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    match tokio::task::spawn_blocking(move || handle(&state, req)).await {
        Ok(resp) => resp,
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn healthz() -> impl IntoResponse {
    Json(json!({"status": "ok"}))
}

pub fn router(
    index: GalleryIndex,
    clients: ModelClients,
    prompts: Arc<PromptSet>,
    config: PipelineConfig,
    refs: HashMap<String, String>,
) -> Router {
    let state = Arc::new(AppState {
        index,
        clients,
        prompts,
        config,
        refs: Arc::new(refs),
    });
    Router::new()
        .route("/v1/retrieve", post(retrieve))
        .route("/healthz", get(healthz))
        .with_state(state)
}

pub fn serve(a: ServeArgs) -> Result<u8> {
    let cfg = a.cfg.resolve()?;
    eprintln!("config: {}", cfg.to_json());
    let index = load_index(&index_path(&a.index, &cfg)?)?;
    let rt = build_runtime(&cfg, index.dim())?;
    let refs = gallery_refs(a.gallery.as_deref())?;
    let app = router(index, rt.clients, rt.prompts, cfg.pipeline.clone(), refs);

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(a.workers.max(1))
        .enable_all()
        .build()
        .context("starting async runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        println!("listening on http://{}", listener.local_addr()?);
        use std::io::Write as _;
        std::io::stdout().flush()?;
        axum::serve(listener, app).await.context("serving")
    })?;
    Ok(EXIT_OK)
}
