//! `POST /search` over the same engine the runtime uses.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use memgraph_core::retrieval::{DEFAULT_FRAMES_PER_CLIP, DEFAULT_SEARCH_K};
use memgraph_core::{search, Corpus, Observation};
use serde::Deserialize;
use serde_json::{json, Value};

#[derive(Debug, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub n_frames: Option<usize>,
}

async fn handle_search(
    State(corpus): State<Arc<Corpus>>,
    Json(req): Json<SearchRequest>,
) -> Result<Json<Vec<Observation>>, (StatusCode, Json<Value>)> {
    let k = req.k.unwrap_or(DEFAULT_SEARCH_K);
    let n_frames = req.n_frames.unwrap_or(DEFAULT_FRAMES_PER_CLIP);
    search(&corpus, &req.query, k, n_frames)
        .map(Json)
        .map_err(|e| (StatusCode::BAD_REQUEST, Json(json!({"error": e.to_string()}))))
}

pub fn router(corpus: Arc<Corpus>) -> Router {
    Router::new().route("/search", post(handle_search)).with_state(corpus)
}

/// Serve until the process is stopped. `ready` receives the bound address.
pub async fn serve(corpus: Corpus, addr: SocketAddr, ready: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    ready(listener.local_addr()?);
    axum::serve(listener, router(Arc::new(corpus))).await
}
