//! HTTP/JSON prediction service.
//!
//! ```text
//! POST /v1/predict  {"features": [[f32; d]; batch]} -> {"scores": [[f32; C]; batch]}
//! GET  /v1/info     -> {"dim": d, "num_classes": C, "score_mode": "cosine"|"softmax"}
//! ```
//!
//! Errors are HTTP 400 with `{"error": "dim_mismatch" | "empty_batch" |
//! "batch_too_large" | "malformed_request"}` or HTTP 500 with
//! `{"error": "internal"}`.

use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

use super::{PredictionService, ServerClassifier};

/// Largest batch accepted by one `/v1/predict` request.
pub const MAX_BATCH: usize = 128;

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct PredictRequest {
    pub features: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct PredictResponse {
    pub scores: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ErrorBody {
    pub error: String,
}

#[derive(Clone)]
struct AppState {
    classifier: Arc<ServerClassifier>,
    requests: Arc<AtomicUsize>,
}

fn error_response(status: StatusCode, code: &str) -> Response {
    (
        status,
        Json(ErrorBody {
            error: code.to_owned(),
        }),
    )
        .into_response()
}

async fn info(State(state): State<AppState>) -> Response {
    state.requests.fetch_add(1, Ordering::Relaxed);
    match state.classifier.info() {
        Ok(info) => Json(info).into_response(),
        Err(_) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

async fn predict(State(state): State<AppState>, body: Bytes) -> Response {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let Ok(req) = serde_json::from_slice::<PredictRequest>(&body) else {
        return error_response(StatusCode::BAD_REQUEST, "malformed_request");
    };
    let dim = state.classifier.dim();
    if req.features.is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "empty_batch");
    }
    if req.features.len() > MAX_BATCH {
        return error_response(StatusCode::BAD_REQUEST, "batch_too_large");
    }
    if req.features.iter().any(|row| row.len() != dim) {
        return error_response(StatusCode::BAD_REQUEST, "dim_mismatch");
    }
    let data = req.features.iter().flatten().map(|&x| x as f64).collect();
    let scores = Tensor::matrix(req.features.len(), dim, data)
        .and_then(|x| state.classifier.scores(&x));
    match scores {
        Ok(s) => {
            let scores = (0..s.rows())
                .map(|r| s.row_slice(r).iter().map(|&v| v as f32).collect())
                .collect();
            Json(PredictResponse { scores }).into_response()
        }
        Err(Error::ZeroVector(_)) | Err(Error::NonFinite(_)) => {
            error_response(StatusCode::BAD_REQUEST, "malformed_request")
        }
        Err(_) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

pub(crate) fn router(classifier: Arc<ServerClassifier>, requests: Arc<AtomicUsize>) -> Router {
    Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/info", get(info))
        .with_state(AppState {
            classifier,
            requests,
        })
}

/// A service running on a background thread. Dropping the handle shuts
/// the service down.
pub struct ServerHandle {
    addr: SocketAddr,
    requests: Arc<AtomicUsize>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Number of requests handled so far, across all endpoints.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    /// Blocks until the service stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on a background
/// thread. Binding errors such as a port already in use are returned here.
pub fn spawn_server(classifier: ServerClassifier, addr: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::io(addr, e))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::io(addr, e))?;
    let local = listener.local_addr().map_err(|e| Error::io(addr, e))?;
    let requests = Arc::new(AtomicUsize::new(0));
    let app = router(Arc::new(classifier), requests.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_io()
        .build()
        .map_err(|e| Error::io(addr, e))?;
    let thread = std::thread::Builder::new()
        .name("oracle-service".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("oracle service failed to start: {e}");
                        return;
                    }
                };
                let served = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
                if let Err(e) = served {
                    log::error!("oracle service stopped: {e}");
                }
            });
        })
        .map_err(|e| Error::io(addr, e))?;
    log::info!("oracle service listening on {local}");
    Ok(ServerHandle {
        addr: local,
        requests,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Runs the service on the calling thread until the process is stopped.
pub fn serve(classifier: ServerClassifier, addr: &str, on_ready: impl FnOnce(SocketAddr)) -> Result<()> {
    let handle = spawn_server(classifier, addr)?;
    on_ready(handle.addr());
    handle.join();
    Ok(())
}
