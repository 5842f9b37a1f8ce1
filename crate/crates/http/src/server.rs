//! Reference model-backend server: serves a synthetic field over the wire
//! protocol. Deployments stand in their real model behind the same two
//! endpoints; this implementation is the loopback test oracle.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};

use gradgate_core::backend::ModelBackend;
use gradgate_core::embedding::add_vec;
use gradgate_core::field::{SyntheticField, COMPLIANCE_RESPONSE, REFUSAL_RESPONSE};
use gradgate_core::query::Query;
use gradgate_core::rng::{bernoulli, rng_from_seed_bytes};

use crate::protocol::{
    decode_nonce, ErrorBody, ErrorDetail, MetaResponse, SampleRefusalsRequest,
    SampleRefusalsResponse,
};

struct BackendState {
    field: SyntheticField,
    /// Resolves request texts to registered query ids, so wire requests hit
    /// the same embeddings as in-process calls.
    text_index: BTreeMap<String, String>,
    model_id: String,
}

impl BackendState {
    fn pooled_for_text(&self, text: &str) -> Result<Vec<f64>, String> {
        let query = match self.text_index.get(text) {
            Some(id) => Query::new(id.clone(), text.to_string()),
            None => Query::from_text(text),
        };
        self.field
            .pooled_for(&query)
            .map_err(|e| e.to_string())
    }
}

fn error_response(status: StatusCode, kind: &str, message: String) -> (StatusCode, Json<ErrorBody>) {
    (
        status,
        Json(ErrorBody {
            error: ErrorDetail {
                kind: kind.to_string(),
                message,
                id: None,
            },
        }),
    )
}

async fn meta(State(state): State<Arc<BackendState>>) -> Json<MetaResponse> {
    Json(MetaResponse {
        embed_dim: state.field.dim(),
        model_id: state.model_id.clone(),
    })
}

async fn sample_refusals(
    State(state): State<Arc<BackendState>>,
    Json(req): Json<SampleRefusalsRequest>,
) -> Result<Json<SampleRefusalsResponse>, (StatusCode, Json<ErrorBody>)> {
    if req.n == 0 {
        return Err(error_response(
            StatusCode::BAD_REQUEST,
            "invalid_request",
            "n must be >= 1".into(),
        ));
    }
    if let Some(v) = &req.perturbation {
        if v.len() != state.field.dim() {
            return Err(error_response(
                StatusCode::BAD_REQUEST,
                "dimension_mismatch",
                format!("perturbation length {} != {}", v.len(), state.field.dim()),
            ));
        }
    }
    let Some(seed_bytes) = decode_nonce(&req.nonce) else {
        return Err(error_response(
            StatusCode::BAD_REQUEST,
            "invalid_request",
            "nonce must be 64 hex characters".into(),
        ));
    };
    let pooled = state.pooled_for_text(&req.text).map_err(|e| {
        error_response(StatusCode::NOT_FOUND, "query_not_found", e)
    })?;
    let point = match &req.perturbation {
        Some(v) => add_vec(&pooled, v),
        None => pooled,
    };
    let p = state.field.probability(&point);

    let deterministic = state.field.capabilities().deterministic_field;
    let bits: Vec<u8> = if deterministic {
        vec![u8::from(p >= 0.5); req.n]
    } else {
        let mut rng = rng_from_seed_bytes(seed_bytes);
        (0..req.n).map(|_| bernoulli(&mut rng, p)).collect()
    };
    let responses = req.return_responses.then(|| {
        bits.iter()
            .map(|&b| {
                if b == 1 {
                    REFUSAL_RESPONSE.to_string()
                } else {
                    COMPLIANCE_RESPONSE.to_string()
                }
            })
            .collect()
    });
    Ok(Json(SampleRefusalsResponse { bits, responses }))
}

/// Builds the reference backend router.
pub fn backend_router(
    field: SyntheticField,
    indexed_queries: &[Query],
    model_id: impl Into<String>,
) -> Router {
    let text_index = indexed_queries
        .iter()
        .map(|q| (q.text.clone(), q.id.clone()))
        .collect();
    let state = Arc::new(BackendState {
        field,
        text_index,
        model_id: model_id.into(),
    });
    Router::new()
        .route("/meta", get(meta))
        .route("/sample_refusals", post(sample_refusals))
        .with_state(state)
}

/// Handle to a running server: the bound address plus a shutdown sender.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// Spawns a router on its own runtime thread, bound to `listen`; use
/// `127.0.0.1:0` for an ephemeral test port.
pub fn spawn_router(router: Router, listen: &str) -> std::io::Result<ServerHandle> {
    let listen = listen.to_string();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("tokio runtime");
        runtime.block_on(async move {
            let listener = match tokio::net::TcpListener::bind(&listen).await {
                Ok(l) => l,
                Err(e) => {
                    let _ = addr_tx.send(Err(e));
                    return;
                }
            };
            let addr = listener.local_addr().expect("local addr");
            let _ = addr_tx.send(Ok(addr));
            let serve = axum::serve(listener, router).with_graceful_shutdown(async {
                let _ = shutdown_rx.await;
            });
            if let Err(e) = serve.await {
                eprintln!("server error: {e}");
            }
        });
    });
    let addr = addr_rx
        .recv()
        .map_err(|_| std::io::Error::other("server thread died before binding"))??;
    Ok(ServerHandle {
        addr,
        shutdown: Some(shutdown_tx),
        thread: Some(thread),
    })
}
