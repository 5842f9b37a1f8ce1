//! HTTP layer: the remote model-backend protocol (client and reference
//! server) and the guardrail detection service.

pub mod client;
pub mod protocol;
pub mod server;
pub mod service;

pub use client::RemoteHttp;
pub use server::{backend_router, spawn_router, ServerHandle};
pub use service::{build_service, run_service, spawn_service, BackendSpec, ServiceConfig};
