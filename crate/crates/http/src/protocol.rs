//! Wire types for the remote model-backend protocol and the guardrail
//! service. Field names are the contract; changing them breaks clients.

use serde::{Deserialize, Serialize};

/// GET /meta
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub embed_dim: usize,
    pub model_id: String,
}

/// POST /sample_refusals request body.
///
/// The nonce is the hex-encoded substream seed derived from
/// `(seed, query id, stream tag)` on the client; the server seeds its
/// generator from it directly, which makes remote sampling bit-identical to
/// in-process sampling and doubles as the idempotency key for retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRefusalsRequest {
    pub text: String,
    pub perturbation: Option<Vec<f64>>,
    pub n: usize,
    pub nonce: String,
    pub system_prompt: Option<String>,
    pub return_responses: bool,
}

/// POST /sample_refusals response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRefusalsResponse {
    pub bits: Vec<u8>,
    pub responses: Option<Vec<String>>,
}

/// POST /v1/detect request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub text: String,
}

/// POST /v1/detect response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    /// "reject_stage1" | "reject_stage2" | "pass"
    pub decision: String,
    /// Sampled refusal loss from stage 1.
    pub f: f64,
    pub grad_norm: Option<f64>,
    pub queries_used: u64,
}

/// POST /v1/chat request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub text: String,
}

/// POST /v1/chat response body; `rejected` appears only on rejections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<bool>,
}

/// GET /v1/health response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub calibration_id: String,
}

/// Error envelope used by both servers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    pub message: String,
    /// Opaque id matching an audit-log entry, present on internal errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

/// Hex encoding for nonces (32-byte substream seeds).
pub fn encode_nonce(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Decodes a nonce back into seed bytes; tolerates nothing but 64 hex chars.
pub fn decode_nonce(nonce: &str) -> Option<[u8; 32]> {
    if nonce.len() != 64 || !nonce.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, chunk) in nonce.as_bytes().chunks(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16)?;
        let lo = (chunk[1] as char).to_digit(16)?;
        out[i] = (hi * 16 + lo) as u8;
    }
    Some(out)
}
