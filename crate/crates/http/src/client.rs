//! Remote model backend over the JSON protocol.

use std::time::Duration;

use gradgate_core::backend::{Capabilities, ModelBackend, SampleRequest};
use gradgate_core::error::BackendError;
use gradgate_core::keywords::{jb_indicator, KeywordSet};
use gradgate_core::query::Query;
use gradgate_core::refusal::RefusalSample;
use gradgate_core::rng::substream_seed;

use crate::protocol::{encode_nonce, MetaResponse, SampleRefusalsRequest, SampleRefusalsResponse};

/// HTTP client backend. The embedding dimension is fetched once from the
/// remote `/meta` endpoint at connect time.
///
/// Retry policy: idempotent GETs retry up to `max_retries` with exponential
/// backoff; the sampling POST retries only because its nonce doubles as an
/// idempotency key (same nonce, same reply).
#[derive(Debug)]
pub struct RemoteHttp {
    base_url: String,
    client: reqwest::blocking::Client,
    embed_dim: usize,
    model_id: String,
    max_retries: u32,
    keywords: KeywordSet,
}

impl RemoteHttp {
    /// Connects and caches the remote metadata.
    pub fn connect(
        base_url: impl Into<String>,
        timeout: Duration,
        max_retries: u32,
    ) -> Result<Self, BackendError> {
        let base_url = base_url.into().trim_end_matches('/').to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let meta = Self::fetch_meta(&client, &base_url, max_retries)?;
        Ok(Self {
            base_url,
            client,
            embed_dim: meta.embed_dim,
            model_id: meta.model_id,
            max_retries,
            keywords: KeywordSet::default(),
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn fetch_meta(
        client: &reqwest::blocking::Client,
        base_url: &str,
        max_retries: u32,
    ) -> Result<MetaResponse, BackendError> {
        let url = format!("{base_url}/meta");
        let mut delay = Duration::from_millis(50);
        let mut last_err = String::new();
        for _ in 0..=max_retries {
            match client.get(&url).send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<MetaResponse>()
                        .map_err(|e| BackendError::Protocol(format!("bad /meta body: {e}")));
                }
                Ok(resp) => last_err = format!("/meta returned {}", resp.status()),
                Err(e) => last_err = e.to_string(),
            }
            std::thread::sleep(delay);
            delay *= 2;
        }
        Err(BackendError::Transport(format!(
            "could not fetch {url}: {last_err}"
        )))
    }

    fn post_sample(
        &self,
        body: &SampleRefusalsRequest,
    ) -> Result<SampleRefusalsResponse, BackendError> {
        let url = format!("{}/sample_refusals", self.base_url);
        let mut delay = Duration::from_millis(50);
        let mut last_err = String::new();
        for _ in 0..=self.max_retries {
            let sent = self
                .client
                .post(&url)
                .header("Idempotency-Key", &body.nonce)
                .json(body)
                .send();
            match sent {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json::<SampleRefusalsResponse>().map_err(|e| {
                        BackendError::Protocol(format!("bad sampling body: {e}"))
                    });
                }
                Ok(resp) => {
                    let status = resp.status();
                    let message = resp.text().unwrap_or_default();
                    // 4xx responses are not retried; the request is wrong.
                    if status.is_client_error() {
                        return Err(BackendError::Protocol(format!("{status}: {message}")));
                    }
                    last_err = format!("{status}: {message}");
                }
                Err(e) => last_err = e.to_string(),
            }
            std::thread::sleep(delay);
            delay *= 2;
        }
        Err(BackendError::Transport(format!(
            "could not post {url}: {last_err}"
        )))
    }

    fn request_body(
        &self,
        query: &Query,
        perturbation: Option<&[f64]>,
        n: usize,
        seed: u64,
        stream_tag: u64,
        system_prompt: Option<&str>,
        return_responses: bool,
    ) -> SampleRefusalsRequest {
        let nonce = encode_nonce(&substream_seed(seed, &query.id, stream_tag));
        SampleRefusalsRequest {
            text: query.text.clone(),
            perturbation: perturbation.map(<[f64]>::to_vec),
            n,
            nonce,
            system_prompt: system_prompt.map(str::to_owned),
            return_responses,
        }
    }

    fn validated_sample(
        &self,
        resp: SampleRefusalsResponse,
        n: usize,
    ) -> Result<RefusalSample, BackendError> {
        if resp.bits.len() != n {
            return Err(BackendError::Protocol(format!(
                "server returned {} bits, expected {n}",
                resp.bits.len()
            )));
        }
        if resp.bits.iter().any(|&b| b > 1) {
            return Err(BackendError::Protocol("bits must be 0 or 1".into()));
        }
        match resp.responses {
            Some(responses) => {
                // Re-check the refusal indicator locally; a server whose bits
                // disagree with its own texts is reported, not trusted.
                if responses.len() != n {
                    return Err(BackendError::Protocol(format!(
                        "server returned {} responses, expected {n}",
                        responses.len()
                    )));
                }
                for (i, (bit, text)) in resp.bits.iter().zip(&responses).enumerate() {
                    if *bit != jb_indicator(text, &self.keywords) {
                        return Err(BackendError::Protocol(format!(
                            "response {i} disagrees with its refusal bit"
                        )));
                    }
                }
                RefusalSample::with_responses(resp.bits, responses, &self.keywords)
                    .map_err(|e| BackendError::Protocol(e.to_string()))
            }
            None => RefusalSample::from_bits(resp.bits)
                .map_err(|e| BackendError::Protocol(e.to_string())),
        }
    }
}

impl ModelBackend for RemoteHttp {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            deterministic_field: false,
            text_responses: true,
            analytic_gradient: false,
        }
    }

    fn sample_refusals(&self, req: &SampleRequest<'_>) -> Result<RefusalSample, BackendError> {
        if req.n == 0 {
            return Err(BackendError::InvalidRequest("n must be >= 1".into()));
        }
        self.check_perturbation(req.perturbation)?;
        let body = self.request_body(
            req.query,
            req.perturbation,
            req.n,
            req.seed,
            req.stream_tag,
            req.system_prompt,
            req.return_responses,
        );
        let resp = self.post_sample(&body)?;
        self.validated_sample(resp, req.n)
    }

    fn generate(
        &self,
        query: &Query,
        seed: u64,
        stream_tag: u64,
        system_prompt: Option<&str>,
    ) -> Result<String, BackendError> {
        // The protocol has no separate generation endpoint; one sampled
        // response with texts returned is the generation path.
        let body = self.request_body(query, None, 1, seed, stream_tag, system_prompt, true);
        let resp = self.post_sample(&body)?;
        let sample = self.validated_sample(resp, 1)?;
        sample
            .responses()
            .and_then(|r| r.first().cloned())
            .ok_or_else(|| BackendError::Protocol("server returned no response text".into()))
    }
}
