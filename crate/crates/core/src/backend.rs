//! The pluggable model boundary.
//!
//! A backend answers refusal-sampling requests for a query, optionally with
//! the pooled sentence embedding perturbed by a caller-supplied vector, and
//! can generate one response text for queries that pass detection. Everything
//! above this trait is model-agnostic.

use crate::error::BackendError;
use crate::query::Query;
use crate::refusal::RefusalSample;

/// What a backend can do beyond the base contract.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capabilities {
    /// Refusal behaviour is a deterministic function of the pooled embedding
    /// and the backend exposes [`ModelBackend::exact_loss`]. Used by
    /// noise-free estimator tests, never by benchmark runs.
    pub deterministic_field: bool,
    /// `generate` returns meaningful text (not just canned strings).
    pub text_responses: bool,
    /// The backend exposes a closed-form refusal-loss gradient.
    pub analytic_gradient: bool,
}

/// One refusal-sampling request.
#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a> {
    pub query: &'a Query,
    /// Perturbation added to the pooled sentence embedding, length d.
    pub perturbation: Option<&'a [f64]>,
    /// Number of independent response samples.
    pub n: usize,
    /// Base seed; combined with `query.id` and `stream_tag` into a substream.
    pub seed: u64,
    pub stream_tag: u64,
    pub system_prompt: Option<&'a str>,
    /// Ask the backend to return the sampled response texts alongside bits.
    pub return_responses: bool,
}

impl<'a> SampleRequest<'a> {
    pub fn new(query: &'a Query, n: usize, seed: u64, stream_tag: u64) -> Self {
        Self {
            query,
            perturbation: None,
            n,
            seed,
            stream_tag,
            system_prompt: None,
            return_responses: false,
        }
    }

    pub fn with_perturbation(mut self, v: &'a [f64]) -> Self {
        self.perturbation = Some(v);
        self
    }

    pub fn with_system_prompt(mut self, prompt: Option<&'a str>) -> Self {
        self.system_prompt = prompt;
        self
    }
}

/// The model boundary used by the whole pipeline.
///
/// Implementations must be deterministic for fixed `(seed, query.id,
/// stream_tag)` and tolerate concurrent calls.
pub trait ModelBackend: Send + Sync {
    /// Embedding dimension d of the perturbation space.
    fn embed_dim(&self) -> usize;

    fn capabilities(&self) -> Capabilities;

    /// Returns exactly `req.n` refusal bits for the query.
    fn sample_refusals(&self, req: &SampleRequest<'_>) -> Result<RefusalSample, BackendError>;

    /// Generates one response text for a passed query.
    fn generate(
        &self,
        query: &Query,
        seed: u64,
        stream_tag: u64,
        system_prompt: Option<&str>,
    ) -> Result<String, BackendError>;

    /// Exact refusal-loss value at the (optionally perturbed) pooled
    /// embedding. Only available when `capabilities().deterministic_field`
    /// is set; the default errs.
    fn exact_loss(
        &self,
        _query: &Query,
        _perturbation: Option<&[f64]>,
    ) -> Result<f64, BackendError> {
        Err(BackendError::Unsupported("exact_loss"))
    }

    /// Closed-form gradient of the refusal loss at the query's pooled
    /// embedding, when `capabilities().analytic_gradient` is set.
    fn analytic_refusal_gradient(&self, _query: &Query) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Unsupported("analytic_refusal_gradient"))
    }

    /// Validates a perturbation length against the embedding dimension.
    fn check_perturbation(&self, perturbation: Option<&[f64]>) -> Result<(), BackendError> {
        if let Some(v) = perturbation {
            if v.len() != self.embed_dim() {
                return Err(BackendError::DimensionMismatch {
                    expected: self.embed_dim(),
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

impl<T: ModelBackend + ?Sized> ModelBackend for &T {
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn sample_refusals(&self, req: &SampleRequest<'_>) -> Result<RefusalSample, BackendError> {
        (**self).sample_refusals(req)
    }
    fn generate(
        &self,
        query: &Query,
        seed: u64,
        stream_tag: u64,
        system_prompt: Option<&str>,
    ) -> Result<String, BackendError> {
        (**self).generate(query, seed, stream_tag, system_prompt)
    }
    fn exact_loss(
        &self,
        query: &Query,
        perturbation: Option<&[f64]>,
    ) -> Result<f64, BackendError> {
        (**self).exact_loss(query, perturbation)
    }
    fn analytic_refusal_gradient(&self, query: &Query) -> Result<Vec<f64>, BackendError> {
        (**self).analytic_refusal_gradient(query)
    }
}
