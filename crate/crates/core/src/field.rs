//! Analytic refusal-probability fields.
//!
//! A [`SyntheticField`] assigns every point of the pooled-embedding space a
//! refusal probability
//!
//! ```text
//! p(e) = clamp01( logistic(s * (w.e + b)) + sum_j a_j * exp(-|e - c_j|^2 / (2 tau_j^2)) )
//! ```
//!
//! The logistic ramp gives a flat benign basin; narrow Gaussian bumps carve
//! steep regions where refusal behaviour changes sharply. The closed-form
//! gradient (available wherever no clamping is active) is the oracle the
//! estimator, calibration, and benchmark suites are verified against.
//!
//! Refusal bits are Bernoulli draws of `p` at the perturbed pooled embedding.
//! `deterministic: true` replaces the draw by the thresholded bit
//! `[p >= 0.5]` and exposes exact loss values, for noise-free estimator
//! tests; benchmark runs never use it.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{Capabilities, ModelBackend, SampleRequest};
use crate::embedding::{add_vec, mean_pool, EmbeddingMatrix};
use crate::error::{BackendError, Error, Result};
use crate::query::Query;
use crate::refusal::RefusalSample;
use crate::rng::{bernoulli, substream, uniform, NormalSource};

/// Canned response emitted when a sampled draw refuses. Contains a default
/// keyword so the three-stage refusal-rate filter sees it as a refusal.
pub const REFUSAL_RESPONSE: &str = "I'm sorry, but I can't help with that.";
/// Canned response for complying draws; contains no refusal keyword.
pub const COMPLIANCE_RESPONSE: &str = "Sure, here is what you asked for.";

/// One Gaussian bump in probability space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub tau: f64,
}

/// Serializable description of a synthetic field; all parameters explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: f64,
    pub scale: f64,
    #[serde(default)]
    pub bumps: Vec<Bump>,
    /// Threshold bits and exact losses instead of Bernoulli draws.
    #[serde(default)]
    pub deterministic: bool,
    /// Derive embeddings for unknown query ids from the query text instead
    /// of erring. Off by default; the guardrail service turns it on to
    /// accept arbitrary texts.
    #[serde(default)]
    pub derive_unknown: bool,
    /// Spread of derived embeddings around the origin.
    #[serde(default = "default_derive_spread")]
    pub derive_spread: f64,
    /// Registered query embeddings.
    #[serde(default)]
    pub embeddings: BTreeMap<String, EmbeddingMatrix>,
}

fn default_derive_spread() -> f64 {
    0.5
}

impl FieldSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&content)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// An analytic refusal-probability field over pooled-embedding space.
#[derive(Debug, Clone)]
pub struct SyntheticField {
    dim: usize,
    weight: Vec<f64>,
    bias: f64,
    scale: f64,
    bumps: Vec<Bump>,
    deterministic: bool,
    derive_unknown: bool,
    derive_spread: f64,
    embeddings: Arc<BTreeMap<String, EmbeddingMatrix>>,
}

impl SyntheticField {
    pub fn from_spec(spec: FieldSpec) -> Result<Self> {
        if spec.weight.len() != spec.dim {
            return Err(Error::InvalidInput(format!(
                "weight length {} does not match dim {}",
                spec.weight.len(),
                spec.dim
            )));
        }
        for (i, bump) in spec.bumps.iter().enumerate() {
            if bump.center.len() != spec.dim {
                return Err(Error::InvalidInput(format!(
                    "bump {i} center length {} does not match dim {}",
                    bump.center.len(),
                    spec.dim
                )));
            }
            if !(bump.tau > 0.0) {
                return Err(Error::InvalidInput(format!("bump {i} tau must be positive")));
            }
        }
        for (id, e) in &spec.embeddings {
            if e.dim() != spec.dim {
                return Err(Error::InvalidInput(format!(
                    "embedding `{id}` has dim {}, field dim {}",
                    e.dim(),
                    spec.dim
                )));
            }
        }
        Ok(Self {
            dim: spec.dim,
            weight: spec.weight,
            bias: spec.bias,
            scale: spec.scale,
            bumps: spec.bumps,
            deterministic: spec.deterministic,
            derive_unknown: spec.derive_unknown,
            derive_spread: spec.derive_spread,
            embeddings: Arc::new(spec.embeddings),
        })
    }

    /// A field with no registered embeddings.
    pub fn new(dim: usize, weight: Vec<f64>, bias: f64, scale: f64, bumps: Vec<Bump>) -> Result<Self> {
        Self::from_spec(FieldSpec {
            dim,
            weight,
            bias,
            scale,
            bumps,
            deterministic: false,
            derive_unknown: false,
            derive_spread: default_derive_spread(),
            embeddings: BTreeMap::new(),
        })
    }

    pub fn to_spec(&self) -> FieldSpec {
        FieldSpec {
            dim: self.dim,
            weight: self.weight.clone(),
            bias: self.bias,
            scale: self.scale,
            bumps: self.bumps.clone(),
            deterministic: self.deterministic,
            derive_unknown: self.derive_unknown,
            derive_spread: self.derive_spread,
            embeddings: (*self.embeddings).clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn set_deterministic(&mut self, on: bool) {
        self.deterministic = on;
    }

    pub fn bumps(&self) -> &[Bump] {
        &self.bumps
    }

    /// Returns a field sharing parameters with `self` but with one embedding
    /// replaced (or inserted). Cheap enough for attack loops that evolve a
    /// query's embedding.
    pub fn with_embedding(&self, id: impl Into<String>, embedding: EmbeddingMatrix) -> Self {
        let mut map = (*self.embeddings).clone();
        map.insert(id.into(), embedding);
        let mut next = self.clone();
        next.embeddings = Arc::new(map);
        next
    }

    pub fn with_embeddings(&self, entries: BTreeMap<String, EmbeddingMatrix>) -> Self {
        let mut map = (*self.embeddings).clone();
        map.extend(entries);
        let mut next = self.clone();
        next.embeddings = Arc::new(map);
        next
    }

    pub fn embedding_of(&self, id: &str) -> Option<&EmbeddingMatrix> {
        self.embeddings.get(id)
    }

    /// Registers a single-token embedding at the given pooled point and
    /// returns a query for it. Test and probe convenience.
    pub fn register_point(&mut self, id: impl Into<String>, point: &[f64]) -> Query {
        let id = id.into();
        let emb = EmbeddingMatrix::new(vec![point.to_vec()]).expect("point embedding");
        let mut map = (*self.embeddings).clone();
        map.insert(id.clone(), emb);
        self.embeddings = Arc::new(map);
        Query::new(id.clone(), format!("synthetic point {id}"))
    }

    fn logistic_arg(&self, point: &[f64]) -> f64 {
        let dot: f64 = self.weight.iter().zip(point).map(|(w, x)| w * x).sum();
        self.scale * (dot + self.bias)
    }

    /// Field value before clamping.
    pub fn raw_probability(&self, point: &[f64]) -> f64 {
        let mut p = logistic(self.logistic_arg(point));
        for bump in &self.bumps {
            p += bump.amplitude * gaussian(point, &bump.center, bump.tau);
        }
        p
    }

    /// Refusal probability, clamped to [0, 1].
    pub fn probability(&self, point: &[f64]) -> f64 {
        self.raw_probability(point).clamp(0.0, 1.0)
    }

    /// Closed-form gradient of `p` at `point`, or an error when clamping is
    /// active there (the clamped field is not differentiable).
    pub fn probability_gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        let raw = self.raw_probability(point);
        if !(0.0..=1.0).contains(&raw) {
            return Err(Error::UnsupportedBackend(format!(
                "field is clamped at the probe point (raw value {raw:.6})"
            )));
        }
        let sig = logistic(self.logistic_arg(point));
        let coeff = sig * (1.0 - sig) * self.scale;
        let mut grad: Vec<f64> = self.weight.iter().map(|w| coeff * w).collect();
        for bump in &self.bumps {
            let g = gaussian(point, &bump.center, bump.tau);
            let scale = bump.amplitude * g / (bump.tau * bump.tau);
            for ((acc, x), c) in grad.iter_mut().zip(point).zip(&bump.center) {
                *acc += scale * (c - x);
            }
        }
        Ok(grad)
    }

    /// Gradient of the refusal loss `phi = 1 - p`.
    pub fn loss_gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        Ok(self.probability_gradient(point)?.iter().map(|x| -x).collect())
    }

    /// Pooled embedding for a query, with optional text-derived fallback.
    pub fn pooled_for(&self, query: &Query) -> std::result::Result<Vec<f64>, BackendError> {
        if let Some(e) = self.embeddings.get(&query.id) {
            return Ok(mean_pool(e).values);
        }
        if self.derive_unknown {
            let seed = crate::rng::derive_seed(0, &query.text, 0);
            let mut src = NormalSource::new(seed, "derived-embedding", 0);
            return Ok((0..self.dim).map(|_| src.next() * self.derive_spread).collect());
        }
        Err(BackendError::QueryNotFound(query.id.clone()))
    }

    fn perturbed_point(
        &self,
        query: &Query,
        perturbation: Option<&[f64]>,
    ) -> std::result::Result<Vec<f64>, BackendError> {
        let pooled = self.pooled_for(query)?;
        Ok(match perturbation {
            // Row-wise broadcast add pools to a plain vector add.
            Some(v) => add_vec(&pooled, v),
            None => pooled,
        })
    }
}

impl ModelBackend for SyntheticField {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            deterministic_field: self.deterministic,
            text_responses: false,
            analytic_gradient: true,
        }
    }

    fn sample_refusals(&self, req: &SampleRequest<'_>) -> std::result::Result<RefusalSample, BackendError> {
        if req.n == 0 {
            return Err(BackendError::InvalidRequest("n must be >= 1".into()));
        }
        self.check_perturbation(req.perturbation)?;
        let point = self.perturbed_point(req.query, req.perturbation)?;
        let p = self.probability(&point);
        let bits: Vec<u8> = if self.deterministic {
            vec![u8::from(p >= 0.5); req.n]
        } else {
            let mut rng = substream(req.seed, &req.query.id, req.stream_tag);
            (0..req.n).map(|_| bernoulli(&mut rng, p)).collect()
        };
        if req.return_responses {
            let responses = bits
                .iter()
                .map(|&b| {
                    if b == 1 {
                        REFUSAL_RESPONSE.to_string()
                    } else {
                        COMPLIANCE_RESPONSE.to_string()
                    }
                })
                .collect();
            let keywords = crate::keywords::KeywordSet::default();
            return RefusalSample::with_responses(bits, responses, &keywords)
                .map_err(|e| BackendError::Protocol(e.to_string()));
        }
        RefusalSample::from_bits(bits).map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn generate(
        &self,
        query: &Query,
        seed: u64,
        stream_tag: u64,
        _system_prompt: Option<&str>,
    ) -> std::result::Result<String, BackendError> {
        let point = self.perturbed_point(query, None)?;
        let p = self.probability(&point);
        let refused = if self.deterministic {
            p >= 0.5
        } else {
            let mut rng = substream(seed, &query.id, stream_tag);
            uniform(&mut rng) < p
        };
        Ok(if refused {
            REFUSAL_RESPONSE.to_string()
        } else {
            COMPLIANCE_RESPONSE.to_string()
        })
    }

    fn exact_loss(
        &self,
        query: &Query,
        perturbation: Option<&[f64]>,
    ) -> std::result::Result<f64, BackendError> {
        if !self.deterministic {
            return Err(BackendError::Unsupported("exact_loss on a stochastic field"));
        }
        self.check_perturbation(perturbation)?;
        let point = self.perturbed_point(query, perturbation)?;
        Ok(1.0 - self.probability(&point))
    }

    fn analytic_refusal_gradient(&self, query: &Query) -> std::result::Result<Vec<f64>, BackendError> {
        let point = self.perturbed_point(query, None)?;
        self.loss_gradient(&point)
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn gaussian(point: &[f64], center: &[f64], tau: f64) -> f64 {
    let dist2: f64 = point
        .iter()
        .zip(center)
        .map(|(x, c)| (x - c) * (x - c))
        .sum();
    (-dist2 / (2.0 * tau * tau)).exp()
}

/// Diagnostic backend whose refusal loss is exactly linear in the pooled
/// embedding: `f(e) = a.e + c`. Finite differences are exact on it for any
/// smoothing parameter, which pins the estimator algebra in tests.
#[derive(Debug, Clone)]
pub struct LinearField {
    coeffs: Vec<f64>,
    intercept: f64,
    embeddings: Arc<BTreeMap<String, EmbeddingMatrix>>,
}

impl LinearField {
    pub fn new(coeffs: Vec<f64>, intercept: f64) -> Self {
        Self {
            coeffs,
            intercept,
            embeddings: Arc::new(BTreeMap::new()),
        }
    }

    /// Registers a single-token embedding and returns a query for it.
    pub fn register_point(&mut self, id: impl Into<String>, point: &[f64]) -> Query {
        let id = id.into();
        let emb = EmbeddingMatrix::new(vec![point.to_vec()]).expect("point embedding");
        let mut map = (*self.embeddings).clone();
        map.insert(id.clone(), emb);
        self.embeddings = Arc::new(map);
        Query::new(id.clone(), format!("linear point {id}"))
    }

    fn loss_at(
        &self,
        query: &Query,
        perturbation: Option<&[f64]>,
    ) -> std::result::Result<f64, BackendError> {
        let e = self
            .embeddings
            .get(&query.id)
            .ok_or_else(|| BackendError::QueryNotFound(query.id.clone()))?;
        let pooled = mean_pool(e).values;
        let point = match perturbation {
            Some(v) => add_vec(&pooled, v),
            None => pooled,
        };
        Ok(self.intercept + self.coeffs.iter().zip(&point).map(|(a, x)| a * x).sum::<f64>())
    }
}

impl ModelBackend for LinearField {
    fn embed_dim(&self) -> usize {
        self.coeffs.len()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            deterministic_field: true,
            text_responses: false,
            analytic_gradient: true,
        }
    }

    fn sample_refusals(&self, req: &SampleRequest<'_>) -> std::result::Result<RefusalSample, BackendError> {
        if req.n == 0 {
            return Err(BackendError::InvalidRequest("n must be >= 1".into()));
        }
        self.check_perturbation(req.perturbation)?;
        // The sampled path quantizes the exact loss to a replicated bit;
        // estimator tests use the exact hook instead.
        let f = self.loss_at(req.query, req.perturbation)?;
        let bit = u8::from(f < 0.5);
        RefusalSample::from_bits(vec![bit; req.n]).map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn generate(
        &self,
        query: &Query,
        _seed: u64,
        _stream_tag: u64,
        _system_prompt: Option<&str>,
    ) -> std::result::Result<String, BackendError> {
        let f = self.loss_at(query, None)?;
        Ok(if f < 0.5 {
            REFUSAL_RESPONSE.to_string()
        } else {
            COMPLIANCE_RESPONSE.to_string()
        })
    }

    fn exact_loss(
        &self,
        query: &Query,
        perturbation: Option<&[f64]>,
    ) -> std::result::Result<f64, BackendError> {
        self.check_perturbation(perturbation)?;
        self.loss_at(query, perturbation)
    }

    fn analytic_refusal_gradient(&self, _query: &Query) -> std::result::Result<Vec<f64>, BackendError> {
        Ok(self.coeffs.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DetectorConfig;
    use crate::refusal::{refusal_loss, sample_refusals};

    /// Constant-probability field: zero weight, bias chosen to hit `p`.
    pub(crate) fn constant_field(dim: usize, p: f64) -> SyntheticField {
        // logistic(scale * bias) = p  =>  bias = logit(p) with scale 1.
        let bias = if p <= 0.0 {
            -60.0
        } else if p >= 1.0 {
            60.0
        } else {
            (p / (1.0 - p)).ln()
        };
        SyntheticField::new(dim, vec![0.0; dim], bias, 1.0, vec![]).unwrap()
    }

    #[test]
    fn constant_probability_extremes() {
        let mut field = constant_field(2, 1.0);
        let q = field.register_point("q", &[0.0, 0.0]);
        let config = DetectorConfig::default();
        let sample = sample_refusals(&field, &q, None, &config, 0).unwrap();
        assert!(sample.bits().iter().all(|&b| b == 1));

        let mut field = constant_field(2, 0.0);
        let q = field.register_point("q", &[0.0, 0.0]);
        let sample = sample_refusals(&field, &q, None, &config, 0).unwrap();
        assert!(sample.bits().iter().all(|&b| b == 0));
    }

    #[test]
    fn monte_carlo_matches_constant_probability() {
        // N = 10^4 draws at p = 0.25: sample mean within 0.02.
        let mut field = constant_field(3, 0.25);
        let q = field.register_point("q", &[0.1, 0.2, 0.3]);
        let mut config = DetectorConfig::default();
        config.n_samples = 10_000;
        config.seed = 42;
        let sample = sample_refusals(&field, &q, None, &config, 0).unwrap();
        let mean =
            sample.bits().iter().map(|&b| f64::from(b)).sum::<f64>() / sample.len() as f64;
        assert!((mean - 0.25).abs() < 0.02, "mean {mean}");

        // phi = 1 - p: the refusal loss lands near 0.75... with p=0.7 near 0.3.
        let mut field = constant_field(3, 0.7);
        let q = field.register_point("q", &[0.0; 3]);
        let loss = refusal_loss(&sample_refusals(&field, &q, None, &config, 0).unwrap()).unwrap();
        assert!((loss.value - 0.3).abs() < 0.02, "loss {}", loss.value);
    }

    #[test]
    fn deterministic_mode_thresholds() {
        // Linear-ish p crossing 0.5 under a perturbation flips the bit.
        let mut field =
            SyntheticField::new(1, vec![1.0], 0.0, 4.0, vec![]).unwrap();
        field.set_deterministic(true);
        let q = field.register_point("q", &[-0.2]);
        let config = DetectorConfig::default();
        let base = sample_refusals(&field, &q, None, &config, 0).unwrap();
        assert!(base.bits().iter().all(|&b| b == 0), "p < 0.5 at -0.2");
        let v = [0.4];
        let shifted = sample_refusals(&field, &q, Some(&v), &config, 0).unwrap();
        assert!(shifted.bits().iter().all(|&b| b == 1), "p > 0.5 at 0.2");
    }

    #[test]
    fn unknown_query_id_not_found() {
        let field = constant_field(2, 0.5);
        let q = Query::new("missing", "hello");
        let config = DetectorConfig::default();
        let err = sample_refusals(&field, &q, None, &config, 0).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    #[test]
    fn derive_unknown_embeds_by_text() {
        let mut spec = constant_field(4, 0.3).to_spec();
        spec.derive_unknown = true;
        let field = SyntheticField::from_spec(spec).unwrap();
        let a = Query::from_text("what is the weather");
        let b = Query::from_text("what is the weather");
        assert_eq!(
            field.pooled_for(&a).unwrap(),
            field.pooled_for(&b).unwrap()
        );
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        // The module's own oracle is self-validated at unclamped points.
        let field = SyntheticField::new(
            3,
            vec![0.6, -0.2, 0.1],
            -0.4,
            2.0,
            vec![
                Bump {
                    amplitude: 0.5,
                    center: vec![0.5, 0.0, -0.3],
                    tau: 0.4,
                },
                Bump {
                    amplitude: 0.3,
                    center: vec![-0.2, 0.4, 0.2],
                    tau: 0.25,
                },
            ],
        )
        .unwrap();
        let probes = [
            vec![0.0, 0.0, 0.0],
            vec![0.4, 0.1, -0.2],
            vec![-0.3, 0.3, 0.15],
        ];
        let h = 1e-4;
        for point in &probes {
            let grad = field.probability_gradient(point).unwrap();
            for j in 0..3 {
                let mut hi = point.clone();
                let mut lo = point.clone();
                hi[j] += h;
                lo[j] -= h;
                let fd = (field.probability(&hi) - field.probability(&lo)) / (2.0 * h);
                let tol = 1e-6 * fd.abs().max(1e-3);
                assert!(
                    (grad[j] - fd).abs() < tol,
                    "component {j}: analytic {} vs fd {fd}",
                    grad[j]
                );
            }
            // loss gradient is the negated probability gradient
            let lg = field.loss_gradient(point).unwrap();
            for (a, b) in lg.iter().zip(&grad) {
                assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn clamped_point_has_no_gradient() {
        let field = SyntheticField::new(
            2,
            vec![0.0, 0.0],
            5.0,
            2.0,
            vec![Bump {
                amplitude: 0.8,
                center: vec![0.0, 0.0],
                tau: 1.0,
            }],
        )
        .unwrap();
        // logistic(10) ~ 1 plus a 0.8 bump: raw > 1 at the center.
        assert!(field.probability_gradient(&[0.0, 0.0]).is_err());
        assert_eq!(field.probability(&[0.0, 0.0]), 1.0);
    }

    #[test]
    fn probability_stays_in_unit_interval() {
        let field = SyntheticField::new(
            2,
            vec![1.0, 1.0],
            0.0,
            3.0,
            vec![Bump {
                amplitude: -2.0,
                center: vec![0.0, 0.0],
                tau: 0.5,
            }],
        )
        .unwrap();
        let mut rng = crate::rng::substream(3, "clamp-scan", 0);
        for _ in 0..500 {
            let point = [
                crate::rng::uniform(&mut rng) * 4.0 - 2.0,
                crate::rng::uniform(&mut rng) * 4.0 - 2.0,
            ];
            let p = field.probability(&point);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn n_zero_rejected() {
        let mut field = constant_field(2, 0.5);
        let q = field.register_point("q", &[0.0, 0.0]);
        let req = SampleRequest::new(&q, 0, 1, 0);
        assert!(ModelBackend::sample_refusals(&field, &req).is_err());
    }
}
