//! Scripted-text backend: per-query response distributions over real strings,
//! so the keyword indicator runs on actual text.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{Capabilities, ModelBackend, SampleRequest};
use crate::embedding::EmbeddingMatrix;
use crate::error::{BackendError, Error, Result};
use crate::keywords::{jb_indicator, KeywordSet};
use crate::query::Query;
use crate::refusal::RefusalSample;
use crate::rng::{substream, uniform, NormalSource};

/// One weighted response option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseOption {
    pub text: String,
    pub probability: f64,
}

/// Serializable scripted backend description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSpec {
    pub dim: usize,
    /// query id -> weighted response options (probabilities sum to 1).
    pub script: BTreeMap<String, Vec<ResponseOption>>,
    /// Optional explicit embeddings; missing ids get text-derived ones.
    #[serde(default)]
    pub embeddings: BTreeMap<String, EmbeddingMatrix>,
    /// Keyword list override; defaults to the built-in list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
    /// Truncate responses to this many bytes before keyword matching, when
    /// set. Full responses are matched by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncate_responses: Option<usize>,
}

impl ScriptedSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&content)?)
    }
}

/// A backend that samples responses from per-query scripts.
#[derive(Debug, Clone)]
pub struct ScriptedText {
    dim: usize,
    script: Arc<BTreeMap<String, Vec<ResponseOption>>>,
    embeddings: Arc<BTreeMap<String, EmbeddingMatrix>>,
    keywords: KeywordSet,
    truncate_responses: Option<usize>,
}

impl ScriptedText {
    pub fn from_spec(spec: ScriptedSpec) -> Result<Self> {
        for (id, options) in &spec.script {
            if options.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "script for `{id}` has no response options"
                )));
            }
            let total: f64 = options.iter().map(|o| o.probability).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "script probabilities for `{id}` sum to {total}, expected 1"
                )));
            }
            if options.iter().any(|o| o.probability < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "script for `{id}` has a negative probability"
                )));
            }
        }
        let keywords = match spec.keywords {
            Some(list) => KeywordSet::new(list)?,
            None => KeywordSet::default(),
        };
        Ok(Self {
            dim: spec.dim,
            script: Arc::new(spec.script),
            embeddings: Arc::new(spec.embeddings),
            keywords,
            truncate_responses: spec.truncate_responses,
        })
    }

    fn options_for(&self, query: &Query) -> std::result::Result<&[ResponseOption], BackendError> {
        self.script
            .get(&query.id)
            .map(Vec::as_slice)
            .ok_or_else(|| BackendError::QueryNotFound(query.id.clone()))
    }

    fn draw<'a>(&'a self, options: &'a [ResponseOption], u: f64) -> &'a str {
        let mut acc = 0.0;
        for opt in options {
            acc += opt.probability;
            if u < acc {
                return &opt.text;
            }
        }
        &options[options.len() - 1].text
    }

    fn matched_text<'a>(&self, text: &'a str) -> &'a str {
        match self.truncate_responses {
            Some(limit) if text.len() > limit => {
                let mut end = limit;
                while end > 0 && !text.is_char_boundary(end) {
                    end -= 1;
                }
                &text[..end]
            }
            _ => text,
        }
    }
}

impl ModelBackend for ScriptedText {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            deterministic_field: false,
            text_responses: true,
            analytic_gradient: false,
        }
    }

    fn sample_refusals(&self, req: &SampleRequest<'_>) -> std::result::Result<RefusalSample, BackendError> {
        if req.n == 0 {
            return Err(BackendError::InvalidRequest("n must be >= 1".into()));
        }
        self.check_perturbation(req.perturbation)?;
        // Scripted responses carry no embedding dependence, so perturbations
        // leave the distribution (and the substream) unchanged; gradient
        // norms over this backend are identically zero.
        let options = self.options_for(req.query)?;
        let mut rng = substream(req.seed, &req.query.id, req.stream_tag);
        let mut bits = Vec::with_capacity(req.n);
        let mut responses = req.return_responses.then(|| Vec::with_capacity(req.n));
        for _ in 0..req.n {
            let text = self.draw(options, uniform(&mut rng));
            bits.push(jb_indicator(self.matched_text(text), &self.keywords));
            if let Some(resps) = responses.as_mut() {
                resps.push(text.to_string());
            }
        }
        match responses {
            Some(resps) => RefusalSample::with_responses(bits, resps, &self.keywords)
                .map_err(|e| BackendError::Protocol(e.to_string())),
            None => RefusalSample::from_bits(bits).map_err(|e| BackendError::Protocol(e.to_string())),
        }
    }

    fn generate(
        &self,
        query: &Query,
        seed: u64,
        stream_tag: u64,
        _system_prompt: Option<&str>,
    ) -> std::result::Result<String, BackendError> {
        let options = self.options_for(query)?;
        let mut rng = substream(seed, &query.id, stream_tag);
        Ok(self.draw(options, uniform(&mut rng)).to_string())
    }
}

impl ScriptedText {
    /// Pooled embedding for a query: explicit when registered, otherwise
    /// derived from the text hash the same way the synthetic field does.
    pub fn pooled_for(&self, query: &Query) -> Vec<f64> {
        if let Some(e) = self.embeddings.get(&query.id) {
            return crate::embedding::mean_pool(e).values;
        }
        let seed = crate::rng::derive_seed(0, &query.text, 0);
        let mut src = NormalSource::new(seed, "derived-embedding", 0);
        (0..self.dim).map(|_| src.next() * 0.5).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DetectorConfig;
    use crate::refusal::sample_refusals;

    fn spec() -> ScriptedSpec {
        let mut script = BTreeMap::new();
        script.insert(
            "mixed".to_string(),
            vec![
                ResponseOption {
                    text: "Sorry, I cannot help with that request.".into(),
                    probability: 0.6,
                },
                ResponseOption {
                    text: "Sure, here is the answer you wanted.".into(),
                    probability: 0.4,
                },
            ],
        );
        script.insert(
            "compliant".to_string(),
            vec![ResponseOption {
                text: "Absolutely, happy to help.".into(),
                probability: 1.0,
            }],
        );
        ScriptedSpec {
            dim: 4,
            script,
            embeddings: BTreeMap::new(),
            keywords: None,
            truncate_responses: None,
        }
    }

    #[test]
    fn bits_match_keyword_indicator() {
        let backend = ScriptedText::from_spec(spec()).unwrap();
        let q = Query::new("mixed", "tell me");
        let config = DetectorConfig::default();
        let req = SampleRequest {
            query: &q,
            perturbation: None,
            n: 50,
            seed: config.seed,
            stream_tag: 0,
            system_prompt: None,
            return_responses: true,
        };
        let sample = ModelBackend::sample_refusals(&backend, &req).unwrap();
        let responses = sample.responses().unwrap();
        let ks = KeywordSet::default();
        for (bit, resp) in sample.bits().iter().zip(responses) {
            assert_eq!(*bit, jb_indicator(resp, &ks));
        }
        // Refusal fraction should hover near 0.6.
        let rate = sample.bits().iter().map(|&b| f64::from(b)).sum::<f64>() / 50.0;
        assert!((rate - 0.6).abs() < 0.25, "rate {rate}");
    }

    #[test]
    fn fully_compliant_script_never_refuses() {
        let backend = ScriptedText::from_spec(spec()).unwrap();
        let q = Query::new("compliant", "hello");
        let config = DetectorConfig::default();
        let sample = sample_refusals(&backend, &q, None, &config, 0).unwrap();
        assert!(sample.bits().iter().all(|&b| b == 0));
    }

    #[test]
    fn probabilities_must_sum_to_one() {
        let mut s = spec();
        s.script.get_mut("mixed").unwrap()[0].probability = 0.9;
        assert!(ScriptedText::from_spec(s).is_err());
    }

    #[test]
    fn truncation_limits_matching() {
        let mut s = spec();
        s.truncate_responses = Some(4);
        s.script.insert(
            "late-refusal".into(),
            vec![ResponseOption {
                text: "Well Sorry but no".into(),
                probability: 1.0,
            }],
        );
        let backend = ScriptedText::from_spec(s).unwrap();
        let q = Query::new("late-refusal", "x");
        let config = DetectorConfig::default();
        let sample = sample_refusals(&backend, &q, None, &config, 0).unwrap();
        // "Sorry" sits beyond the 4-byte prefix, so no refusal is seen.
        assert!(sample.bits().iter().all(|&b| b == 0));
    }

    #[test]
    fn deterministic_across_calls() {
        let backend = ScriptedText::from_spec(spec()).unwrap();
        let q = Query::new("mixed", "tell me");
        let config = DetectorConfig::default();
        let a = sample_refusals(&backend, &q, None, &config, 7).unwrap();
        let b = sample_refusals(&backend, &q, None, &config, 7).unwrap();
        assert_eq!(a, b);
    }
}
