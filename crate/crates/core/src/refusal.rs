//! Refusal samples and the sampled refusal-loss estimator.

use serde::{Deserialize, Serialize};

use crate::backend::{ModelBackend, SampleRequest};
use crate::config::DetectorConfig;
use crate::error::{Error, Result};
use crate::keywords::{jb_indicator, KeywordSet};
use crate::query::Query;

/// N refusal indicator bits for one query, optionally with the sampled
/// response texts they were computed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefusalSample {
    bits: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    responses: Option<Vec<String>>,
}

impl RefusalSample {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidInput(
                "refusal bits must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            bits,
            responses: None,
        })
    }

    /// Builds a sample from response texts, checking that each bit is the
    /// keyword indicator of its response.
    pub fn with_responses(
        bits: Vec<u8>,
        responses: Vec<String>,
        keywords: &KeywordSet,
    ) -> Result<Self> {
        if bits.len() != responses.len() {
            return Err(Error::InvalidInput(format!(
                "{} bits but {} responses",
                bits.len(),
                responses.len()
            )));
        }
        for (i, (bit, resp)) in bits.iter().zip(&responses).enumerate() {
            if *bit != jb_indicator(resp, keywords) {
                return Err(Error::InvalidInput(format!(
                    "bit {i} disagrees with the keyword indicator of its response"
                )));
            }
        }
        let mut sample = Self::from_bits(bits)?;
        sample.responses = Some(responses);
        Ok(sample)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn responses(&self) -> Option<&[String]> {
        self.responses.as_deref()
    }
}

/// A sampled refusal loss: one minus the refusal rate over n samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefusalLoss {
    pub value: f64,
    pub n: usize,
}

impl RefusalLoss {
    /// Exact value injected by deterministic diagnostic backends. The
    /// multiple-of-1/n invariant applies to the sampled constructor only.
    pub fn exact(value: f64, n: usize) -> Self {
        Self { value, n }
    }

    /// Stage-1 rejection test.
    pub fn rejects(&self) -> bool {
        self.value < 0.5
    }
}

/// Sample mean refusal loss: `1 - (1/N) * sum(bits)`.
pub fn refusal_loss(sample: &RefusalSample) -> Result<RefusalLoss> {
    if sample.is_empty() {
        return Err(Error::InvalidInput(
            "cannot compute refusal loss of an empty sample".into(),
        ));
    }
    let n = sample.len();
    let refusals: u32 = sample.bits().iter().map(|&b| u32::from(b)).sum();
    Ok(RefusalLoss {
        value: 1.0 - f64::from(refusals) / n as f64,
        n,
    })
}

/// Draws `config.n_samples` refusal bits for `query` from the backend, on the
/// `(config.seed, query.id, stream_tag)` substream.
///
/// Deterministic for a fixed key; distinct tags give independent substreams,
/// so concurrent evaluation of different tags is reproducible bit-for-bit.
pub fn sample_refusals(
    backend: &dyn ModelBackend,
    query: &Query,
    perturbation: Option<&[f64]>,
    config: &DetectorConfig,
    stream_tag: u64,
) -> Result<RefusalSample> {
    query.validate_for_detection()?;
    backend
        .check_perturbation(perturbation)
        .map_err(|e| Error::backend(&query.id, e))?;
    let mut req = SampleRequest::new(query, config.n_samples, config.seed, stream_tag)
        .with_system_prompt(config.system_prompt.as_deref());
    req.perturbation = perturbation;
    let sample = backend
        .sample_refusals(&req)
        .map_err(|e| Error::backend(&query.id, e))?;
    if sample.len() != config.n_samples {
        return Err(Error::backend(
            &query.id,
            crate::error::BackendError::Protocol(format!(
                "backend returned {} bits, expected {}",
                sample.len(),
                config.n_samples
            )),
        ));
    }
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refusal_loss_examples() {
        let all_refuse = RefusalSample::from_bits(vec![1; 10]).unwrap();
        assert_eq!(refusal_loss(&all_refuse).unwrap().value, 0.0);

        let none_refuse = RefusalSample::from_bits(vec![0; 10]).unwrap();
        assert_eq!(refusal_loss(&none_refuse).unwrap().value, 1.0);

        let four = RefusalSample::from_bits(vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0]).unwrap();
        let loss = refusal_loss(&four).unwrap();
        assert!((loss.value - 0.6).abs() < 1e-15);
        assert_eq!(loss.n, 10);
    }

    #[test]
    fn empty_sample_is_invalid() {
        let empty = RefusalSample::from_bits(vec![]).unwrap();
        assert!(refusal_loss(&empty).is_err());
    }

    #[test]
    fn loss_is_multiple_of_one_over_n() {
        let mut rng = crate::rng::substream(5, "loss-grid", 0);
        for n in 1..=24usize {
            let bits: Vec<u8> = (0..n).map(|_| crate::rng::bernoulli(&mut rng, 0.4)).collect();
            let loss = refusal_loss(&RefusalSample::from_bits(bits).unwrap()).unwrap();
            let scaled = loss.value * n as f64;
            assert!((scaled - scaled.round()).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&loss.value));
        }
    }

    #[test]
    fn response_bit_consistency_enforced() {
        let ks = KeywordSet::default();
        let ok = RefusalSample::with_responses(
            vec![1, 0],
            vec!["Sorry, no.".into(), "Sure thing".into()],
            &ks,
        );
        assert!(ok.is_ok());
        let bad = RefusalSample::with_responses(
            vec![0, 0],
            vec!["Sorry, no.".into(), "Sure thing".into()],
            &ks,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn boundary_half_does_not_reject() {
        let half = RefusalSample::from_bits(vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0]).unwrap();
        let loss = refusal_loss(&half).unwrap();
        assert_eq!(loss.value, 0.5);
        assert!(!loss.rejects());
    }
}
