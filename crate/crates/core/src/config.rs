//! Pipeline configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The refusal text returned to rejected queries.
pub const DEFAULT_REFUSAL_MESSAGE: &str = "I cannot fulfill your request.";

/// The default experiment seed set.
pub const DEFAULT_SEEDS: [u64; 5] = [13, 21, 42, 87, 100];

fn default_n() -> usize {
    10
}
fn default_p() -> usize {
    10
}
fn default_mu() -> f64 {
    0.02
}
fn default_sigma() -> f64 {
    0.05
}
fn default_seed() -> u64 {
    42
}
fn default_refusal_message() -> String {
    DEFAULT_REFUSAL_MESSAGE.to_string()
}

/// Every hyperparameter of the two-step detection pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Response samples per refusal-loss evaluation (N).
    #[serde(default = "default_n")]
    pub n_samples: usize,
    /// Gaussian directions per gradient estimate (P).
    #[serde(default = "default_p")]
    pub n_directions: usize,
    /// Finite-difference smoothing parameter, in embedding-space units.
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Target benign refusal (false positive) budget used at calibration.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Gradient-norm rejection threshold. Unset until calibrated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Divide the direction sum by P. Off by default: calibration and
    /// detection share P, so the threshold absorbs the scale.
    #[serde(default)]
    pub normalize_by_p: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Optional system prompt forwarded to backends that honor one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    /// Message returned on rejection.
    #[serde(default = "default_refusal_message")]
    pub refusal_message: String,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            n_samples: default_n(),
            n_directions: default_p(),
            mu: default_mu(),
            sigma: default_sigma(),
            threshold: None,
            normalize_by_p: false,
            seed: default_seed(),
            system_prompt: None,
            refusal_message: default_refusal_message(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidInput("n_samples must be >= 1".into()));
        }
        if self.n_directions == 0 {
            return Err(Error::InvalidInput("n_directions must be >= 1".into()));
        }
        if !(self.mu > 0.0) {
            return Err(Error::InvalidInput(format!(
                "mu must be positive, got {}",
                self.mu
            )));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::InvalidInput(format!(
                "sigma must lie in [0, 1], got {}",
                self.sigma
            )));
        }
        if let Some(t) = self.threshold {
            if t < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "threshold must be non-negative, got {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = Some(threshold);
        self
    }

    /// Total backend queries for a full (non-early-exit) detection.
    pub fn full_query_budget(&self) -> u64 {
        self.n_samples as u64 * (self.n_directions as u64 + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = DetectorConfig::default();
        assert_eq!(cfg.n_samples, 10);
        assert_eq!(cfg.n_directions, 10);
        assert_eq!(cfg.mu, 0.02);
        assert_eq!(cfg.sigma, 0.05);
        assert!(!cfg.normalize_by_p);
        assert_eq!(cfg.refusal_message, "I cannot fulfill your request.");
        assert_eq!(cfg.full_query_budget(), 110);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = DetectorConfig::default();
        cfg.mu = 0.0;
        assert!(cfg.validate().is_err());
        cfg.mu = 0.02;
        cfg.sigma = 1.5;
        assert!(cfg.validate().is_err());
        cfg.sigma = 0.05;
        cfg.n_samples = 0;
        assert!(cfg.validate().is_err());
    }
}
