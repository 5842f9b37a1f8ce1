//! Threshold calibration and the two-step detection decision.
//!
//! Calibration runs the pipeline over a benign validation set: queries whose
//! sampled refusal loss falls below one half are stage-1 rejects (`S`); the
//! gradient norms of the survivors are sorted descending into `G`, and the
//! threshold is set to `G[k]` where `k - 1 <= |B_val|*sigma - |S| < k`. With
//! distinct norms, exactly `|S| + k - 1` validation queries end up refused,
//! which keeps the benign refusal rate at or under the budget.
//!
//! Detection rejects at stage 1 after exactly N samples (early exit), else
//! estimates the gradient reusing the stage-1 loss as the base term and
//! rejects when the norm strictly exceeds the threshold; ties at the
//! threshold pass, which can only lower the realized false-positive rate.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::ModelBackend;
use crate::config::DetectorConfig;
use crate::error::{Error, Result};
use crate::gradient::{base_loss, estimate_gradient};
use crate::query::Query;
use crate::refusal::RefusalLoss;
use crate::rng::tags;

/// Serialized threshold sentinel: `null` stands for "stage 2 disabled"
/// (positive infinity), since JSON has no literal for it.
mod infinity_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, ser: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            ser.serialize_some(value)
        } else {
            ser.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
        let opt = Option::<f64>::deserialize(de)?;
        Ok(opt.unwrap_or(f64::INFINITY))
    }
}

/// Outcome of calibrating on a benign validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Gradient-norm threshold; `+inf` disables stage 2 (serialized as null).
    #[serde(with = "infinity_as_null")]
    pub threshold: f64,
    pub sigma: f64,
    #[serde(rename = "N")]
    pub n_samples: usize,
    #[serde(rename = "P")]
    pub n_directions: usize,
    pub mu: f64,
    pub normalize_by_p: bool,
    pub seed: u64,
    pub val_size: usize,
    /// |S|: stage-1 rejections on the validation set.
    pub stage1_rejects: usize,
    /// Rank of the selected threshold in the descending norm list.
    pub k: i64,
    pub created_at: DateTime<Utc>,
    /// Attached when the stage-1 rejections already exhaust the budget
    /// (k < 1) or no survivor norms exist; stage 2 is disabled then.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    /// Audit trail: survivor gradient norms, descending.
    pub per_query_norms: Vec<(String, f64)>,
}

impl CalibrationResult {
    /// The benign refusal bound realized on the validation set:
    /// `(|S| + k - 1) / val_size` when stage 2 is active.
    pub fn validation_bound(&self) -> f64 {
        let stage2 = if self.threshold.is_finite() {
            (self.k - 1).max(0) as f64
        } else {
            0.0
        };
        (self.stage1_rejects as f64 + stage2) / self.val_size as f64
    }

    /// Refuses to pair a calibration with a config it was not computed for.
    pub fn check_compatible(&self, config: &DetectorConfig) -> Result<()> {
        let mut mismatches = Vec::new();
        if self.n_samples != config.n_samples {
            mismatches.push(format!("N {} vs {}", self.n_samples, config.n_samples));
        }
        if self.n_directions != config.n_directions {
            mismatches.push(format!("P {} vs {}", self.n_directions, config.n_directions));
        }
        if self.mu != config.mu {
            mismatches.push(format!("mu {} vs {}", self.mu, config.mu));
        }
        if self.normalize_by_p != config.normalize_by_p {
            mismatches.push(format!(
                "normalize_by_p {} vs {}",
                self.normalize_by_p, config.normalize_by_p
            ));
        }
        if mismatches.is_empty() {
            Ok(())
        } else {
            Err(Error::CalibrationMismatch(mismatches.join(", ")))
        }
    }

    /// Returns `config` with this calibration's threshold applied, after the
    /// compatibility check.
    pub fn apply(&self, config: &DetectorConfig) -> Result<DetectorConfig> {
        self.check_compatible(config)?;
        let mut out = config.clone();
        out.threshold = Some(self.threshold);
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&content)?)
    }
}

/// Detection outcome for one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    RejectStage1,
    RejectStage2,
    Pass,
}

impl Decision {
    pub fn is_rejection(self) -> bool {
        !matches!(self, Decision::Pass)
    }
}

/// Full detection verdict with query accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    /// Sampled refusal loss from stage 1.
    pub f_value: RefusalLoss,
    /// Present iff stage 2 ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    /// Present iff the query passed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Backend queries consumed by detection: N on stage-1 rejection,
    /// N*(P+1) otherwise.
    pub queries_used: u64,
    /// The passed-response generation, accounted separately from
    /// `queries_used`.
    pub generation_queries: u64,
    /// Echoed on rejection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_message: Option<String>,
}

impl Verdict {
    /// The text a chat surface should return for this verdict.
    pub fn response_text(&self) -> &str {
        match self.decision {
            Decision::Pass => self.response.as_deref().unwrap_or(""),
            _ => self.refusal_message.as_deref().unwrap_or(""),
        }
    }
}

/// Calibrates the gradient-norm threshold on a benign validation set.
pub fn calibrate(
    backend: &dyn ModelBackend,
    benign_val: &[Query],
    config: &DetectorConfig,
) -> Result<CalibrationResult> {
    config.validate()?;
    if benign_val.is_empty() {
        return Err(Error::InvalidInput("validation set is empty".into()));
    }
    if config.threshold.is_some() {
        return Err(Error::InvalidInput(
            "config already carries a threshold; calibrate with it unset".into(),
        ));
    }

    // Stage-1 losses, then survivor gradient norms, evaluated in parallel;
    // results keyed by index so scheduling cannot reorder anything.
    let losses: Vec<RefusalLoss> = benign_val
        .par_iter()
        .map(|q| base_loss(backend, q, config))
        .collect::<Result<_>>()?;

    let stage1_rejects = losses.iter().filter(|f| f.rejects()).count();

    let mut norms: Vec<(String, f64)> = benign_val
        .par_iter()
        .zip(&losses)
        .filter(|(_, f)| !f.rejects())
        .map(|(q, f)| {
            estimate_gradient(backend, q, config, Some(*f)).map(|est| (q.id.clone(), est.norm))
        })
        .collect::<Result<_>>()?;

    // Descending by norm; ties broken by query id for a stable order.
    norms.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });

    let budget = benign_val.len() as f64 * config.sigma - stage1_rejects as f64;
    let k = budget.floor() as i64 + 1;

    let (threshold, warning) = if k < 1 {
        (
            f64::INFINITY,
            Some(format!(
                "stage-1 rejections ({stage1_rejects}) already exceed the budget \
                 ({} * {} = {}); stage 2 disabled",
                benign_val.len(),
                config.sigma,
                benign_val.len() as f64 * config.sigma
            )),
        )
    } else if norms.is_empty() {
        (
            f64::INFINITY,
            Some("no stage-1 survivors to calibrate on; stage 2 disabled".into()),
        )
    } else if k as usize > norms.len() {
        // Budget exceeds the sample: fall back to the smallest observed norm.
        (norms[norms.len() - 1].1, None)
    } else {
        (norms[k as usize - 1].1, None)
    };

    Ok(CalibrationResult {
        threshold,
        sigma: config.sigma,
        n_samples: config.n_samples,
        n_directions: config.n_directions,
        mu: config.mu,
        normalize_by_p: config.normalize_by_p,
        seed: config.seed,
        val_size: benign_val.len(),
        stage1_rejects,
        k,
        created_at: Utc::now(),
        warning,
        per_query_norms: norms,
    })
}

/// Runs two-step detection on one query. Requires a threshold.
pub fn detect(
    backend: &dyn ModelBackend,
    query: &Query,
    config: &DetectorConfig,
) -> Result<Verdict> {
    config.validate()?;
    let threshold = config.threshold.ok_or(Error::MissingThreshold)?;
    query.validate_for_detection()?;

    let n = config.n_samples as u64;
    let f = base_loss(backend, query, config)?;
    if f.rejects() {
        return Ok(Verdict {
            decision: Decision::RejectStage1,
            f_value: f,
            grad_norm: None,
            response: None,
            queries_used: n,
            generation_queries: 0,
            refusal_message: Some(config.refusal_message.clone()),
        });
    }

    let est = estimate_gradient(backend, query, config, Some(f))?;
    let queries_used = n * (config.n_directions as u64 + 1);
    if est.norm > threshold {
        return Ok(Verdict {
            decision: Decision::RejectStage2,
            f_value: f,
            grad_norm: Some(est.norm),
            response: None,
            queries_used,
            generation_queries: 0,
            refusal_message: Some(config.refusal_message.clone()),
        });
    }

    let response = backend
        .generate(
            query,
            config.seed,
            tags::RESPONSE,
            config.system_prompt.as_deref(),
        )
        .map_err(|e| Error::backend(&query.id, e))?;
    Ok(Verdict {
        decision: Decision::Pass,
        f_value: f,
        grad_norm: Some(est.norm),
        response: Some(response),
        queries_used,
        generation_queries: 1,
        refusal_message: None,
    })
}

/// Batch outcome: per-query verdicts in input order plus total accounting.
#[derive(Debug)]
pub struct BatchOutcome {
    pub verdicts: Vec<Result<Verdict>>,
    pub total_queries_used: u64,
}

impl BatchOutcome {
    /// Unwraps all verdicts, failing on the first per-query error.
    pub fn into_verdicts(self) -> Result<Vec<Verdict>> {
        self.verdicts.into_iter().collect()
    }
}

/// Detects a batch of queries, dispatching up to `max_parallel` at a time.
///
/// Verdicts are bit-identical to sequential [`detect`] calls: every query's
/// substreams are keyed by its id, so scheduling cannot change results.
/// Per-query failures are recorded in their slot without aborting the batch.
pub fn detect_batch(
    backend: &dyn ModelBackend,
    queries: &[Query],
    config: &DetectorConfig,
    max_parallel: usize,
) -> Result<BatchOutcome> {
    if max_parallel == 0 {
        return Err(Error::InvalidInput("max_parallel must be >= 1".into()));
    }
    let mut verdicts = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(max_parallel) {
        let mut chunk_verdicts: Vec<Result<Verdict>> = chunk
            .par_iter()
            .map(|q| detect(backend, q, config))
            .collect();
        verdicts.append(&mut chunk_verdicts);
    }
    let total_queries_used = verdicts
        .iter()
        .filter_map(|v| v.as_ref().ok())
        .map(|v| v.queries_used)
        .sum();
    Ok(BatchOutcome {
        verdicts,
        total_queries_used,
    })
}

/// Per-decision counts for quick summaries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub reject_stage1: usize,
    pub reject_stage2: usize,
    pub pass: usize,
}

impl DecisionCounts {
    pub fn tally<'a>(verdicts: impl IntoIterator<Item = &'a Verdict>) -> Self {
        let mut counts = Self::default();
        for v in verdicts {
            match v.decision {
                Decision::RejectStage1 => counts.reject_stage1 += 1,
                Decision::RejectStage2 => counts.reject_stage2 += 1,
                Decision::Pass => counts.pass += 1,
            }
        }
        counts
    }
}

/// Convenience wrapper returning verdicts keyed by query id.
pub fn detect_map(
    backend: &dyn ModelBackend,
    queries: &[Query],
    config: &DetectorConfig,
    max_parallel: usize,
) -> Result<BTreeMap<String, Verdict>> {
    let outcome = detect_batch(backend, queries, config, max_parallel)?;
    let mut map = BTreeMap::new();
    for (q, v) in queries.iter().zip(outcome.verdicts) {
        map.insert(q.id.clone(), v?);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::SyntheticField;

    fn flat_field(p: f64) -> SyntheticField {
        let bias = if p <= 0.0 {
            -60.0
        } else if p >= 1.0 {
            60.0
        } else {
            (p / (1.0 - p)).ln()
        };
        SyntheticField::new(2, vec![0.0, 0.0], bias, 1.0, vec![]).unwrap()
    }

    fn config() -> DetectorConfig {
        DetectorConfig::default()
    }

    #[test]
    fn stage1_rejects_low_loss() {
        // p = 0.95: essentially every sample refuses, f near 0.
        let mut field = flat_field(0.95);
        let q = field.register_point("q", &[0.0, 0.0]);
        let cfg = config().with_threshold(f64::INFINITY);
        let v = detect(&field, &q, &cfg).unwrap();
        assert_eq!(v.decision, Decision::RejectStage1);
        assert_eq!(v.queries_used, 10);
        assert!(v.grad_norm.is_none());
        assert_eq!(v.refusal_message.as_deref(), Some("I cannot fulfill your request."));
    }

    #[test]
    fn boundary_norm_passes_strictly() {
        // With a flat p = 0 field the estimate is exactly zero; threshold 0
        // means the norm equals the threshold, and ties pass.
        let mut field = flat_field(0.0);
        let q = field.register_point("q", &[0.1, -0.1]);
        let cfg = config().with_threshold(0.0);
        let v = detect(&field, &q, &cfg).unwrap();
        assert_eq!(v.decision, Decision::Pass);
        assert_eq!(v.grad_norm, Some(0.0));
        assert_eq!(v.queries_used, 110);
        assert_eq!(v.generation_queries, 1);
        assert!(v.response.is_some());
    }

    #[test]
    fn missing_threshold_is_a_config_error() {
        let mut field = flat_field(0.0);
        let q = field.register_point("q", &[0.0, 0.0]);
        let err = detect(&field, &q, &config()).unwrap_err();
        assert!(matches!(err, Error::MissingThreshold));
    }

    #[test]
    fn calibration_bound_and_examples() {
        // 10 benign queries in a noisy region produce distinct norms;
        // sigma = 0.2 with |S| = 0 selects k = 3 and t = third largest.
        let mut field = SyntheticField::new(
            2,
            vec![1.2, -0.8],
            -1.1,
            2.0,
            vec![],
        )
        .unwrap();
        let queries: Vec<Query> = (0..10)
            .map(|i| {
                let x = -0.3 + 0.07 * i as f64;
                field.register_point(format!("b{i:02}"), &[x, 0.2 * (i % 3) as f64])
            })
            .collect();
        let mut cfg = config();
        cfg.sigma = 0.2;
        let cal = calibrate(&field, &queries, &cfg).unwrap();
        assert_eq!(cal.stage1_rejects, 0);
        assert_eq!(cal.k, 3);
        let norms: Vec<f64> = cal.per_query_norms.iter().map(|(_, n)| *n).collect();
        assert_eq!(cal.threshold, norms[2]);
        let above = norms.iter().filter(|&&n| n > cal.threshold).count();
        assert_eq!(above, 2, "exactly two validation norms exceed t");
        assert!(cal.validation_bound() <= 0.2);
        assert!(cal.warning.is_none());
    }

    #[test]
    fn exhausted_budget_disables_stage2() {
        // All-refusing field: every validation query is a stage-1 reject,
        // so sigma * |B| - |S| < 0 and the sentinel threshold applies.
        let mut field = flat_field(1.0);
        let queries: Vec<Query> = (0..10)
            .map(|i| field.register_point(format!("b{i}"), &[0.0, 0.0]))
            .collect();
        let mut cfg = config();
        cfg.sigma = 0.2;
        let cal = calibrate(&field, &queries, &cfg).unwrap();
        assert!(cal.threshold.is_infinite());
        assert!(cal.k < 1);
        assert!(cal.warning.is_some());
    }

    #[test]
    fn single_query_k_exceeds_norm_count() {
        // One benign query with f = 1.0 and sigma = 1 gives k = 2 > |G| = 1;
        // the threshold falls back to the smallest (only) norm.
        let mut field = flat_field(0.01);
        let q = field.register_point("only", &[0.0, 0.0]);
        let mut cfg = config();
        cfg.sigma = 1.0;
        let cal = calibrate(&field, std::slice::from_ref(&q), &cfg).unwrap();
        assert_eq!(cal.k, 2);
        assert_eq!(cal.per_query_norms.len(), 1);
        assert_eq!(cal.threshold, cal.per_query_norms[0].1);
        // Strict > rejects nothing at the threshold itself.
        let applied = cal.apply(&cfg).unwrap();
        let v = detect(&field, &q, &applied).unwrap();
        assert_ne!(v.decision, Decision::RejectStage2);
    }

    #[test]
    fn calibration_compatibility_check() {
        let mut field = flat_field(0.0);
        let q = field.register_point("b", &[0.0, 0.0]);
        let cfg = config();
        let cal = calibrate(&field, std::slice::from_ref(&q), &cfg).unwrap();
        let mut other = cfg.clone();
        other.mu = 0.05;
        assert!(cal.apply(&other).is_err());
        assert!(cal.apply(&cfg).is_ok());
    }

    #[test]
    fn batch_matches_sequential_and_accounts_queries() {
        let mut field = SyntheticField::new(
            2,
            vec![2.0, 0.0],
            0.0,
            3.0,
            vec![],
        )
        .unwrap();
        let queries: Vec<Query> = (0..20)
            .map(|i| {
                let x = -1.0 + 0.1 * i as f64;
                field.register_point(format!("q{i:02}"), &[x, 0.0])
            })
            .collect();
        let cfg = config().with_threshold(25.0);

        let sequential: Vec<Verdict> = queries
            .iter()
            .map(|q| detect(&field, q, &cfg).unwrap())
            .collect();
        for max_parallel in [1, 8, 110] {
            let batch = detect_batch(&field, &queries, &cfg, max_parallel)
                .unwrap()
                .into_verdicts()
                .unwrap();
            assert_eq!(batch, sequential, "max_parallel={max_parallel}");
        }

        let counts = DecisionCounts::tally(&sequential);
        let expected: u64 = 10 * counts.reject_stage1 as u64
            + 110 * (counts.reject_stage2 + counts.pass) as u64;
        let total = detect_batch(&field, &queries, &cfg, 8)
            .unwrap()
            .total_queries_used;
        assert_eq!(total, expected);
    }

    #[test]
    fn per_query_errors_do_not_abort_batch() {
        let mut field = flat_field(0.0);
        let good = field.register_point("good", &[0.0, 0.0]);
        let missing = Query::new("missing", "hello");
        let cfg = config().with_threshold(1.0);
        let outcome = detect_batch(&field, &[good, missing], &cfg, 2).unwrap();
        assert!(outcome.verdicts[0].is_ok());
        assert!(outcome.verdicts[1].is_err());
    }

    #[test]
    fn verdict_queries_used_invariant() {
        let mut field = SyntheticField::new(
            2,
            vec![1.5, -0.5],
            -0.2,
            2.5,
            vec![],
        )
        .unwrap();
        let cfg = config().with_threshold(10.0);
        for i in 0..30 {
            let x = -1.5 + 0.1 * i as f64;
            let q = field.register_point(format!("p{i}"), &[x, x / 2.0]);
            let v = detect(&field, &q, &cfg).unwrap();
            match v.decision {
                Decision::RejectStage1 => {
                    assert_eq!(v.queries_used, 10);
                    assert!(v.grad_norm.is_none());
                }
                Decision::RejectStage2 | Decision::Pass => {
                    assert_eq!(v.queries_used, 110);
                    assert!(v.grad_norm.is_some());
                }
            }
            if v.decision == Decision::Pass {
                assert!(v.response.is_some());
            }
        }
    }

    #[test]
    fn raising_threshold_never_unpasses() {
        let mut field = SyntheticField::new(
            2,
            vec![1.0, 1.0],
            -0.5,
            2.0,
            vec![],
        )
        .unwrap();
        let queries: Vec<Query> = (0..15)
            .map(|i| field.register_point(format!("m{i}"), &[0.05 * i as f64, -0.02 * i as f64]))
            .collect();
        let low = config().with_threshold(5.0);
        let high = config().with_threshold(50.0);
        for q in &queries {
            let v_low = detect(&field, q, &low).unwrap();
            let v_high = detect(&field, q, &high).unwrap();
            if v_low.decision == Decision::Pass {
                assert_eq!(v_high.decision, Decision::Pass);
            }
        }
    }

    #[test]
    fn lowering_sigma_never_lowers_threshold() {
        let mut field = SyntheticField::new(
            2,
            vec![1.3, -0.4],
            -0.8,
            2.0,
            vec![],
        )
        .unwrap();
        let queries: Vec<Query> = (0..25)
            .map(|i| field.register_point(format!("v{i}"), &[0.04 * i as f64, 0.01 * i as f64]))
            .collect();
        let mut prev_t = f64::NEG_INFINITY;
        for sigma in [0.4, 0.3, 0.2, 0.1, 0.04, 0.0] {
            let mut cfg = config();
            cfg.sigma = sigma;
            let cal = calibrate(&field, &queries, &cfg).unwrap();
            assert!(
                cal.threshold >= prev_t || (cal.threshold - prev_t).abs() < 1e-12,
                "threshold decreased when sigma fell: {} -> {} at sigma {sigma}",
                prev_t,
                cal.threshold
            );
            prev_t = cal.threshold;
        }
    }

    #[test]
    fn calibration_json_round_trip_with_sentinel() {
        let cal = CalibrationResult {
            threshold: f64::INFINITY,
            sigma: 0.05,
            n_samples: 10,
            n_directions: 10,
            mu: 0.02,
            normalize_by_p: false,
            seed: 42,
            val_size: 10,
            stage1_rejects: 7,
            k: -1,
            created_at: Utc::now(),
            warning: Some("budget exceeded".into()),
            per_query_norms: vec![("a".into(), 1.0)],
        };
        let json = serde_json::to_string(&cal).unwrap();
        assert!(json.contains("\"threshold\":null"), "{json}");
        let back: CalibrationResult = serde_json::from_str(&json).unwrap();
        assert!(back.threshold.is_infinite());
    }
}
