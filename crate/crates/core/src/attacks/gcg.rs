//! Greedy coordinate search over a finite embedding-substitution space.
//!
//! Simulates the white-box suffix-optimization attack at desk scale: token
//! choices become per-position rows from a finite candidate vocabulary, the
//! generation loss becomes the field's refusal probability, and the adaptive
//! variant augments the objective with P Gaussian-perturbed copies of the
//! query so the optimizer is pushed toward regions that stay compliant under
//! perturbation, which is what lowers the detector's gradient norm.
//!
//! Each iteration ranks candidate substitutions per position by the analytic
//! objective gradient (top-k), evaluates a random batch of them exactly, and
//! accepts the best batch member only if it improves the objective, so the
//! recorded objective trace never increases.

use serde::{Deserialize, Serialize};

use crate::config::DetectorConfig;
use crate::directions::sample_directions;
use crate::embedding::{add_vec, mean_pool, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::field::SyntheticField;
use crate::gradient::estimate_gradient;
use crate::query::Query;
use crate::rng::derive_seed;

use super::{attack_rng, uniform_index, AttackReport, IterationRecord};

/// Options for the embedding-space greedy search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcgSimOptions {
    /// Perturbed copies in the objective; 0 is the non-adaptive analogue.
    pub p_directions: usize,
    pub iterations: usize,
    /// Batch of exact evaluations per iteration.
    pub batch: usize,
    /// Candidates kept per position after gradient ranking.
    pub top_k: usize,
    /// Scale of the Gaussian noise added to the pooled embedding in the
    /// consistency objective.
    pub noise_scale: f64,
    /// Positions the search may substitute; `None` means every row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modifiable: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for GcgSimOptions {
    fn default() -> Self {
        Self {
            p_directions: 10,
            iterations: 40,
            batch: 16,
            top_k: 8,
            noise_scale: 0.25,
            modifiable: None,
            seed: 42,
        }
    }
}

/// Mean refusal probability over the query and its perturbed copies.
fn objective(field: &SyntheticField, pooled: &[f64], offsets: &[Vec<f64>]) -> f64 {
    let mut total = field.probability(pooled);
    for offset in offsets {
        total += field.probability(&add_vec(pooled, offset));
    }
    total / (offsets.len() + 1) as f64
}

/// Gradient of the objective with respect to the pooled embedding. Positions
/// where the field is clamped contribute zero, matching the flat clamped
/// region.
fn objective_gradient(field: &SyntheticField, pooled: &[f64], offsets: &[Vec<f64>]) -> Vec<f64> {
    let d = pooled.len();
    let mut grad = vec![0.0; d];
    let mut add = |point: &[f64]| {
        if let Ok(g) = field.probability_gradient(point) {
            for (acc, x) in grad.iter_mut().zip(&g) {
                *acc += x;
            }
        }
    };
    add(pooled);
    for offset in offsets {
        add(&add_vec(pooled, offset));
    }
    let scale = (offsets.len() + 1) as f64;
    for x in &mut grad {
        *x /= scale;
    }
    grad
}

/// Runs the greedy embedding-substitution attack against a synthetic field.
///
/// `candidate_set` is the finite vocabulary of rows a position may be
/// replaced with. The report records the detector's gradient norm on the
/// query before and after the search, plus the full objective trace.
pub fn adaptive_gcg_sim(
    field: &SyntheticField,
    query: &Query,
    candidate_set: &[Vec<f64>],
    options: &GcgSimOptions,
    detector_config: &DetectorConfig,
) -> Result<AttackReport> {
    if candidate_set.is_empty() {
        return Err(Error::InvalidInput("candidate set is empty".into()));
    }
    let base = field
        .embedding_of(&query.id)
        .ok_or_else(|| Error::InvalidInput(format!("query `{}` has no embedding", query.id)))?
        .clone();
    let d = base.dim();
    for (i, c) in candidate_set.iter().enumerate() {
        if c.len() != d {
            return Err(Error::InvalidInput(format!(
                "candidate {i} has dimension {}, embedding dimension is {d}",
                c.len()
            )));
        }
    }
    let n_tokens = base.n_tokens();
    let modifiable: Vec<usize> = match &options.modifiable {
        Some(positions) => {
            if positions.iter().any(|&i| i >= n_tokens) {
                return Err(Error::InvalidInput(
                    "modifiable position out of range".into(),
                ));
            }
            positions.clone()
        }
        None => (0..n_tokens).collect(),
    };
    if modifiable.is_empty() {
        return Err(Error::InvalidInput("no modifiable positions".into()));
    }

    // Perturbation offsets drawn once, as in the reference control flow.
    let offsets: Vec<Vec<f64>> = if options.p_directions > 0 {
        let dir_seed = derive_seed(options.seed, &query.id, crate::rng::tags::ATTACK);
        sample_directions(options.p_directions, d, dir_seed)
            .directions()
            .iter()
            .map(|u| u.iter().map(|x| x * options.noise_scale).collect())
            .collect()
    } else {
        Vec::new()
    };

    let detector_norm = |embedding: &EmbeddingMatrix| -> Result<f64> {
        let probe_field = field.with_embedding(&query.id, embedding.clone());
        Ok(estimate_gradient(&probe_field, query, detector_config, None)?.norm)
    };

    let norm_before = detector_norm(&base)?;
    let mut rows: Vec<Vec<f64>> = base.rows().to_vec();
    let mut pooled = mean_pool(&base).values;
    let mut current = objective(field, &pooled, &offsets);

    let mut report = AttackReport {
        success: false,
        final_query: Some(query.clone()),
        iterations_used: 0,
        per_iteration: Vec::new(),
        norms_pre: vec![norm_before],
        norms_post: Vec::new(),
        percentiles_pre: None,
        percentiles_post: None,
        objective_trace: Vec::new(),
        threshold: detector_config.threshold.unwrap_or(f64::INFINITY),
        aborted: None,
    };

    let mut rng = attack_rng(options.seed, &query.id);
    let n = n_tokens as f64;

    for iteration in 1..=options.iterations {
        report.iterations_used = iteration;
        // The objective depends on rows only through the pooled mean, so the
        // per-row gradient is the pooled gradient over n; ranking per
        // position then reduces to the predicted pooled-space change.
        let pooled_grad = objective_gradient(field, &pooled, &offsets);

        // Top-k candidate substitutions per modifiable position.
        let mut shortlist: Vec<(usize, Vec<usize>)> = Vec::with_capacity(modifiable.len());
        for &pos in &modifiable {
            let mut scored: Vec<(usize, f64)> = candidate_set
                .iter()
                .enumerate()
                .map(|(ci, c)| {
                    let predicted: f64 = pooled_grad
                        .iter()
                        .zip(c.iter().zip(&rows[pos]))
                        .map(|(g, (new, old))| g * (new - old) / n)
                        .sum();
                    (ci, predicted)
                })
                .collect();
            scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
            let keep: Vec<usize> = scored
                .iter()
                .take(options.top_k.max(1))
                .map(|(ci, _)| *ci)
                .collect();
            shortlist.push((pos, keep));
        }

        // Exact evaluation of a random batch of shortlisted substitutions.
        let mut best: Option<(f64, usize, usize)> = None;
        for _ in 0..options.batch.max(1) {
            let (pos, keep) = &shortlist[uniform_index(&mut rng, shortlist.len())];
            let candidate_index = keep[uniform_index(&mut rng, keep.len())];
            let candidate = &candidate_set[candidate_index];
            let trial_pooled: Vec<f64> = pooled
                .iter()
                .zip(candidate.iter().zip(&rows[*pos]))
                .map(|(mean, (new, old))| mean + (new - old) / n)
                .collect();
            let value = objective(field, &trial_pooled, &offsets);
            if best.map_or(true, |(b, _, _)| value < b) {
                best = Some((value, *pos, candidate_index));
            }
        }

        // Accept only improvements; the trace is therefore non-increasing.
        if let Some((value, pos, candidate_index)) = best {
            if value < current {
                rows[pos] = candidate_set[candidate_index].clone();
                let updated = EmbeddingMatrix::new(rows.clone())?;
                pooled = mean_pool(&updated).values;
                current = value;
            }
        }
        report.objective_trace.push(current);
        report.per_iteration.push(IterationRecord {
            iteration,
            query_id: query.id.clone(),
            f_value: 1.0 - field.probability(&pooled),
            grad_norm: None,
            decision: crate::detector::Decision::Pass,
            score: 0,
            jailbroken: false,
        });
    }

    let final_embedding = EmbeddingMatrix::new(rows)?;
    let norm_after = detector_norm(&final_embedding)?;
    report.norms_post = vec![norm_after];

    // Success means the evolved query both passes the calibrated detector
    // and lands where the field complies.
    let final_field = field.with_embedding(&query.id, final_embedding);
    if detector_config.threshold.is_some() {
        let verdict = crate::detector::detect(&final_field, query, detector_config)?;
        report.success =
            verdict.decision == crate::detector::Decision::Pass && field.probability(&pooled) <= 0.5;
        if let Some(last) = report.per_iteration.last_mut() {
            last.decision = verdict.decision;
            last.grad_norm = verdict.grad_norm;
        }
    }

    Ok(report.finalize())
}
