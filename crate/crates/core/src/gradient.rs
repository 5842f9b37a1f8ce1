//! Zeroth-order gradient estimation of the refusal loss.
//!
//! The estimate is a sum of P directional finite differences along Gaussian
//! directions:
//!
//! ```text
//! g = sum_i [ (f(e + mu*u_i) - f(e)) / mu ] * u_i
//! ```
//!
//! Each `f` is a fresh N-sample refusal loss on its own substream. The sum is
//! paper-style unnormalized by default; `normalize_by_p` divides by P for
//! error probes and sensitivity studies. Accumulation runs in direction-index
//! order so results do not depend on scheduling.

use serde::{Deserialize, Serialize};

use crate::backend::ModelBackend;
use crate::config::DetectorConfig;
use crate::directions::{sample_directions, DirectionSet};
use crate::embedding::l2_norm;
use crate::error::{Error, Result};
use crate::query::Query;
use crate::refusal::{refusal_loss, sample_refusals, RefusalLoss};
use crate::rng::{derive_seed, tags};

/// A zeroth-order gradient estimate with exact query accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub vector: Vec<f64>,
    pub norm: f64,
    pub f_base: RefusalLoss,
    /// Backend queries consumed: `N*P`, plus N when the base term was
    /// computed here rather than supplied.
    pub queries_used: u64,
    /// Seed the direction set was drawn from.
    pub direction_seed: u64,
    pub n_directions: usize,
    pub dim: usize,
}

/// Evaluates one refusal loss, through the exact hook on deterministic
/// backends and through N-sample Monte Carlo otherwise.
fn eval_loss(
    backend: &dyn ModelBackend,
    query: &Query,
    perturbation: Option<&[f64]>,
    config: &DetectorConfig,
    stream_tag: u64,
) -> Result<RefusalLoss> {
    if backend.capabilities().deterministic_field {
        let value = backend
            .exact_loss(query, perturbation)
            .map_err(|e| Error::backend(&query.id, e))?;
        return Ok(RefusalLoss::exact(value, config.n_samples));
    }
    let sample = sample_refusals(backend, query, perturbation, config, stream_tag)?;
    refusal_loss(&sample)
}

/// Computes the unperturbed base loss on the stage-1 substream, so a reused
/// stage-1 result is bit-identical to a recomputed one.
pub fn base_loss(
    backend: &dyn ModelBackend,
    query: &Query,
    config: &DetectorConfig,
) -> Result<RefusalLoss> {
    eval_loss(backend, query, None, config, tags::STAGE1)
}

/// Direction seed for a query: fresh per query, derived from the config seed
/// and the query id.
pub fn direction_seed_for(config: &DetectorConfig, query: &Query) -> u64 {
    derive_seed(config.seed, &query.id, tags::DIRECTIONS)
}

/// Estimates the gradient with a caller-supplied direction set.
///
/// Exposed for pinned-direction tests and error probes; detection uses
/// [`estimate_gradient`], which draws per-query directions.
pub fn estimate_gradient_with_directions(
    backend: &dyn ModelBackend,
    query: &Query,
    config: &DetectorConfig,
    f_base: Option<RefusalLoss>,
    directions: &DirectionSet,
) -> Result<GradientEstimate> {
    config.validate()?;
    let d = backend.embed_dim();
    if directions.dim() != d {
        return Err(Error::InvalidInput(format!(
            "direction dimension {} does not match backend dimension {d}",
            directions.dim()
        )));
    }

    let base_supplied = f_base.is_some();
    let f_base = match f_base {
        Some(f) => f,
        None => base_loss(backend, query, config)?,
    };
    if !f_base.value.is_finite() {
        return Err(Error::NonFinite { direction: 0 });
    }

    let p = directions.len();
    let mut vector = vec![0.0; d];
    for (i, u) in directions.directions().iter().enumerate() {
        let perturbation: Vec<f64> = u.iter().map(|x| x * config.mu).collect();
        let f_i = eval_loss(
            backend,
            query,
            Some(&perturbation),
            config,
            tags::direction(i),
        )?;
        let coeff = (f_i.value - f_base.value) / config.mu;
        if !coeff.is_finite() {
            return Err(Error::NonFinite { direction: i });
        }
        for (acc, x) in vector.iter_mut().zip(u) {
            *acc += coeff * x;
        }
    }
    if config.normalize_by_p {
        for x in &mut vector {
            *x /= p as f64;
        }
    }
    if vector.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { direction: p });
    }

    let n = config.n_samples as u64;
    let queries_used = n * p as u64 + if base_supplied { 0 } else { n };
    Ok(GradientEstimate {
        norm: l2_norm(&vector),
        vector,
        f_base,
        queries_used,
        direction_seed: directions.seed,
        n_directions: p,
        dim: d,
    })
}

/// Estimates the refusal-loss gradient for a query.
///
/// Directions are drawn fresh per query (seeded by the query id); the base
/// term is reused when supplied, matching the `q = N*(P+1)` budget.
pub fn estimate_gradient(
    backend: &dyn ModelBackend,
    query: &Query,
    config: &DetectorConfig,
    f_base: Option<RefusalLoss>,
) -> Result<GradientEstimate> {
    let seed = direction_seed_for(config, query);
    let directions = sample_directions(config.n_directions, backend.embed_dim(), seed);
    estimate_gradient_with_directions(backend, query, config, f_base, &directions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::LinearField;

    fn linear_config(p: usize) -> DetectorConfig {
        DetectorConfig {
            n_samples: 4,
            n_directions: p,
            mu: 0.05,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn constant_field_gives_zero_vector() {
        // Zero coefficients make the loss constant; every difference vanishes.
        let mut field = LinearField::new(vec![0.0, 0.0], 0.7);
        let query = field.register_point("q", &[0.3, -0.2]);
        for p in [1, 3, 8] {
            let est = estimate_gradient(&field, &query, &linear_config(p), None).unwrap();
            assert_eq!(est.norm, 0.0);
            assert!(est.vector.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn linear_field_single_pinned_direction() {
        // f(e) = a . e with a = (1, 0); u = (0.5, -0.3).
        // The directional difference is exactly a.u for any mu, so
        // g = (a.u) u = (0.25, -0.15), norm = 0.05 * sqrt(34).
        let mut field = LinearField::new(vec![1.0, 0.0], 0.0);
        let query = field.register_point("q", &[0.0, 0.0]);
        let dirs = DirectionSet::from_vectors(vec![vec![0.5, -0.3]], 7);
        for mu in [0.001, 0.02, 0.5] {
            let mut config = linear_config(1);
            config.mu = mu;
            let est =
                estimate_gradient_with_directions(&field, &query, &config, None, &dirs).unwrap();
            assert!((est.vector[0] - 0.25).abs() < 1e-9, "{:?}", est.vector);
            assert!((est.vector[1] + 0.15).abs() < 1e-9);
            assert!((est.norm - 0.2915475947).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_field_matches_closed_form_sum() {
        // On a linear field the estimator equals sum_i (a.u_i) u_i exactly.
        let a = vec![0.4, -1.1, 2.0];
        let mut field = LinearField::new(a.clone(), 0.2);
        let query = field.register_point("q", &[0.1, 0.2, 0.3]);
        let config = linear_config(5);
        let dirs = sample_directions(5, 3, direction_seed_for(&config, &query));
        let est = estimate_gradient(&field, &query, &config, None).unwrap();

        let mut expected = vec![0.0; 3];
        for u in dirs.directions() {
            let dot: f64 = a.iter().zip(u).map(|(x, y)| x * y).sum();
            for (acc, x) in expected.iter_mut().zip(u) {
                *acc += dot * x;
            }
        }
        for (got, want) in est.vector.iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn normalized_mean_recovers_coefficients() {
        // E[(a.u) u] = a; with normalize_by_p the estimate averages over
        // directions, so many directions over many seeds concentrate on a.
        let a = vec![1.0, -0.5, 0.25];
        let mut field = LinearField::new(a.clone(), 0.0);
        let query = field.register_point("q", &[0.0; 3]);
        let mut sum = vec![0.0; 3];
        let n_seeds = 64;
        for seed in 0..n_seeds {
            let mut config = linear_config(256);
            config.normalize_by_p = true;
            config.seed = seed;
            let est = estimate_gradient(&field, &query, &config, None).unwrap();
            for (acc, x) in sum.iter_mut().zip(&est.vector) {
                *acc += x;
            }
        }
        for (acc, want) in sum.iter().zip(&a) {
            let mean = acc / n_seeds as f64;
            assert!(
                (mean - want).abs() <= 0.1 * want.abs(),
                "mean {mean} vs {want}"
            );
        }
    }

    #[test]
    fn duplicated_directions_double_the_estimate() {
        let a = vec![0.8, 0.3];
        let mut field = LinearField::new(a, -0.1);
        let query = field.register_point("q", &[0.05, -0.4]);
        let config = linear_config(3);
        let dirs = sample_directions(3, 2, 11);
        let single =
            estimate_gradient_with_directions(&field, &query, &config, None, &dirs).unwrap();

        let mut doubled_vecs = dirs.directions().to_vec();
        doubled_vecs.extend(dirs.directions().iter().cloned());
        let doubled_dirs = DirectionSet::from_vectors(doubled_vecs, 11);
        let mut config6 = linear_config(6);
        config6.mu = config.mu;
        let doubled =
            estimate_gradient_with_directions(&field, &query, &config6, None, &doubled_dirs)
                .unwrap();
        for (two, one) in doubled.vector.iter().zip(&single.vector) {
            assert!((two - 2.0 * one).abs() <= 1e-12 * one.abs().max(1.0));
        }

        // normalize_by_p is the paper-literal sum divided by P.
        let mut config_norm = linear_config(3);
        config_norm.normalize_by_p = true;
        let normed =
            estimate_gradient_with_directions(&field, &query, &config_norm, None, &dirs).unwrap();
        for (n, s) in normed.vector.iter().zip(&single.vector) {
            assert!((n - s / 3.0).abs() <= 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn query_accounting_is_exact() {
        let mut field = LinearField::new(vec![0.5, 0.5], 0.3);
        let query = field.register_point("q", &[0.0, 0.0]);
        let config = linear_config(7);
        let est = estimate_gradient(&field, &query, &config, None).unwrap();
        assert_eq!(est.queries_used, 4 * 7 + 4);

        let base = base_loss(&field, &query, &config).unwrap();
        let est = estimate_gradient(&field, &query, &config, Some(base)).unwrap();
        assert_eq!(est.queries_used, 4 * 7);
    }

    #[test]
    fn deterministic_and_dimension_checked() {
        let mut field = LinearField::new(vec![1.0, 2.0], 0.0);
        let query = field.register_point("q", &[0.1, 0.1]);
        let config = linear_config(4);
        let a = estimate_gradient(&field, &query, &config, None).unwrap();
        let b = estimate_gradient(&field, &query, &config, None).unwrap();
        assert_eq!(a, b);

        let bad = DirectionSet::from_vectors(vec![vec![1.0, 0.0, 0.0]], 3);
        assert!(estimate_gradient_with_directions(&field, &query, &config, None, &bad).is_err());
    }
}
