//! Statistical error probe for the zeroth-order estimator.
//!
//! Compares the estimate against the field's closed-form loss gradient at
//! probe points, per (N, P) grid cell, over a seed set. The paper-literal
//! estimator is a sum over directions, so its target is `P * grad`; the
//! normalized mode divides by P and targets the gradient itself. Scaling
//! trends (error falling in P, tail error falling in N) are what the probe
//! certifies; absolute constants are not.

use serde::{Deserialize, Serialize};

use crate::config::DetectorConfig;
use crate::embedding::l2_norm;
use crate::error::{Error, Result};
use crate::field::SyntheticField;
use crate::gradient::estimate_gradient;
use crate::query::Query;

use crate::attacks::nearest_rank_percentile;

/// Which estimator the probe measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Raw direction sum; compared against `P * grad`.
    PaperLiteral,
    /// Sum divided by P; compared against `grad`.
    Normalized,
}

/// One (N, P) cell's error statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub n_samples: usize,
    pub n_directions: usize,
    pub median_error: f64,
    pub p90_error: f64,
}

/// Descriptive diagnostics attached to a probe report. These label the
/// quantities appearing in the estimator's concentration analysis; they are
/// outputs of the measurement, never runtime inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDiagnostics {
    /// Worst-case sampling error scale of f at the smallest N in the grid:
    /// max over probes of sqrt(p(1-p)/N_min).
    pub eps_f: f64,
    /// Tail mass the p90 statistic corresponds to.
    pub delta_g: f64,
    /// p90 error radius at the largest (N, P) cell.
    pub r: f64,
    /// Numerical Lipschitz estimate of the loss gradient near the probes.
    pub l: f64,
    /// Median error at the largest (N, P) cell.
    pub eps: f64,
    /// Fraction of draws at the largest cell exceeding twice its median.
    pub delta: f64,
}

/// Full probe report over the (N, P) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorProbeReport {
    pub mode: ProbeMode,
    pub mu: f64,
    pub cells: Vec<ProbeCell>,
    pub diagnostics: ProbeDiagnostics,
}

impl ErrorProbeReport {
    pub fn cell(&self, n: usize, p: usize) -> Option<&ProbeCell> {
        self.cells
            .iter()
            .find(|c| c.n_samples == n && c.n_directions == p)
    }
}

/// Runs the probe. `probe_queries` must be registered in the field at
/// unclamped points; a field without an analytic gradient there is rejected.
pub fn error_probe(
    field: &SyntheticField,
    probe_queries: &[Query],
    grid: &[(usize, usize)],
    seeds: &[u64],
    mu: f64,
    mode: ProbeMode,
) -> Result<ErrorProbeReport> {
    if probe_queries.is_empty() {
        return Err(Error::InvalidInput("no probe queries".into()));
    }
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidInput("empty probe grid or seed set".into()));
    }

    // Closed-form targets; errors out on clamped probe points.
    let mut targets = Vec::with_capacity(probe_queries.len());
    let mut pooled_points = Vec::with_capacity(probe_queries.len());
    for q in probe_queries {
        let point = field
            .pooled_for(q)
            .map_err(|e| Error::backend(&q.id, e))?;
        let grad = field.loss_gradient(&point)?;
        targets.push(grad);
        pooled_points.push(point);
    }

    let mut cells = Vec::with_capacity(grid.len());
    let mut largest_cell_errors: Vec<f64> = Vec::new();
    let (mut max_n, mut max_p) = (0, 0);
    for &(n, p) in grid {
        if n * p >= max_n * max_p {
            max_n = n;
            max_p = p;
        }
    }

    for &(n, p) in grid {
        let mut errors = Vec::with_capacity(seeds.len() * probe_queries.len());
        for &seed in seeds {
            let config = DetectorConfig {
                n_samples: n,
                n_directions: p,
                mu,
                seed,
                normalize_by_p: matches!(mode, ProbeMode::Normalized),
                ..DetectorConfig::default()
            };
            for (q, target) in probe_queries.iter().zip(&targets) {
                let est = estimate_gradient(field, q, &config, None)?;
                let scale = match mode {
                    ProbeMode::PaperLiteral => p as f64,
                    ProbeMode::Normalized => 1.0,
                };
                let err: f64 = est
                    .vector
                    .iter()
                    .zip(target)
                    .map(|(g, t)| {
                        let diff = g - scale * t;
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt();
                errors.push(err);
            }
        }
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = nearest_rank_percentile(&errors, 50.0);
        let p90 = nearest_rank_percentile(&errors, 90.0);
        if (n, p) == (max_n, max_p) {
            largest_cell_errors = errors.clone();
        }
        cells.push(ProbeCell {
            n_samples: n,
            n_directions: p,
            median_error: median,
            p90_error: p90,
        });
    }

    // Diagnostics.
    let min_n = grid.iter().map(|&(n, _)| n).min().unwrap_or(1);
    let eps_f = pooled_points
        .iter()
        .map(|point| {
            let p = field.probability(point);
            (p * (1.0 - p) / min_n as f64).sqrt()
        })
        .fold(0.0, f64::max);
    let l = lipschitz_estimate(field, &pooled_points)?;
    let (eps, r, delta) = if largest_cell_errors.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let med = nearest_rank_percentile(&largest_cell_errors, 50.0);
        let p90 = nearest_rank_percentile(&largest_cell_errors, 90.0);
        let over = largest_cell_errors
            .iter()
            .filter(|&&e| e > 2.0 * med)
            .count();
        (med, p90, over as f64 / largest_cell_errors.len() as f64)
    };

    Ok(ErrorProbeReport {
        mode,
        mu,
        cells,
        diagnostics: ProbeDiagnostics {
            eps_f,
            delta_g: 0.10,
            r,
            l,
            eps,
            delta,
        },
    })
}

/// Max finite-difference change rate of the loss gradient near the probes.
fn lipschitz_estimate(field: &SyntheticField, points: &[Vec<f64>]) -> Result<f64> {
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for point in points {
        let g0 = field.loss_gradient(point)?;
        for j in 0..point.len() {
            let mut shifted = point.clone();
            shifted[j] += h;
            let Ok(g1) = field.loss_gradient(&shifted) else {
                continue;
            };
            let diff: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
            worst = worst.max(l2_norm(&diff) / h);
        }
    }
    Ok(worst)
}

/// A smooth logistic probe fixture: no bumps, moderate slope, probe queries
/// placed where the refusal probability spans the informative range.
pub fn default_probe_fixture(dim: usize) -> (SyntheticField, Vec<Query>) {
    let mut weight = vec![0.0; dim];
    weight[0] = 1.0;
    let mut field = SyntheticField::new(dim, weight, 0.0, 2.0, vec![]).expect("probe field");
    let mut queries = Vec::new();
    for (i, x) in [-0.4, 0.0, 0.4].iter().enumerate() {
        let mut point = vec![0.0; dim];
        point[0] = *x;
        queries.push(field.register_point(format!("probe-{i}"), &point));
    }
    (field, queries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_probes_to_zero_error() {
        let mut field =
            SyntheticField::new(3, vec![0.0; 3], -40.0, 1.0, vec![]).unwrap();
        let q = field.register_point("probe", &[0.1, 0.2, 0.3]);
        let report = error_probe(
            &field,
            &[q],
            &[(4, 4), (8, 8)],
            &[1, 2, 3],
            0.02,
            ProbeMode::Normalized,
        )
        .unwrap();
        for cell in &report.cells {
            assert_eq!(cell.median_error, 0.0);
            assert_eq!(cell.p90_error, 0.0);
        }
    }

    #[test]
    fn clamped_probe_point_is_unsupported() {
        let mut field = SyntheticField::new(
            2,
            vec![0.0, 0.0],
            5.0,
            2.0,
            vec![crate::field::Bump {
                amplitude: 0.9,
                center: vec![0.0, 0.0],
                tau: 1.0,
            }],
        )
        .unwrap();
        let q = field.register_point("probe", &[0.0, 0.0]);
        let err = error_probe(
            &field,
            &[q],
            &[(4, 4)],
            &[1],
            0.02,
            ProbeMode::Normalized,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnsupportedBackend(_)), "{err}");
    }

    #[test]
    fn median_error_falls_with_more_directions() {
        let (field, queries) = default_probe_fixture(6);
        let seeds: Vec<u64> = (0..48).collect();
        let report = error_probe(
            &field,
            &queries,
            &[(16, 4), (16, 16), (16, 64)],
            &seeds,
            0.02,
            ProbeMode::Normalized,
        )
        .unwrap();
        let e4 = report.cell(16, 4).unwrap().median_error;
        let e16 = report.cell(16, 16).unwrap().median_error;
        let e64 = report.cell(16, 64).unwrap().median_error;
        assert!(e4 > e16 && e16 > e64, "{e4} {e16} {e64}");
    }
}
