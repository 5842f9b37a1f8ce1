//! 2-D refusal-loss landscape grids.
//!
//! A grid evaluates the mean sampled refusal loss of a query set under
//! pooled-embedding offsets `alpha*u + beta*v`, where `u` and `v` are seeded
//! standard-normal directions. Axes are anchored to integer multiples of the
//! step so coordinate zero is exact, and each cell samples on a substream
//! keyed symmetrically by `(direction seed, coordinate)` pairs: swapping the
//! two direction seeds transposes the grid bit-for-bit.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::ModelBackend;
use crate::config::DetectorConfig;
use crate::directions::sample_directions;
use crate::error::{Error, Result};
use crate::query::Query;
use crate::refusal::{refusal_loss, sample_refusals};
use crate::rng::{derive_seed, substream_seed};

/// A computed landscape grid with its sampling provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alpha_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    /// `values[i][j]` is the mean refusal loss at `(alpha_i, beta_j)`.
    pub values: Vec<Vec<f64>>,
    pub u_seed: u64,
    pub v_seed: u64,
    /// Samples per grid point per query.
    pub n_samples: usize,
    pub query_set_id: String,
}

/// Inclusive axis anchored to integer multiples of `step` covering
/// `[lo, hi]`; guarantees an exact 0.0 whenever the range straddles zero.
fn axis(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidInput(format!("step must be positive, got {step}")));
    }
    if hi <= lo {
        return Err(Error::InvalidInput(format!("range [{lo}, {hi}] is empty")));
    }
    let k0 = (lo / step).round() as i64;
    let k1 = (hi / step).round() as i64;
    Ok((k0..=k1).map(|k| k as f64 * step).collect())
}

/// Per-cell stream tag, symmetric in the two (seed, coordinate) pairs so
/// exchanging the direction seeds transposes the grid exactly.
pub fn cell_stream_tag(u_seed: u64, alpha: f64, v_seed: u64, beta: f64) -> u64 {
    let token = |seed: u64, coord: f64| -> u64 {
        let bytes = substream_seed(seed, "landscape-cell", coord.to_bits());
        u64::from_le_bytes(bytes[..8].try_into().expect("token prefix"))
    };
    token(u_seed, alpha) ^ token(v_seed, beta)
}

/// Direction seeds for a landscape run, derived from the config seed.
pub fn landscape_direction_seeds(config: &DetectorConfig) -> (u64, u64) {
    (
        derive_seed(config.seed, "landscape-u", 0),
        derive_seed(config.seed, "landscape-v", 0),
    )
}

/// Computes the landscape grid for a query set.
pub fn landscape_grid(
    backend: &dyn ModelBackend,
    queries: &[Query],
    range: (f64, f64),
    step: f64,
    config: &DetectorConfig,
) -> Result<LandscapeGrid> {
    config.validate()?;
    if queries.is_empty() {
        return Err(Error::InvalidInput("query set is empty".into()));
    }
    let alpha_values = axis(range.0, range.1, step)?;
    let beta_values = alpha_values.clone();
    let (u_seed, v_seed) = landscape_direction_seeds(config);
    landscape_grid_with_seeds(
        backend,
        queries,
        alpha_values,
        beta_values,
        u_seed,
        v_seed,
        config,
    )
}

/// Grid computation with explicit axes and direction seeds (used by the
/// transpose-symmetry tests and the exporter round trips).
pub fn landscape_grid_with_seeds(
    backend: &dyn ModelBackend,
    queries: &[Query],
    alpha_values: Vec<f64>,
    beta_values: Vec<f64>,
    u_seed: u64,
    v_seed: u64,
    config: &DetectorConfig,
) -> Result<LandscapeGrid> {
    let d = backend.embed_dim();
    let u = sample_directions(1, d, u_seed).directions()[0].clone();
    let v = sample_directions(1, d, v_seed).directions()[0].clone();

    let cells: Vec<(usize, usize)> = (0..alpha_values.len())
        .flat_map(|i| (0..beta_values.len()).map(move |j| (i, j)))
        .collect();

    let computed: Vec<((usize, usize), f64)> = cells
        .par_iter()
        .map(|&(i, j)| {
            let alpha = alpha_values[i];
            let beta = beta_values[j];
            let offset: Vec<f64> = u
                .iter()
                .zip(&v)
                .map(|(ux, vx)| alpha * ux + beta * vx)
                .collect();
            let tag = cell_stream_tag(u_seed, alpha, v_seed, beta);
            let mut sum = 0.0;
            for q in queries {
                let sample = sample_refusals(backend, q, Some(&offset), config, tag)
                    .map_err(|e| {
                        Error::InvalidInput(format!(
                            "landscape cell (alpha={alpha}, beta={beta}), query `{}`: {e}",
                            q.id
                        ))
                    })?;
                sum += refusal_loss(&sample)?.value;
            }
            Ok(((i, j), sum / queries.len() as f64))
        })
        .collect::<Result<_>>()?;

    let mut values = vec![vec![0.0; beta_values.len()]; alpha_values.len()];
    for ((i, j), value) in computed {
        values[i][j] = value;
    }

    let query_set_id = format!(
        "{}:{}",
        queries.len(),
        queries
            .first()
            .map(|q| q.id.as_str())
            .unwrap_or_default()
    );
    Ok(LandscapeGrid {
        alpha_values,
        beta_values,
        values,
        u_seed,
        v_seed,
        n_samples: config.n_samples,
        query_set_id,
    })
}

/// Formats with 9 significant digits, scientific notation; the exporter's
/// canonical representation.
fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Writes the grid as CSV with header `alpha,beta,value`, alpha-major row
/// order, 9 significant digits. Byte-deterministic for a given grid.
pub fn export_grid(grid: &LandscapeGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(grid.values.len() * grid.beta_values.len() * 32 + 18);
    out.push_str("alpha,beta,value\n");
    for (i, alpha) in grid.alpha_values.iter().enumerate() {
        for (j, beta) in grid.beta_values.iter().enumerate() {
            out.push_str(&fmt_sig9(*alpha));
            out.push(',');
            out.push_str(&fmt_sig9(*beta));
            out.push(',');
            out.push_str(&fmt_sig9(grid.values[i][j]));
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a CSV produced by [`export_grid`] back into axes and values.
pub fn import_grid(path: impl AsRef<Path>) -> Result<LandscapeGrid> {
    let path = path.as_ref();
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = content.lines();
    let header = lines.next().unwrap_or_default();
    if header != "alpha,beta,value" {
        return Err(Error::InvalidInput(format!(
            "unexpected landscape CSV header `{header}`"
        )));
    }
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut triples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.ok_or_else(|| Error::InvalidInput(format!("line {}: short row", lineno + 2)))?
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("line {}: {e}", lineno + 2)))
        };
        let alpha = parse(parts.next())?;
        let beta = parse(parts.next())?;
        let value = parse(parts.next())?;
        if alphas.last() != Some(&alpha) && !alphas.contains(&alpha) {
            alphas.push(alpha);
        }
        if !betas.contains(&beta) {
            betas.push(beta);
        }
        triples.push((alpha, beta, value));
    }
    let mut values = vec![vec![0.0; betas.len()]; alphas.len()];
    for (alpha, beta, value) in triples {
        let i = alphas.iter().position(|&a| a == alpha).unwrap();
        let j = betas.iter().position(|&b| b == beta).unwrap();
        values[i][j] = value;
    }
    Ok(LandscapeGrid {
        alpha_values: alphas,
        beta_values: betas,
        values,
        u_seed: 0,
        v_seed: 0,
        n_samples: 0,
        query_set_id: String::new(),
    })
}

impl LandscapeGrid {
    /// Max minus min over all cells.
    pub fn value_range(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in &self.values {
            for &x in row {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        hi - lo
    }

    /// Value at exact coordinates, if the axes contain them.
    pub fn value_at(&self, alpha: f64, beta: f64) -> Option<f64> {
        let i = self.alpha_values.iter().position(|&a| a == alpha)?;
        let j = self.beta_values.iter().position(|&b| b == beta)?;
        Some(self.values[i][j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::SyntheticField;
    use crate::rng::tags;

    fn flat_field(p: f64, dim: usize) -> SyntheticField {
        let bias = (p / (1.0 - p)).ln();
        SyntheticField::new(dim, vec![0.0; dim], bias, 1.0, vec![]).unwrap()
    }

    #[test]
    fn default_axis_is_41_points_with_exact_zero() {
        let a = axis(-0.02, 0.02, 0.001).unwrap();
        assert_eq!(a.len(), 41);
        assert_eq!(a[0], -0.02);
        assert_eq!(a[40], 0.02);
        assert_eq!(a[20], 0.0);
    }

    #[test]
    fn center_cell_equals_plain_mean_loss() {
        let mut field = flat_field(0.3, 3);
        let queries: Vec<Query> = (0..5)
            .map(|i| field.register_point(format!("q{i}"), &[0.1 * i as f64, 0.0, 0.0]))
            .collect();
        let config = DetectorConfig::default();
        let grid = landscape_grid(&field, &queries, (-0.002, 0.002), 0.001, &config).unwrap();
        let center = grid.value_at(0.0, 0.0).unwrap();

        let tag = cell_stream_tag(grid.u_seed, 0.0, grid.v_seed, 0.0);
        let mut sum = 0.0;
        for q in &queries {
            let s = sample_refusals(&field, q, None, &config, tag).unwrap();
            sum += refusal_loss(&s).unwrap().value;
        }
        assert_eq!(center, sum / queries.len() as f64);
        let _ = tags::STAGE1;
    }

    #[test]
    fn constant_field_cells_near_complement() {
        let p = 0.25;
        let mut field = flat_field(p, 4);
        let queries: Vec<Query> = (0..10)
            .map(|i| field.register_point(format!("q{i}"), &[0.0, 0.0, 0.0, 0.01 * i as f64]))
            .collect();
        let config = DetectorConfig::default();
        let grid = landscape_grid(&field, &queries, (-0.004, 0.004), 0.002, &config).unwrap();
        let tol = 3.0 * (p * (1.0 - p) / (config.n_samples as f64 * queries.len() as f64)).sqrt();
        for row in &grid.values {
            for &cell in row {
                assert!(
                    (cell - (1.0 - p)).abs() <= tol,
                    "cell {cell} vs {} (tol {tol})",
                    1.0 - p
                );
            }
        }
    }

    #[test]
    fn swapping_direction_seeds_transposes() {
        let mut field = SyntheticField::new(
            3,
            vec![1.0, -0.6, 0.2],
            -0.4,
            2.0,
            vec![],
        )
        .unwrap();
        let queries: Vec<Query> = (0..3)
            .map(|i| field.register_point(format!("q{i}"), &[0.2 * i as f64, 0.1, -0.1]))
            .collect();
        let config = DetectorConfig::default();
        let alphas = axis(-0.01, 0.01, 0.005).unwrap();
        let betas = axis(-0.02, 0.01, 0.005).unwrap();
        let grid = landscape_grid_with_seeds(
            &field, &queries, alphas.clone(), betas.clone(), 11, 22, &config,
        )
        .unwrap();
        let swapped = landscape_grid_with_seeds(
            &field, &queries, betas, alphas, 22, 11, &config,
        )
        .unwrap();
        for i in 0..grid.alpha_values.len() {
            for j in 0..grid.beta_values.len() {
                assert_eq!(grid.values[i][j], swapped.values[j][i], "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn export_shape_and_determinism() {
        let mut field = flat_field(0.5, 2);
        let q = field.register_point("q", &[0.0, 0.0]);
        let config = DetectorConfig::default();
        let grid = landscape_grid(&field, &[q], (-0.02, 0.02), 0.001, &config).unwrap();
        assert_eq!(grid.alpha_values.len(), 41);
        assert_eq!(grid.beta_values.len(), 41);

        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.csv");
        let path_b = dir.path().join("b.csv");
        export_grid(&grid, &path_a).unwrap();
        export_grid(&grid, &path_b).unwrap();
        let a = std::fs::read(&path_a).unwrap();
        let b = std::fs::read(&path_b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 1 + 41 * 41);
        assert!(text.starts_with("alpha,beta,value\n"));

        // Round trip: import then re-export is byte-identical, and values
        // match the canonical 9-digit representation exactly.
        let imported = import_grid(&path_a).unwrap();
        let path_c = dir.path().join("c.csv");
        export_grid(&imported, &path_c).unwrap();
        assert_eq!(std::fs::read(&path_b).unwrap(), std::fs::read(&path_c).unwrap());
    }
}
