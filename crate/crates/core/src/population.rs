//! Reproducible benign/malicious query populations over a synthetic field.
//!
//! Benign queries are placed where the field is flat and near-zero; malicious
//! queries are placed on the steep flanks of the field's bumps, where the
//! loss landscape drops sharply. Placement is rejection sampling against
//! explicit probability and gradient-norm constraints, so the generated
//! populations reproduce the qualitative benign/malicious landscape contrast
//! by construction.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{l2_norm, mean_pool, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::field::{FieldSpec, SyntheticField};
use crate::query::{Query, QueryLabel};
use crate::rng::{substream, tags, uniform, NormalSource};

/// Placement constraints for the benign group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenignSpec {
    pub count: usize,
    /// Center of the benign cluster in pooled-embedding space.
    pub center: Vec<f64>,
    /// Standard deviation of placement around the center.
    pub spread: f64,
    /// Accept only points with refusal probability strictly below this.
    #[serde(default = "default_benign_max_p")]
    pub max_p: f64,
    /// Accept only points where the field gradient norm stays below this.
    #[serde(default = "default_benign_max_grad")]
    pub max_grad_norm: f64,
}

fn default_benign_max_p() -> f64 {
    0.1
}
fn default_benign_max_grad() -> f64 {
    0.5
}

/// Placement constraints for the malicious group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaliciousSpec {
    pub count: usize,
    /// Placement radius around bump centers, in units of each bump's tau.
    #[serde(default = "default_radius_taus")]
    pub radius_taus: (f64, f64),
    /// Accept only points whose refusal probability falls in this band;
    /// keeps most malicious queries past stage 1 so stage 2 has work to do.
    #[serde(default = "default_malicious_p_band")]
    pub p_band: (f64, f64),
    /// Accept only points with at least this loss-gradient norm.
    #[serde(default = "default_malicious_min_grad")]
    pub min_grad_norm: f64,
    /// Attack-family label grouping; malicious queries are split evenly
    /// across these names.
    #[serde(default = "default_attack_names")]
    pub attack_names: Vec<String>,
}

fn default_radius_taus() -> (f64, f64) {
    (0.6, 1.6)
}
fn default_malicious_p_band() -> (f64, f64) {
    (0.08, 0.45)
}
fn default_malicious_min_grad() -> f64 {
    3.0
}
fn default_attack_names() -> Vec<String> {
    vec!["bump-a".into(), "bump-b".into(), "bump-c".into()]
}

/// Full population description: field parameters plus both groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub field: FieldSpec,
    pub benign: BenignSpec,
    pub malicious: MaliciousSpec,
    /// Token-count range for generated embeddings.
    #[serde(default = "default_token_range")]
    pub token_range: (usize, usize),
    /// Row jitter around the pooled point (rows are recentred so the pooled
    /// mean is exact).
    #[serde(default = "default_token_jitter")]
    pub token_jitter: f64,
    /// Rejection-sampling attempts per query before giving up.
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
}

fn default_token_range() -> (usize, usize) {
    (4, 12)
}
fn default_token_jitter() -> f64 {
    0.05
}
fn default_max_attempts() -> usize {
    4000
}

impl PopulationSpec {
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

/// Builds an embedding matrix whose rows pool exactly to `point`.
fn embedding_at(
    point: &[f64],
    n_tokens: usize,
    jitter: f64,
    src: &mut NormalSource,
) -> EmbeddingMatrix {
    let d = point.len();
    let mut rows: Vec<Vec<f64>> = (0..n_tokens)
        .map(|_| (0..d).map(|_| src.next() * jitter).collect())
        .collect();
    // Recenter the jitter so the row mean is the requested point exactly
    // (up to rounding), then translate.
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n_tokens as f64;
        for row in &mut rows {
            row[j] = row[j] - mean + point[j];
        }
    }
    EmbeddingMatrix::new(rows).expect("generated embedding")
}

fn sample_benign_point(
    field: &SyntheticField,
    spec: &BenignSpec,
    src: &mut NormalSource,
) -> Option<(Vec<f64>, f64)> {
    let d = spec.center.len();
    let point: Vec<f64> = (0..d)
        .map(|j| spec.center[j] + src.next() * spec.spread)
        .collect();
    let p = field.probability(&point);
    if p >= spec.max_p {
        return None;
    }
    let grad = field.probability_gradient(&point).ok()?;
    if l2_norm(&grad) > spec.max_grad_norm {
        return None;
    }
    Some((point, p))
}

fn sample_malicious_point(
    field: &SyntheticField,
    spec: &MaliciousSpec,
    bump_index: usize,
    src: &mut NormalSource,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<(Vec<f64>, f64, f64)> {
    let bump_index = bump_index % field.bumps().len();
    let bump = &field.bumps()[bump_index];
    let d = bump.center.len();
    // Direction uniform on the sphere, radius uniform in the tau band.
    let dir: Vec<f64> = (0..d).map(|_| src.next()).collect();
    let norm = l2_norm(&dir);
    if norm == 0.0 {
        return None;
    }
    let (lo, hi) = spec.radius_taus;
    let radius = (lo + (hi - lo) * uniform(rng)) * bump.tau;
    let point: Vec<f64> = bump
        .center
        .iter()
        .zip(&dir)
        .map(|(c, x)| c + x / norm * radius)
        .collect();
    let p = field.probability(&point);
    if p < spec.p_band.0 || p > spec.p_band.1 {
        return None;
    }
    let grad = field.probability_gradient(&point).ok()?;
    let g = l2_norm(&grad);
    if g < spec.min_grad_norm {
        return None;
    }
    Some((point, p, g))
}

/// Generates a labeled population and the field holding its embeddings.
///
/// Reproducible from `(spec, seed)`. Fails with achieved-percentile context
/// when the constraints cannot be met within the attempt budget (for
/// example, a field with no bumps has no steep region to place malicious
/// queries in).
pub fn generate_population(
    spec: &PopulationSpec,
    seed: u64,
) -> Result<(Vec<Query>, SyntheticField)> {
    let field = SyntheticField::from_spec(spec.field.clone())?;
    if spec.benign.count == 0 || spec.malicious.count == 0 {
        return Err(Error::InvalidInput("population counts must be >= 1".into()));
    }
    if spec.benign.center.len() != field.dim() {
        return Err(Error::InvalidInput(format!(
            "benign center dimension {} does not match field dim {}",
            spec.benign.center.len(),
            field.dim()
        )));
    }
    if spec.malicious.attack_names.is_empty() {
        return Err(Error::InvalidInput("attack_names must be non-empty".into()));
    }

    let mut src = NormalSource::new(seed, "population", tags::POPULATION);
    let mut rng = substream(seed, "population-uniform", tags::POPULATION);
    let (tok_lo, tok_hi) = spec.token_range;
    if tok_lo == 0 || tok_hi < tok_lo {
        return Err(Error::InvalidInput("invalid token range".into()));
    }

    let mut queries = Vec::with_capacity(spec.benign.count + spec.malicious.count);
    let mut embeddings = BTreeMap::new();
    let mut achieved_p = Vec::new();

    for i in 0..spec.benign.count {
        let mut placed = false;
        for _ in 0..spec.max_attempts {
            if let Some((point, p)) = sample_benign_point(&field, &spec.benign, &mut src) {
                let n_tokens = tok_lo + (uniform(&mut rng) * (tok_hi - tok_lo + 1) as f64) as usize;
                let n_tokens = n_tokens.min(tok_hi);
                let emb = embedding_at(&point, n_tokens, spec.token_jitter, &mut src);
                let id = format!("benign-{i:04}");
                let query = Query::new(id.clone(), format!("benign request {i}"))
                    .with_label(QueryLabel::Benign);
                embeddings.insert(id, emb);
                queries.push(query);
                achieved_p.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place benign query {i} within {} attempts \
                 (max_p {}, max_grad_norm {})",
                spec.max_attempts, spec.benign.max_p, spec.benign.max_grad_norm
            )));
        }
    }

    if field.bumps().is_empty() {
        return Err(Error::Generation(
            "field has no bumps: no steep region exists for malicious placement".into(),
        ));
    }

    let attack_count = spec.malicious.attack_names.len();
    let mut achieved_grads = Vec::new();
    for i in 0..spec.malicious.count {
        let mut placed = false;
        for attempt in 0..spec.max_attempts {
            let bump_index = (i + attempt) % field.bumps().len();
            if let Some((point, p, g)) =
                sample_malicious_point(&field, &spec.malicious, bump_index, &mut src, &mut rng)
            {
                let n_tokens = tok_lo + (uniform(&mut rng) * (tok_hi - tok_lo + 1) as f64) as usize;
                let n_tokens = n_tokens.min(tok_hi);
                let emb = embedding_at(&point, n_tokens, spec.token_jitter, &mut src);
                let id = format!("malicious-{i:04}");
                // Label by the bump that placed the query, so attack groups
                // share a local landscape (and a detectability profile).
                let attack = spec.malicious.attack_names[bump_index % attack_count].clone();
                let query = Query::new(id.clone(), format!("malicious request {i}"))
                    .with_label(QueryLabel::Malicious(attack));
                embeddings.insert(id, emb);
                queries.push(query);
                achieved_p.push(p);
                achieved_grads.push(g);
                placed = true;
                break;
            }
        }
        if !placed {
            achieved_grads.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = achieved_grads
                .get(achieved_grads.len() / 2)
                .copied()
                .unwrap_or(0.0);
            return Err(Error::Generation(format!(
                "could not place malicious query {i} within {} attempts \
                 (p band {:?}, min_grad_norm {}; median achieved grad so far {median:.3})",
                spec.max_attempts, spec.malicious.p_band, spec.malicious.min_grad_norm
            )));
        }
    }

    let field = field.with_embeddings(embeddings);
    // Sanity: every pooled embedding reproduces its placement point closely
    // enough that the constraints still hold where checks are strict.
    debug_assert!(queries.iter().all(|q| field.embedding_of(&q.id).is_some()));
    Ok((queries, field))
}

/// Splits benign queries into validation/test by a seeded shuffle.
pub fn split_validation_test(
    benign: &[Query],
    val_fraction: f64,
    seed: u64,
) -> (Vec<Query>, Vec<Query>) {
    let mut indices: Vec<usize> = (0..benign.len()).collect();
    let mut rng = substream(seed, "val-test-split", tags::SPLIT);
    // Fisher-Yates with draws from the substream.
    for i in (1..indices.len()).rev() {
        let j = (uniform(&mut rng) * (i + 1) as f64) as usize;
        indices.swap(i, j.min(i));
    }
    let val_len = ((benign.len() as f64) * val_fraction).round() as usize;
    let val_len = val_len.min(benign.len());
    let val = indices[..val_len].iter().map(|&i| benign[i].clone()).collect();
    let test = indices[val_len..].iter().map(|&i| benign[i].clone()).collect();
    (val, test)
}

/// Pooled point of a generated query (placement check helper).
pub fn pooled_point(field: &SyntheticField, query: &Query) -> Result<Vec<f64>> {
    let emb = field
        .embedding_of(&query.id)
        .ok_or_else(|| Error::InvalidInput(format!("query `{}` has no embedding", query.id)))?;
    Ok(mean_pool(emb).values)
}
