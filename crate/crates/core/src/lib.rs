//! Two-step query gating on refusal-loss landscapes.
//!
//! The engine samples a model's refusal behaviour for a query (stage 1:
//! reject when the sampled refusal loss drops below one half), then estimates
//! the loss gradient's norm with zeroth-order finite differences along
//! Gaussian directions (stage 2: reject when the norm exceeds a threshold
//! calibrated on benign traffic under a false-positive budget). Backends are
//! pluggable; analytic synthetic fields with closed-form gradients provide
//! the verification oracles, and an adaptive-attack harness, landscape
//! exporter, and benchmark runner sit on top.

pub mod attacks;
pub mod backend;
pub mod config;
pub mod detector;
pub mod directions;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod field;
pub mod gradient;
pub mod keywords;
pub mod landscape;
pub mod population;
pub mod query;
pub mod refusal;
pub mod rng;
pub mod scripted;

pub use backend::{Capabilities, ModelBackend, SampleRequest};
pub use config::{DetectorConfig, DEFAULT_REFUSAL_MESSAGE, DEFAULT_SEEDS};
pub use detector::{calibrate, detect, detect_batch, CalibrationResult, Decision, Verdict};
pub use directions::{sample_directions, DirectionSet};
pub use embedding::{broadcast_add, mean_pool, EmbeddingMatrix, SentenceEmbedding};
pub use error::{BackendError, Error, Result};
pub use field::{FieldSpec, LinearField, SyntheticField};
pub use gradient::{estimate_gradient, estimate_gradient_with_directions, GradientEstimate};
pub use keywords::{jb_indicator, KeywordSet, DEFAULT_KEYWORDS};
pub use landscape::{export_grid, import_grid, landscape_grid, LandscapeGrid};
pub use population::{generate_population, split_validation_test, PopulationSpec};
pub use query::{load_queries, save_queries, Query, QueryLabel};
pub use refusal::{refusal_loss, sample_refusals, RefusalLoss, RefusalSample};
pub use scripted::{ScriptedSpec, ScriptedText};
