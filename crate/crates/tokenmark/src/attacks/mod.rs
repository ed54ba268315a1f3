//! The adversary suite.
//!
//! White-box removal (fine-tuning, pruning, quantization), black-box model
//! extraction behind a query-only oracle, watermark overwriting, and the
//! adaptive permutation attacks (random search, Gumbel-Softmax gradient
//! search, removal under a surrogate permutation).
//!
//! Attacks never mutate the victim's bundle or model: they operate on clones
//! and report what happened. Every entry point is deterministic given its
//! config and seed.

pub mod adaptive;
pub mod extraction;
pub mod overwrite;
pub mod whitebox;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adaptive::{
    attack_adaptive_removal, attack_gradient_search, attack_random_search, AdaptiveKnowledge,
    GradientSearchConfig, GradientSearchReport, RandomSearchReport, RemovalConfig, RemovalReport,
};
pub use extraction::{attack_extract, oracle_similarity, ExtractReport, FeatureOracle, ModelOracle, QueryCounter};
pub use overwrite::{attack_overwrite_b, attack_overwrite_s};
pub use whitebox::{attack_finetune, attack_prune, attack_quantize, FinetuneOutcome, PruneGranularity};

#[derive(Error, Debug)]
pub enum AttackError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type AttackResult<T> = Result<T, AttackError>;

/// Strength parameters for one attack run; the harness serializes this next
/// to the seed so any report can be replayed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    Finetune { epochs: usize, batch: usize, lr: f32 },
    Prune { granularity: PruneGranularity, ratios: Vec<f32> },
    Quantize { bits: Vec<u32> },
    Extract { steps: usize, batch: usize, lr: f32 },
    Overwrite,
    RandomSearch { budget: usize, small_set: usize },
    GradientSearch { epochs: usize, alpha: f32 },
    AdaptiveRemoval { steps: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(flatten)]
    pub kind: AttackKind,
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), String> {
        match &self.kind {
            AttackKind::Prune { ratios, .. } => {
                if ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
                    return Err("prune ratios must lie in [0,1)".into());
                }
            }
            AttackKind::Quantize { bits } => {
                if bits.iter().any(|&k| !(1..=8).contains(&k)) {
                    return Err("quantization bits must lie in 1..=8".into());
                }
            }
            AttackKind::GradientSearch { alpha, .. } => {
                if *alpha < 0.0 {
                    return Err("alpha must be ≥ 0".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}
