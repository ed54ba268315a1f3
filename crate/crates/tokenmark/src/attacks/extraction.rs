//! Black-box model extraction (distillation of the feature map).
//!
//! The attacker sees only an input → feature oracle — the trait carries no
//! weight access, so the substitute can only be trained from query replies.
//! Training aligns the substitute's first-token features with the oracle's
//! by maximizing cosine similarity (loss −sim), the EaaS extraction recipe.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::AttackResult;
use crate::tensor::optim::Optimizer;
use crate::tensor::{Graph, Tensor};
use crate::train::mean_of;
use crate::transformer::{
    forward_backbone, BoundModel, ModelConfig, Trainability, TransformerWeights,
};

/// Query-only access to a victim model: tokens in, output features out.
/// This is the entire attacker-visible surface.
pub trait FeatureOracle {
    /// Backbone output features for one input, one row per token.
    fn features(&self, tokens: &[u16]) -> Tensor;
    fn dim(&self) -> usize;
}

/// The victim's side of the oracle.
pub struct ModelOracle<'a> {
    weights: &'a TransformerWeights,
}

impl<'a> ModelOracle<'a> {
    pub fn new(weights: &'a TransformerWeights) -> Self {
        ModelOracle { weights }
    }
}

impl FeatureOracle for ModelOracle<'_> {
    fn features(&self, tokens: &[u16]) -> Tensor {
        let g = Graph::inference();
        let bound = BoundModel::bind(&g, self.weights, Trainability::Frozen);
        let z = bound.embed(&g, tokens).expect("oracle forward on valid tokens");
        let y = forward_backbone(&g, &bound, z).expect("oracle forward on valid tokens");
        g.to_tensor(y)
    }

    fn dim(&self) -> usize {
        self.weights.config().d
    }
}

/// Wrapper that counts queries; tests use it to show the attack runs purely
/// through the oracle interface.
pub struct QueryCounter<O: FeatureOracle> {
    inner: O,
    count: Cell<usize>,
}

impl<O: FeatureOracle> QueryCounter<O> {
    pub fn new(inner: O) -> Self {
        QueryCounter { inner, count: Cell::new(0) }
    }

    pub fn queries(&self) -> usize {
        self.count.get()
    }
}

impl<O: FeatureOracle> FeatureOracle for QueryCounter<O> {
    fn features(&self, tokens: &[u16]) -> Tensor {
        self.count.set(self.count.get() + 1);
        self.inner.features(tokens)
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractReport {
    pub steps: usize,
    pub losses: Vec<f32>,
    /// Mean substitute↔oracle feature similarity on the training data after
    /// the run (−final loss).
    pub final_similarity: f32,
}

/// Train a fresh substitute of the given architecture against the oracle,
/// aligning every token's output feature by cosine similarity. Zero steps
/// returns the untouched fresh initialization.
pub fn attack_extract(
    oracle: &dyn FeatureOracle,
    config: ModelConfig,
    attacker_data: &[Vec<u16>],
    steps: usize,
    batch: usize,
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> AttackResult<(TransformerWeights, ExtractReport)> {
    let substitute = TransformerWeights::random_init(config, rng);
    let mut opt = Optimizer::adam(lr, substitute.all_params());
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let g = Graph::new();
        let bound = BoundModel::bind(&g, &substitute, Trainability::All);
        let mut terms = Vec::with_capacity(batch);
        for i in 0..batch {
            let tokens = &attacker_data[(step * batch + i) % attacker_data.len()];
            let target = oracle.features(tokens);
            let (rows, _) = target.dims2();
            let target_node = g.input(&target);
            let z = bound.embed(&g, tokens)?;
            let y = forward_backbone(&g, &bound, z)?;
            let mut row_terms = Vec::with_capacity(rows);
            for r in 0..rows {
                let yr = g.select_row(y, r)?;
                let tr = g.select_row(target_node, r)?;
                row_terms.push(g.scale(g.cosine(yr, tr)?, -1.0));
            }
            terms.push(mean_of(&g, &row_terms)?);
        }
        let loss = mean_of(&g, &terms)?;
        losses.push(g.value(loss));
        g.backward(loss)?;
        opt.step()?;
    }
    let final_similarity = -losses.last().copied().unwrap_or(0.0);
    Ok((substitute, ExtractReport { steps, losses, final_similarity }))
}

/// Mean per-token cosine similarity between a substitute and the oracle over
/// a set — the attacker's own success metric.
pub fn oracle_similarity(
    substitute: &TransformerWeights,
    oracle: &dyn FeatureOracle,
    set: &[Vec<u16>],
) -> AttackResult<f32> {
    let mut total = 0.0f32;
    let mut count = 0usize;
    for tokens in set {
        let target = oracle.features(tokens);
        let (rows, _) = target.dims2();
        let g = Graph::inference();
        let bound = BoundModel::bind(&g, substitute, Trainability::Frozen);
        let z = bound.embed(&g, tokens)?;
        let y = forward_backbone(&g, &bound, z)?;
        let tn = g.input(&target);
        for r in 0..rows {
            total += g.value(g.cosine(g.select_row(y, r)?, g.select_row(tn, r)?)?);
            count += 1;
        }
    }
    Ok(total / count as f32)
}
