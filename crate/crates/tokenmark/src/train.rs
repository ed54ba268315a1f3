//! Shared training and evaluation loops for the classification task.
//!
//! Used by the experiment harness to produce the pre-trained model, by the
//! trigger baseline (joint clean + poisoned training) and by the fine-tuning
//! attack. Poisoning prepends a fixed trigger prefix and relabels; batches
//! cycle the dataset in order, so a (config, seed) pair fixes every step.

use rand::RngCore;

use crate::data::{Sample, SyntheticDataset};
use crate::tensor::optim::Optimizer;
use crate::tensor::{Graph, TensorResult};
use crate::transformer::{
    forward_backbone, forward_head, BoundHead, BoundModel, TaskHead, Trainability,
    TransformerWeights,
};

/// Trigger poisoning for the baseline scheme: prefix tokens plus the forced
/// target label, applied to a fraction of each batch.
#[derive(Debug, Clone)]
pub struct Poisoning {
    pub trigger: Vec<u16>,
    pub target_label: usize,
    pub rate: f32,
}

impl Poisoning {
    /// Prepend the trigger, truncating the tail to keep the length.
    pub fn apply(&self, tokens: &[u16]) -> Vec<u16> {
        let mut out = self.trigger.clone();
        out.extend_from_slice(tokens);
        out.truncate(tokens.len());
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
}

/// Joint cross-entropy training of backbone + embedding + head.
/// Returns the per-step losses.
pub fn train_classifier(
    weights: &TransformerWeights,
    head: &TaskHead,
    data: &SyntheticDataset,
    cfg: &TrainConfig,
    poison: Option<&Poisoning>,
    rng: &mut dyn RngCore,
) -> TensorResult<Vec<f32>> {
    let mut opt_params = weights.all_params();
    opt_params.extend(&head.params());
    let mut opt = Optimizer::adam(cfg.lr, opt_params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let g = Graph::new();
        let bound = BoundModel::bind(&g, weights, Trainability::All);
        let bound_head = BoundHead::bind(&g, head, true);
        let mut terms = Vec::with_capacity(cfg.batch);
        for idx in data.batch_indices(cfg.batch, step) {
            let sample = &data.samples[idx];
            let (tokens, label) = poisoned_view(sample, poison, rng);
            let z = bound.embed(&g, &tokens)?;
            let feats = forward_backbone(&g, &bound, z)?;
            let logits = forward_head(&g, &bound_head, feats)?;
            terms.push(g.cross_entropy(logits, &[label])?);
        }
        let loss = mean_of(&g, &terms)?;
        losses.push(g.value(loss));
        g.backward(loss)?;
        opt.step()?;
    }
    Ok(losses)
}

fn poisoned_view(
    sample: &Sample,
    poison: Option<&Poisoning>,
    rng: &mut dyn RngCore,
) -> (Vec<u16>, usize) {
    if let Some(p) = poison {
        let roll = (rng.next_u32() as f32) / (u32::MAX as f32);
        if roll < p.rate {
            return (p.apply(&sample.tokens), p.target_label);
        }
    }
    (sample.tokens.clone(), sample.label)
}

/// Mean cross-entropy and accuracy over a dataset (optionally triggered).
pub fn evaluate_classifier(
    weights: &TransformerWeights,
    head: &TaskHead,
    data: &SyntheticDataset,
    poison: Option<&Poisoning>,
) -> TensorResult<(f32, f64)> {
    let mut total_loss = 0.0f32;
    let mut correct = 0usize;
    for sample in &data.samples {
        let (tokens, label) = match poison {
            Some(p) => (p.apply(&sample.tokens), p.target_label),
            None => (sample.tokens.clone(), sample.label),
        };
        let g = Graph::inference();
        let bound = BoundModel::bind(&g, weights, Trainability::Frozen);
        let z = bound.embed(&g, &tokens)?;
        let feats = forward_backbone(&g, &bound, z)?;
        let bound_head = BoundHead::bind(&g, head, false);
        let logits = forward_head(&g, &bound_head, feats)?;
        total_loss += g.value(g.cross_entropy(logits, &[label])?);
        if argmax(&g.data(logits)) == label {
            correct += 1;
        }
    }
    let n = data.len();
    Ok((total_loss / n as f32, correct as f64 / n as f64))
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Average a list of scalar nodes.
pub fn mean_of(g: &Graph, terms: &[crate::tensor::NodeId]) -> TensorResult<crate::tensor::NodeId> {
    assert!(!terms.is_empty(), "mean of nothing");
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;
    use crate::rng::SeedHub;
    use crate::transformer::{ModelConfig, Reduction};

    #[test]
    fn short_training_reduces_loss() {
        let hub = SeedHub::new(70);
        let cfg = ModelConfig::toy();
        let weights = TransformerWeights::random_init(cfg, &mut hub.stream("model"));
        let head = TaskHead::linear("head.ds", cfg.d, 10, Reduction::MeanPool, &mut hub.stream("head"));
        let data = SyntheticDataset::generate(DatasetConfig::toy(), 256, &mut hub.stream("data"));
        let losses = train_classifier(
            &weights,
            &head,
            &data,
            &TrainConfig { steps: 60, batch: 16, lr: 1e-3 },
            None,
            &mut hub.stream("train"),
        )
        .unwrap();
        let head_mean: f32 = losses[..10].iter().sum::<f32>() / 10.0;
        let tail_mean: f32 = losses[losses.len() - 10..].iter().sum::<f32>() / 10.0;
        assert!(
            tail_mean < head_mean * 0.8,
            "loss did not drop: head {head_mean}, tail {tail_mean}"
        );
    }

    #[test]
    fn trigger_prefix_keeps_length() {
        let p = Poisoning { trigger: vec![1, 2, 3], target_label: 0, rate: 1.0 };
        let tokens: Vec<u16> = (10..18).collect();
        let out = p.apply(&tokens);
        assert_eq!(out.len(), tokens.len());
        assert_eq!(&out[..3], &[1, 2, 3]);
        assert_eq!(&out[3..], &tokens[..5]);
    }
}
