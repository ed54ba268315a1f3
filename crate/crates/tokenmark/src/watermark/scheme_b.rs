//! Scheme B: target-label watermarking on permuted inputs.
//!
//! Embedding fine-tunes the backbone (and only the backbone) on mixed
//! batches: a `wm_fraction` of samples is permuted by the secret `P` and
//! trained to decode to the target label `y_t` through a frozen random
//! linear map `G`; the remaining samples keep training the downstream task
//! through the frozen classifier head. The clean-task term anchors the plain
//! path while the permuted path acquires the watermark — at desk scale the
//! model has too little slack for the permuted-only variant to leave the
//! main task intact. A conventional patch-trigger baseline lives here too,
//! for robustness comparisons.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{decode_sample, Provenance, SampleScore, WrReport};
use crate::data::SyntheticDataset;
use crate::permutation::{Direction, PermutationSpec};
use crate::rng::SeedHub;
use crate::tensor::optim::Optimizer;
use crate::tensor::{Graph, TensorResult};
use crate::train::{argmax, evaluate_classifier, mean_of, train_classifier, Poisoning, TrainConfig};
use crate::transformer::{
    forward_backbone, forward_head, BoundHead, BoundModel, Reduction, TaskHead, Trainability,
    TransformerWeights,
};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmbedConfigB {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Fraction of each batch fed through the permuted path; the rest
    /// anchors the downstream task.
    #[serde(default = "default_wm_fraction")]
    pub wm_fraction: f32,
}

fn default_wm_fraction() -> f32 {
    0.5
}

impl Default for EmbedConfigB {
    /// One step, batch 32, Adam 1e-4: the one-shot protocol.
    fn default() -> Self {
        EmbedConfigB { steps: 1, batch: 32, lr: 1e-4, wm_fraction: 0.5 }
    }
}

impl EmbedConfigB {
    /// Desk-scale setting that reaches full watermark rate while holding the
    /// downstream task: 600 joint steps at Adam 3e-4.
    pub fn toy_converged() -> Self {
        EmbedConfigB { steps: 600, batch: 32, lr: 3e-4, wm_fraction: 0.5 }
    }
}

/// The owner's secret material for scheme B.
pub struct BundleB {
    pub spec: PermutationSpec,
    pub y_t: usize,
    /// Frozen random linear decoder; never updated during embedding.
    pub decoder: TaskHead,
    pub decoder_seed: u64,
    pub classes: usize,
    pub embed: EmbedConfigB,
}

impl BundleB {
    /// Draw a fresh bundle: non-identity permutation plus a seeded Gaussian
    /// linear decoder.
    pub fn generate(
        d: usize,
        n_heads: usize,
        family: crate::permutation::PermutationFamily,
        classes: usize,
        y_t: usize,
        embed: EmbedConfigB,
        hub: &SeedHub,
    ) -> Self {
        assert!(y_t < classes, "target label {y_t} out of {classes} classes");
        let spec =
            crate::permutation::sample_non_identity(&mut hub.stream("bundle_b.spec"), d, n_heads, family);
        let decoder_seed = hub.master();
        let decoder =
            TaskHead::linear("g_b", d, classes, Reduction::FirstToken, &mut hub.stream("bundle_b.decoder"));
        BundleB { spec, y_t, decoder, decoder_seed, classes, embed }
    }

    /// Like [`BundleB::generate`], but the owner screens decoder seeds
    /// against the original model before committing: a random linear map can
    /// land a fat slice of the untriggered decode distribution on `y_t`, so
    /// the owner (who holds θ) rejects decoders whose plain-path, true-P or
    /// wrong-P decode already favors the target label. The accepted seed
    /// index is recorded in the bundle.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_validated(
        original: &TransformerWeights,
        d: usize,
        n_heads: usize,
        family: crate::permutation::PermutationFamily,
        classes: usize,
        y_t: usize,
        embed: EmbedConfigB,
        hub: &SeedHub,
        validation_set: &[Vec<u16>],
        max_tries: u64,
    ) -> TensorResult<Self> {
        let spec =
            crate::permutation::sample_non_identity(&mut hub.stream("bundle_b.spec"), d, n_heads, family);
        let wrong = crate::watermark::scheme_s::sample_wrong_spec(
            &mut hub.stream("bundle_b.validate.wrong"),
            &spec,
            family,
        );
        let chance = 1.0 / classes as f64;
        let mut fallback: Option<(f64, BundleB)> = None;
        for try_idx in 0..max_tries {
            let decoder = TaskHead::linear(
                "g_b",
                d,
                classes,
                Reduction::FirstToken,
                &mut hub.stream_indexed("bundle_b.decoder", try_idx),
            );
            let bundle = BundleB {
                spec: spec.clone(),
                y_t,
                decoder,
                decoder_seed: try_idx,
                classes,
                embed,
            };
            let mut worst = 0.0f64;
            for path in [Some(&bundle.spec), None, Some(&wrong)] {
                let wr = extract_b_with_spec(
                    original,
                    &bundle,
                    path,
                    validation_set,
                    Provenance::default(),
                )?
                .wr;
                worst = worst.max(wr);
            }
            if worst <= chance {
                return Ok(bundle);
            }
            match &fallback {
                Some((best, _)) if *best <= worst => {}
                _ => fallback = Some((worst, bundle)),
            }
        }
        Ok(fallback.expect("max_tries ≥ 1").1)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbedTraceB {
    /// Watermark-term loss per step (the permuted-path cross-entropy).
    pub wm_losses: Vec<f32>,
    pub initial_wm_loss: f32,
    pub final_wm_loss: f32,
}

/// Fine-tune the backbone on mixed batches: `wm_fraction` of each batch is
/// permuted and trained toward `y_t` through the frozen decoder
/// (CE(G(F(Z·P, θ)·P⁻¹), y_t)); the rest trains the downstream task through
/// the frozen classifier head, anchoring the plain path. The decoder, the
/// classifier head and the spec never change; with zero steps the weights
/// are untouched.
pub fn embed_b(
    weights: &TransformerWeights,
    bundle: &BundleB,
    ds_head: &TaskHead,
    data: &SyntheticDataset,
    hub: &SeedHub,
) -> TensorResult<EmbedTraceB> {
    let map = bundle.spec.column_map();
    let fwd = map.gather_map(Direction::Forward);
    let inv = map.gather_map(Direction::Inverse);
    let mut opt = Optimizer::adam(bundle.embed.lr, weights.backbone_params());
    let mut wm_losses = Vec::with_capacity(bundle.embed.steps + 1);
    let n_wm = ((bundle.embed.batch as f32) * bundle.embed.wm_fraction).round().max(1.0) as usize;

    let batch_pass = |step: usize, train: bool| -> TensorResult<f32> {
        let g = Graph::new();
        let mode = if train { Trainability::BackboneOnly } else { Trainability::Frozen };
        let bound = BoundModel::bind(&g, weights, mode);
        let decoder = BoundHead::bind(&g, &bundle.decoder, false);
        let classifier = BoundHead::bind(&g, ds_head, false);
        let mut wm_terms = Vec::with_capacity(n_wm);
        let mut clean_terms = Vec::new();
        for (i, idx) in data.batch_indices(bundle.embed.batch, step).into_iter().enumerate() {
            let sample = &data.samples[idx];
            let z = bound.embed(&g, &sample.tokens)?;
            if i < n_wm {
                let zp = g.gather_cols(z, &fwd)?;
                let y = forward_backbone(&g, &bound, zp)?;
                let back = g.gather_cols(y, &inv)?;
                let logits = forward_head(&g, &decoder, back)?;
                wm_terms.push(g.cross_entropy(logits, &[bundle.y_t])?);
            } else {
                let y = forward_backbone(&g, &bound, z)?;
                let logits = forward_head(&g, &classifier, y)?;
                clean_terms.push(g.cross_entropy(logits, &[sample.label])?);
            }
        }
        let wm_loss = mean_of(&g, &wm_terms)?;
        let wm_value = g.value(wm_loss);
        if train {
            let loss = if clean_terms.is_empty() {
                wm_loss
            } else {
                g.add(wm_loss, mean_of(&g, &clean_terms)?)?
            };
            g.backward(loss)?;
        }
        Ok(wm_value)
    };

    let initial_wm_loss = batch_pass(0, false)?;
    let _ = hub; // batches cycle deterministically; no draws needed here
    for step in 0..bundle.embed.steps {
        wm_losses.push(batch_pass(step, true)?);
        opt.step()?;
    }
    let final_wm_loss = batch_pass(0, false)?;
    Ok(EmbedTraceB { wm_losses, initial_wm_loss, final_wm_loss })
}

/// Extraction under an arbitrary input permutation (`None` = plain inputs).
/// The owner's procedure uses `Some(&bundle.spec)`; the chance-level and
/// wrong-permutation measurements reuse the same code path.
pub fn extract_b_with_spec(
    weights: &TransformerWeights,
    bundle: &BundleB,
    spec: Option<&PermutationSpec>,
    set: &[Vec<u16>],
    provenance: Provenance,
) -> TensorResult<WrReport> {
    let mut samples = Vec::with_capacity(set.len());
    for tokens in set {
        let logits = decode_sample(weights, &bundle.decoder, tokens, spec)?;
        let decoded = argmax(&logits);
        samples.push(SampleScore::Class { decoded, hit: decoded == bundle.y_t, logits });
    }
    Ok(WrReport::from_samples("B", samples, None, Some(bundle.y_t), provenance))
}

/// WR = |{x : argmax G(F(T(x)·P, θ)·P⁻¹) == y_t}| / |D|.
pub fn extract_b(
    weights: &TransformerWeights,
    bundle: &BundleB,
    set: &[Vec<u16>],
    provenance: Provenance,
) -> TensorResult<WrReport> {
    extract_b_with_spec(weights, bundle, Some(&bundle.spec), set, provenance)
}

// ── Trigger baseline ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerConfig {
    pub trigger: Vec<u16>,
    pub y_t: usize,
    pub poison_rate: f32,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
}

/// The baseline owner's material: the trigger prefix, the target label and a
/// snapshot of the jointly trained classifier head.
pub struct TriggerBundle {
    pub trigger: Vec<u16>,
    pub y_t: usize,
    pub head: TaskHead,
}

/// Conventional backdoor embedding: the trigger prefix is prepended to a
/// `poison_rate` fraction of samples, relabeled to `y_t`, and trained
/// jointly with the clean task (full fine-tuning, head included).
pub fn embed_trigger_baseline(
    weights: &TransformerWeights,
    head: &TaskHead,
    cfg: &TriggerConfig,
    data: &SyntheticDataset,
    rng: &mut dyn RngCore,
) -> TensorResult<TriggerBundle> {
    assert!(cfg.poison_rate >= 0.0 && cfg.poison_rate <= 1.0, "poison rate in [0,1]");
    let poison = Poisoning {
        trigger: cfg.trigger.clone(),
        target_label: cfg.y_t,
        rate: cfg.poison_rate,
    };
    train_classifier(
        weights,
        head,
        data,
        &TrainConfig { steps: cfg.steps, batch: cfg.batch, lr: cfg.lr },
        if cfg.poison_rate > 0.0 { Some(&poison) } else { None },
        rng,
    )?;
    Ok(TriggerBundle { trigger: cfg.trigger.clone(), y_t: cfg.y_t, head: head.deep_clone() })
}

/// Baseline extraction: prepend the trigger and check the owner's saved head.
pub fn extract_trigger(
    weights: &TransformerWeights,
    bundle: &TriggerBundle,
    set: &[Vec<u16>],
    provenance: Provenance,
) -> TensorResult<WrReport> {
    let poison = Poisoning { trigger: bundle.trigger.clone(), target_label: bundle.y_t, rate: 1.0 };
    let mut samples = Vec::with_capacity(set.len());
    for tokens in set {
        let logits = decode_sample(weights, &bundle.head, &poison.apply(tokens), None)?;
        let decoded = argmax(&logits);
        samples.push(SampleScore::Class { decoded, hit: decoded == bundle.y_t, logits });
    }
    Ok(WrReport::from_samples("T", samples, None, Some(bundle.y_t), provenance))
}

// ── Fidelity ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    pub loss_original: f32,
    pub loss_watermarked: f32,
    /// |L_DS(θ*) − L_DS(θ)| in nats.
    pub loss_gap: f32,
    pub acc_original: f64,
    pub acc_watermarked: f64,
    /// Accuracy points lost (positive = watermarked model is worse).
    pub acc_gap_points: f64,
}

/// Downstream loss and accuracy gap between the original and watermarked
/// weights, measured with the same head on the same eval set.
pub fn fidelity_gap(
    original: &TransformerWeights,
    watermarked: &TransformerWeights,
    head: &TaskHead,
    eval: &SyntheticDataset,
) -> TensorResult<FidelityReport> {
    let (loss_o, acc_o) = evaluate_classifier(original, head, eval, None)?;
    let (loss_w, acc_w) = evaluate_classifier(watermarked, head, eval, None)?;
    Ok(FidelityReport {
        loss_original: loss_o,
        loss_watermarked: loss_w,
        loss_gap: (loss_w - loss_o).abs(),
        acc_original: acc_o,
        acc_watermarked: acc_w,
        acc_gap_points: (acc_o - acc_w) * 100.0,
    })
}

/// Mean first-token cosine similarity between two models over an eval set —
/// the scheme-S fidelity metric, and the attacker-visible alignment measure.
pub fn mean_feature_similarity(
    a: &TransformerWeights,
    b: &TransformerWeights,
    set: &[Vec<u16>],
) -> TensorResult<f32> {
    let mut total = 0.0;
    for tokens in set {
        let g = Graph::inference();
        let ba = BoundModel::bind(&g, a, Trainability::Frozen);
        let bb = BoundModel::bind(&g, b, Trainability::Frozen);
        let fa = forward_backbone(&g, &ba, ba.embed(&g, tokens)?)?;
        let fb = forward_backbone(&g, &bb, bb.embed(&g, tokens)?)?;
        let (ra, rb) = (g.select_row(fa, 0)?, g.select_row(fb, 0)?);
        total += g.value(g.cosine(ra, rb)?);
    }
    Ok(total / set.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;
    use crate::permutation::PermutationFamily;
    use crate::transformer::ModelConfig;

    fn setup(seed: u64) -> (TransformerWeights, TaskHead, BundleB, SyntheticDataset, SeedHub) {
        let hub = SeedHub::new(seed);
        let cfg = ModelConfig::toy();
        let weights = TransformerWeights::random_init(cfg, &mut hub.stream("model"));
        let ds_head =
            TaskHead::linear("head.ds", cfg.d, 10, Reduction::FirstToken, &mut hub.stream("head"));
        let bundle = BundleB::generate(
            cfg.d,
            cfg.n_heads,
            PermutationFamily::HeadsAndWithin,
            10,
            0,
            EmbedConfigB::default(),
            &hub,
        );
        let data = SyntheticDataset::generate(DatasetConfig::toy(), 128, &mut hub.stream("data"));
        (weights, ds_head, bundle, data, hub)
    }

    #[test]
    fn zero_steps_leaves_weights_bitwise_identical() {
        let (weights, ds_head, mut bundle, data, hub) = setup(80);
        bundle.embed.steps = 0;
        let before = weights.deep_clone();
        embed_b(&weights, &bundle, &ds_head, &data, &hub).unwrap();
        assert_eq!(weights.max_abs_diff(&before), 0.0);
    }

    #[test]
    fn one_step_reduces_watermark_loss() {
        let (weights, ds_head, bundle, data, hub) = setup(81);
        let trace = embed_b(&weights, &bundle, &ds_head, &data, &hub).unwrap();
        assert!(
            trace.final_wm_loss < trace.initial_wm_loss,
            "one step should descend: {} → {}",
            trace.initial_wm_loss,
            trace.final_wm_loss
        );
    }

    #[test]
    fn wr_arithmetic_is_hits_over_total() {
        let samples = vec![
            SampleScore::Class { logits: vec![], decoded: 0, hit: true },
            SampleScore::Class { logits: vec![], decoded: 0, hit: true },
            SampleScore::Class { logits: vec![], decoded: 1, hit: false },
            SampleScore::Class { logits: vec![], decoded: 0, hit: true },
        ];
        let report = WrReport::from_samples("B", samples, None, Some(0), Provenance::default());
        assert_eq!(report.wr, 0.75);
    }

    #[test]
    fn embedding_never_touches_decoder_or_spec() {
        let (weights, ds_head, bundle, data, hub) = setup(82);
        let decoder_before: Vec<Vec<f32>> =
            bundle.decoder.params().iter().map(|p| p.borrow().data().to_vec()).collect();
        let spec_before = bundle.spec.clone();
        let mut b = bundle;
        b.embed.steps = 5;
        b.embed.lr = 1e-3;
        embed_b(&weights, &b, &ds_head, &data, &hub).unwrap();
        let decoder_after: Vec<Vec<f32>> =
            b.decoder.params().iter().map(|p| p.borrow().data().to_vec()).collect();
        assert_eq!(decoder_before, decoder_after);
        assert_eq!(spec_before, b.spec);
    }

    #[test]
    fn poison_rate_zero_equals_clean_training() {
        let hub = SeedHub::new(83);
        let cfg = ModelConfig::toy();
        let data = SyntheticDataset::generate(DatasetConfig::toy(), 64, &mut hub.stream("data"));
        let make = || {
            (
                TransformerWeights::random_init(cfg, &mut hub.stream("m")),
                TaskHead::linear("head.ds", cfg.d, 10, Reduction::MeanPool, &mut hub.stream("h")),
            )
        };
        let (w_clean, h_clean) = make();
        let (w_poison, h_poison) = make();
        assert_eq!(w_clean.max_abs_diff(&w_poison), 0.0, "same seeds, same init");

        let tcfg = TriggerConfig {
            trigger: vec![0, 1],
            y_t: 0,
            poison_rate: 0.0,
            steps: 10,
            batch: 8,
            lr: 1e-3,
        };
        embed_trigger_baseline(&w_poison, &h_poison, &tcfg, &data, &mut hub.stream("t")).unwrap();
        crate::train::train_classifier(
            &w_clean,
            &h_clean,
            &data,
            &TrainConfig { steps: 10, batch: 8, lr: 1e-3 },
            None,
            &mut hub.stream("t2"),
        )
        .unwrap();
        assert_eq!(w_clean.max_abs_diff(&w_poison), 0.0, "rate 0 never diverges from clean");
    }

    #[test]
    fn fidelity_gap_of_identical_models_is_zero() {
        let (weights, head, _, data, _) = setup(84);
        let report = fidelity_gap(&weights, &weights, &head, &data).unwrap();
        assert_eq!(report.loss_gap, 0.0);
        assert_eq!(report.acc_gap_points, 0.0);
    }
}
