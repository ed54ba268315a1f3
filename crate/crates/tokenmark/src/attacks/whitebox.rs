//! White-box removal attacks: fine-tuning, pruning, quantization.
//!
//! All three operate on a clone of the stolen model and leave the input
//! untouched. Pruning and quantization distort the linear weight matrices of
//! every encoder layer; fine-tuning retrains end to end on a downstream task
//! with a fresh classifier head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AttackResult;
use crate::data::SyntheticDataset;
use crate::rng::SeedHub;
use crate::train::{evaluate_classifier, train_classifier, TrainConfig};
use crate::transformer::{Reduction, TaskHead, TransformerWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneGranularity {
    /// Zero the smallest-magnitude fraction r of each weight matrix.
    WeightMagnitude,
    /// Zero the fraction r of output units (rows of W plus their bias entry)
    /// with the smallest row norms.
    Neuron,
}

fn linear_weight_matrices(w: &TransformerWeights) -> Vec<(crate::tensor::Param, Option<crate::tensor::Param>)> {
    let mut out = Vec::new();
    for l in w.layers() {
        out.push((l.w_q.clone(), Some(l.b_q.clone())));
        out.push((l.w_k.clone(), Some(l.b_k.clone())));
        out.push((l.w_v.clone(), Some(l.b_v.clone())));
        out.push((l.w_a.clone(), Some(l.b_a.clone())));
        out.push((l.w_1.clone(), Some(l.b_1.clone())));
        out.push((l.w_2.clone(), Some(l.b_2.clone())));
    }
    out
}

/// Magnitude or neuron pruning at ratio `r ∈ [0,1)`. `r = 0` is a bitwise
/// no-op.
pub fn attack_prune(
    weights: &TransformerWeights,
    r: f32,
    granularity: PruneGranularity,
) -> AttackResult<TransformerWeights> {
    if !(0.0..1.0).contains(&r) {
        return Err(super::AttackError::Precondition(format!("prune ratio {r} outside [0,1)")));
    }
    let pruned = weights.deep_clone();
    for (w, bias) in linear_weight_matrices(&pruned) {
        match granularity {
            PruneGranularity::WeightMagnitude => {
                let mut t = w.borrow_mut();
                let n = t.numel();
                let k = (r * n as f32).floor() as usize;
                if k == 0 {
                    continue;
                }
                let mut order: Vec<usize> = (0..n).collect();
                let data = t.data_mut();
                order.sort_by(|&a, &b| {
                    data[a].abs().partial_cmp(&data[b].abs()).unwrap().then(a.cmp(&b))
                });
                for &i in &order[..k] {
                    data[i] = 0.0;
                }
            }
            PruneGranularity::Neuron => {
                let mut t = w.borrow_mut();
                let (rows, cols) = t.dims2();
                let k = (r * rows as f32).floor() as usize;
                if k == 0 {
                    continue;
                }
                let data = t.data_mut();
                let mut order: Vec<usize> = (0..rows).collect();
                let norms: Vec<f32> = (0..rows)
                    .map(|i| data[i * cols..(i + 1) * cols].iter().map(|v| v * v).sum())
                    .collect();
                order.sort_by(|&a, &b| norms[a].partial_cmp(&norms[b]).unwrap().then(a.cmp(&b)));
                let dead = &order[..k];
                for &i in dead {
                    for v in &mut data[i * cols..(i + 1) * cols] {
                        *v = 0.0;
                    }
                }
                drop(t);
                if let Some(b) = bias {
                    let mut bt = b.borrow_mut();
                    for &i in dead {
                        bt.data_mut()[i] = 0.0;
                    }
                }
            }
        }
    }
    Ok(pruned)
}

/// Symmetric uniform quantization of every linear weight matrix to `k` bits,
/// dequantized back to fp32. `k = 1` collapses each tensor to sign·mean|w|.
pub fn attack_quantize(weights: &TransformerWeights, k: u32) -> AttackResult<TransformerWeights> {
    if !(1..=8).contains(&k) {
        return Err(super::AttackError::Precondition(format!("bit width {k} outside 1..=8")));
    }
    let quantized = weights.deep_clone();
    for (w, _) in linear_weight_matrices(&quantized) {
        let mut t = w.borrow_mut();
        let data = t.data_mut();
        if k == 1 {
            let mean_abs = data.iter().map(|v| v.abs()).sum::<f32>() / data.len() as f32;
            for v in data.iter_mut() {
                *v = v.signum() * mean_abs;
            }
            continue;
        }
        let max_abs = data.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        if max_abs == 0.0 {
            continue;
        }
        let scale = max_abs / ((1u32 << (k - 1)) - 1) as f32;
        for v in data.iter_mut() {
            *v = (*v / scale).round() * scale;
        }
    }
    Ok(quantized)
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneOutcome {
    /// Downstream accuracy of the attacked model on its new task, per epoch.
    pub epoch_acc: Vec<f64>,
    pub final_loss: f32,
}

/// Fine-tune the stolen model end to end on a (possibly disjoint) downstream
/// task with a freshly initialized classifier head, for `epochs` passes.
/// `per_epoch` observes the model after each epoch (for WR curves).
pub fn attack_finetune(
    weights: &TransformerWeights,
    task: &SyntheticDataset,
    epochs: usize,
    batch: usize,
    lr: f32,
    hub: &SeedHub,
    mut per_epoch: impl FnMut(usize, &TransformerWeights),
) -> AttackResult<(TaskHead, FinetuneOutcome)> {
    let head = TaskHead::linear(
        "attack.ds",
        weights.config().d,
        task.config.classes,
        Reduction::MeanPool,
        &mut hub.stream("attack.finetune.head"),
    );
    let steps_per_epoch = task.len().div_ceil(batch);
    let mut rng: ChaCha8Rng = hub.stream("attack.finetune.train");
    let mut outcome = FinetuneOutcome { epoch_acc: Vec::new(), final_loss: 0.0 };
    for epoch in 0..epochs {
        let losses = train_classifier(
            weights,
            &head,
            task,
            &TrainConfig { steps: steps_per_epoch, batch, lr },
            None,
            &mut rng,
        )?;
        outcome.final_loss = *losses.last().unwrap_or(&0.0);
        let (_, acc) = evaluate_classifier(weights, &head, task, None)?;
        outcome.epoch_acc.push(acc);
        per_epoch(epoch, weights);
    }
    Ok((head, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedHub;
    use crate::tensor::Tensor;
    use crate::transformer::ModelConfig;

    fn model(seed: u64) -> TransformerWeights {
        let hub = SeedHub::new(seed);
        TransformerWeights::random_init(ModelConfig::toy(), &mut hub.stream("m"))
    }

    #[test]
    fn prune_zero_ratio_is_bitwise_noop() {
        let w = model(110);
        for g in [PruneGranularity::WeightMagnitude, PruneGranularity::Neuron] {
            let pruned = attack_prune(&w, 0.0, g).unwrap();
            assert_eq!(w.max_abs_diff(&pruned), 0.0);
        }
    }

    #[test]
    fn prune_half_zeroes_smallest_two_of_four() {
        let w = model(111);
        {
            let mut t = w.layers()[0].w_q.borrow_mut();
            *t = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        }
        let pruned = attack_prune(&w, 0.5, PruneGranularity::WeightMagnitude).unwrap();
        let t = pruned.layers()[0].w_q.borrow();
        assert_eq!(t.data(), &[0.0, 0.0, 3.0, -4.0]);
    }

    #[test]
    fn neuron_prune_zeroes_rows_and_bias() {
        let w = model(112);
        {
            let mut t = w.layers()[0].w_q.borrow_mut();
            let (rows, cols) = t.dims2();
            for i in 0..rows {
                for j in 0..cols {
                    t.data_mut()[i * cols + j] = (i + 1) as f32;
                }
            }
            let mut b = w.layers()[0].b_q.borrow_mut();
            for v in b.data_mut() {
                *v = 1.0;
            }
        }
        let pruned = attack_prune(&w, 0.25, PruneGranularity::Neuron).unwrap();
        let t = pruned.layers()[0].w_q.borrow();
        let (rows, cols) = t.dims2();
        let dead = rows / 4;
        for i in 0..dead {
            assert!(t.data()[i * cols..(i + 1) * cols].iter().all(|&v| v == 0.0));
            assert_eq!(pruned.layers()[0].b_q.borrow().data()[i], 0.0);
        }
        assert!(t.data()[dead * cols] != 0.0);
    }

    #[test]
    fn prune_ratio_one_is_rejected() {
        let w = model(113);
        assert!(attack_prune(&w, 1.0, PruneGranularity::WeightMagnitude).is_err());
    }

    #[test]
    fn quantize_error_bounded_by_half_scale() {
        let w = model(114);
        {
            let mut t = w.layers()[0].w_q.borrow_mut();
            t.data_mut()[0] = 1.0;
            t.data_mut()[1] = -0.5;
        }
        let q = attack_quantize(&w, 8).unwrap();
        let orig = w.layers()[0].w_q.borrow();
        let quant = q.layers()[0].w_q.borrow();
        let max_abs = orig.data().iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        let scale = max_abs / 127.0;
        for (a, b) in orig.data().iter().zip(quant.data()) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn quantize_zero_tensor_unchanged_at_any_width() {
        let w = model(115);
        for p in w.backbone_params().iter() {
            let mut t = p.borrow_mut();
            let keep = p.name().ends_with("gamma");
            for v in t.data_mut() {
                *v = if keep { 1.0 } else { 0.0 };
            }
        }
        for k in 1..=8 {
            let q = attack_quantize(&w, k).unwrap();
            // zero weight matrices stay zero; k=1 maps 0 to sign(0)·mean|0| = 0
            assert_eq!(w.max_abs_diff(&q), 0.0, "k = {k}");
        }
    }

    #[test]
    fn one_bit_quantization_is_sign_times_mean() {
        let w = model(116);
        {
            let mut t = w.layers()[0].w_q.borrow_mut();
            *t = Tensor::from_vec(&[2, 2], vec![1.0, -3.0, 2.0, -2.0]).unwrap();
        }
        let q = attack_quantize(&w, 1).unwrap();
        let t = q.layers()[0].w_q.borrow();
        assert_eq!(t.data(), &[2.0, -2.0, 2.0, -2.0]);
    }
}
