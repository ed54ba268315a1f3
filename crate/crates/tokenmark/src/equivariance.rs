//! Runtime verification of the permutation-equivariance identities.
//!
//! Three levels, each checked against explicit tolerances:
//!
//! 1. forward: `F(Z·P, θ)·P⁻¹ == F(Z, P(θ))` within fp32 tolerance;
//! 2. backward: gradients transport exactly like weights — for every layer
//!    tensor, grad(P(θ)) equals the transport of grad(θ) when both sides
//!    minimize the same loss;
//! 3. one training step: SGD on permuted inputs then transporting the result
//!    equals SGD on normal inputs starting from the transported weights.
//!
//! A deliberately *invalid* permutation (one that crosses a head boundary)
//! must break identity 1; the suite runs that negative control too, so a
//! passing report also certifies that the head constraint is load-bearing.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::permutation::{
    sample, transport_weights_raw, ColumnPermutation, Direction, PermutationFamily,
    PermutationSpec,
};
use crate::rng::SeedHub;
use crate::tensor::optim::Optimizer;
use crate::tensor::{Graph, NodeId, Tensor, TensorResult};
use crate::transformer::{
    forward_backbone, Activation, BoundModel, ModelConfig, Trainability, TransformerWeights,
};

pub const FORWARD_TOL: f32 = 1e-4;
pub const BACKWARD_TOL: f32 = 1e-4;
pub const TRAIN_STEP_TOL: f32 = 1e-4;
/// A cross-head permutation must break the forward identity at least this much.
pub const NEGATIVE_CONTROL_MIN: f32 = 1e-2;

/// max |a − b| elementwise.
fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// F(Z·P, θ)·P⁻¹ for a raw column permutation.
fn forward_permuted(
    weights: &TransformerWeights,
    z: &Tensor,
    perm: &ColumnPermutation,
) -> TensorResult<Vec<f32>> {
    let g = Graph::inference();
    let bound = BoundModel::bind(&g, weights, Trainability::Frozen);
    let zp = g.gather_cols(g.input(z), &perm.gather_map(Direction::Forward))?;
    let y = forward_backbone(&g, &bound, zp)?;
    let back = g.gather_cols(y, &perm.gather_map(Direction::Inverse))?;
    Ok(g.data(back))
}

/// F(Z, P(θ)) for a raw column permutation.
fn forward_transported(
    weights: &TransformerWeights,
    z: &Tensor,
    perm: &ColumnPermutation,
) -> TensorResult<Vec<f32>> {
    let transported = transport_weights_raw(weights, perm);
    let g = Graph::inference();
    let bound = BoundModel::bind(&g, &transported, Trainability::Frozen);
    let y = forward_backbone(&g, &bound, g.input(z))?;
    Ok(g.data(y))
}

/// Max deviation of the forward identity for one (θ, Z, P) instance.
pub fn forward_deviation_raw(
    weights: &TransformerWeights,
    z: &Tensor,
    perm: &ColumnPermutation,
) -> TensorResult<f32> {
    let lhs = forward_permuted(weights, z, perm)?;
    let rhs = forward_transported(weights, z, perm)?;
    Ok(max_abs_diff(&lhs, &rhs))
}

pub fn forward_deviation(
    weights: &TransformerWeights,
    z: &Tensor,
    spec: &PermutationSpec,
) -> TensorResult<f32> {
    forward_deviation_raw(weights, z, &spec.column_map())
}

/// Scalar loss used by the backward and train-step checks: a fixed quadratic
/// projection sum((y ⊙ C)²)/numel. Both sides of an identity share `C`.
fn projection_loss(g: &Graph, y: NodeId, c: &Tensor) -> TensorResult<NodeId> {
    let cn = g.input(c);
    let yc = g.mul(y, cn)?;
    let sq = g.mul(yc, yc)?;
    Ok(g.scale(g.sum_all(sq), 1.0 / c.numel() as f32))
}

/// Per-tensor-kind max deviations of the gradient-transport identities.
///
/// Side A feeds `Z·P` through `θ` and de-permutes the output; side B feeds
/// `Z` through `P(θ)`. Equal losses, then side B's gradients must equal the
/// transported side-A gradients, tensor by tensor.
pub fn backward_deviations(
    weights: &TransformerWeights,
    z: &Tensor,
    spec: &PermutationSpec,
    c: &Tensor,
) -> TensorResult<BTreeMap<String, f32>> {
    let perm = spec.column_map();

    // side A: permuted inputs on original weights
    let side_a = weights.deep_clone();
    {
        let g = Graph::new();
        let bound = BoundModel::bind(&g, &side_a, Trainability::BackboneOnly);
        let zp = g.gather_cols(g.input(z), &perm.gather_map(Direction::Forward))?;
        let y = forward_backbone(&g, &bound, zp)?;
        let back = g.gather_cols(y, &perm.gather_map(Direction::Inverse))?;
        let loss = projection_loss(&g, back, c)?;
        g.backward(loss)?;
    }

    // side B: normal inputs on transported weights
    let side_b = crate::permutation::transport_weights(weights, spec);
    {
        let g = Graph::new();
        let bound = BoundModel::bind(&g, &side_b, Trainability::BackboneOnly);
        let y = forward_backbone(&g, &bound, g.input(z))?;
        let loss = projection_loss(&g, y, c)?;
        g.backward(loss)?;
    }

    // move side A's gradients into a weight set and transport them
    let grad_carrier = weights.deep_clone();
    for (dst, src) in grad_carrier.backbone_params().iter().zip(side_a.backbone_params().iter()) {
        let grad = src.borrow().grad().expect("side A gradients populated").to_vec();
        dst.borrow_mut().data_mut().copy_from_slice(&grad);
    }
    let transported_grads = transport_weights_raw(&grad_carrier, &perm);

    let mut by_kind = BTreeMap::new();
    for (ta, pb) in
        transported_grads.backbone_params().iter().zip(side_b.backbone_params().iter())
    {
        let expect = ta.borrow();
        let got = pb.borrow();
        let dev = max_abs_diff(expect.data(), got.grad().expect("side B gradients populated"));
        let kind = ta.name().split_once('.').map(|(_, rest)| rest.to_string()).unwrap_or_default();
        let slot = by_kind.entry(kind).or_insert(0.0f32);
        *slot = slot.max(dev);
    }
    Ok(by_kind)
}

/// One-step training equivalence: SGD on the permuted side, transported,
/// minus SGD on the transported side. Returns the max parameter deviation.
pub fn train_step_deviation(
    weights: &TransformerWeights,
    z: &Tensor,
    spec: &PermutationSpec,
    c: &Tensor,
    lr: f32,
) -> TensorResult<f32> {
    let perm = spec.column_map();

    // side A: one step on permuted inputs, then transport the result
    let side_a = weights.deep_clone();
    {
        let g = Graph::new();
        let bound = BoundModel::bind(&g, &side_a, Trainability::BackboneOnly);
        let zp = g.gather_cols(g.input(z), &perm.gather_map(Direction::Forward))?;
        let y = forward_backbone(&g, &bound, zp)?;
        let back = g.gather_cols(y, &perm.gather_map(Direction::Inverse))?;
        let loss = projection_loss(&g, back, c)?;
        g.backward(loss)?;
        Optimizer::sgd(lr, side_a.backbone_params()).step()?;
    }
    let side_a_transported = crate::permutation::transport_weights(&side_a, spec);

    // side B: one step on normal inputs starting from transported weights
    let side_b = crate::permutation::transport_weights(weights, spec);
    {
        let g = Graph::new();
        let bound = BoundModel::bind(&g, &side_b, Trainability::BackboneOnly);
        let y = forward_backbone(&g, &bound, g.input(z))?;
        let loss = projection_loss(&g, y, c)?;
        g.backward(loss)?;
        Optimizer::sgd(lr, side_b.backbone_params()).step()?;
    }

    Ok(side_a_transported.max_abs_diff(&side_b))
}

/// A permutation that swaps one column across a head boundary — valid as a
/// column bijection, invalid for multi-head attention.
pub fn cross_head_permutation(d: usize, n_heads: usize) -> ColumnPermutation {
    assert!(n_heads >= 2, "needs at least two heads to cross");
    let dh = d / n_heads;
    let mut dest: Vec<usize> = (0..d).collect();
    dest.swap(0, dh); // first column of head 0 ↔ first column of head 1
    ColumnPermutation::from_dest(dest).expect("swap is a bijection")
}

// ── Suite ───────────────────────────────────────────────────────────────────

/// The config grid the suite sweeps: 1–3 layers × d ∈ {8,16} × heads ∈ {1,2,4}.
pub fn config_grid() -> Vec<ModelConfig> {
    let mut grid = Vec::new();
    for n_layers in 1..=3 {
        for d in [8, 16] {
            for n_heads in [1, 2, 4] {
                for activation in [Activation::Relu, Activation::Gelu] {
                    grid.push(ModelConfig {
                        n_layers,
                        d,
                        n_heads,
                        d_mlp: 2 * d,
                        vocab_size: 32,
                        max_seq_len: 16,
                        activation,
                    });
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub trials: usize,
    pub max_forward: f32,
    pub max_backward: f32,
    pub backward_by_kind: BTreeMap<String, f32>,
    pub max_train_step: f32,
    pub negative_control_deviation: f32,
    pub forward_tol: f32,
    pub backward_tol: f32,
    pub train_step_tol: f32,
    pub negative_control_min: f32,
    pub pass: bool,
}

impl SuiteReport {
    fn vacuous() -> Self {
        SuiteReport {
            trials: 0,
            max_forward: 0.0,
            max_backward: 0.0,
            backward_by_kind: BTreeMap::new(),
            max_train_step: 0.0,
            negative_control_deviation: f32::INFINITY,
            forward_tol: FORWARD_TOL,
            backward_tol: BACKWARD_TOL,
            train_step_tol: TRAIN_STEP_TOL,
            negative_control_min: NEGATIVE_CONTROL_MIN,
            pass: true,
        }
    }
}

/// Run forward, backward and train-step checks over `trials` random
/// instances spread across the config grid, plus the cross-head negative
/// control. `trials == 0` returns a vacuous pass.
pub fn run_suite(hub: &SeedHub, trials: usize) -> TensorResult<SuiteReport> {
    if trials == 0 {
        return Ok(SuiteReport::vacuous());
    }
    let grid = config_grid();
    let mut report = SuiteReport { trials, ..SuiteReport::vacuous() };

    for trial in 0..trials {
        let cfg = grid[trial % grid.len()];
        let mut rng = hub.stream_indexed("equivariance.trial", trial as u64);
        let weights = TransformerWeights::random_init(cfg, &mut rng);
        let n = 2 + rng.random_range(0..6);
        let z = Tensor::randn(&mut rng, &[n, cfg.d], 1.0);
        let c = Tensor::randn(&mut rng, &[n, cfg.d], 1.0);
        let spec = sample(&mut rng, cfg.d, cfg.n_heads, PermutationFamily::HeadsAndWithin);

        report.max_forward = report.max_forward.max(forward_deviation(&weights, &z, &spec)?);
        for (kind, dev) in backward_deviations(&weights, &z, &spec, &c)? {
            let slot = report.backward_by_kind.entry(kind).or_insert(0.0);
            *slot = slot.max(dev);
            report.max_backward = report.max_backward.max(dev);
        }
        report.max_train_step =
            report.max_train_step.max(train_step_deviation(&weights, &z, &spec, &c, 0.1)?);
    }

    report.negative_control_deviation = negative_control_deviation(hub, 10)?;

    report.pass = report.max_forward < FORWARD_TOL
        && report.max_backward < BACKWARD_TOL
        && report.max_train_step < TRAIN_STEP_TOL
        && report.negative_control_deviation >= NEGATIVE_CONTROL_MIN;
    Ok(report)
}

/// Max forward-identity violation produced by a cross-head permutation over
/// a few random instances. Large is good: it proves the constraint matters.
pub fn negative_control_deviation(hub: &SeedHub, instances: usize) -> TensorResult<f32> {
    let cfg = ModelConfig::toy();
    let mut worst = 0.0f32;
    for i in 0..instances {
        let mut rng = hub.stream_indexed("equivariance.negative", i as u64);
        let weights = TransformerWeights::random_init(cfg, &mut rng);
        let z = Tensor::randn(&mut rng, &[6, cfg.d], 1.0);
        let bad = cross_head_permutation(cfg.d, cfg.n_heads);
        worst = worst.max(forward_deviation_raw(&weights, &z, &bad)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_identity_holds_on_toy_config() {
        let hub = SeedHub::new(50);
        let mut rng = hub.stream("fwd");
        let cfg = ModelConfig::toy();
        let weights = TransformerWeights::random_init(cfg, &mut rng);
        let z = Tensor::randn(&mut rng, &[8, cfg.d], 1.0);
        let spec = sample(&mut rng, cfg.d, cfg.n_heads, PermutationFamily::HeadsAndWithin);
        let dev = forward_deviation(&weights, &z, &spec).unwrap();
        assert!(dev < FORWARD_TOL, "deviation {dev}");
    }

    #[test]
    fn identity_permutation_is_bit_identical() {
        let hub = SeedHub::new(51);
        let mut rng = hub.stream("id");
        let cfg = ModelConfig::toy();
        let weights = TransformerWeights::random_init(cfg, &mut rng);
        let z = Tensor::randn(&mut rng, &[4, cfg.d], 1.0);
        let id = ColumnPermutation::identity(cfg.d);
        let lhs = forward_permuted(&weights, &z, &id).unwrap();
        let rhs = forward_transported(&weights, &z, &id).unwrap();
        assert_eq!(lhs, rhs, "identity permutation must not perturb a single bit");
    }

    #[test]
    fn backward_identities_hold_on_toy_config() {
        let hub = SeedHub::new(52);
        let mut rng = hub.stream("bwd");
        let cfg = ModelConfig::toy();
        let weights = TransformerWeights::random_init(cfg, &mut rng);
        let z = Tensor::randn(&mut rng, &[6, cfg.d], 1.0);
        let c = Tensor::randn(&mut rng, &[6, cfg.d], 1.0);
        let spec = sample(&mut rng, cfg.d, cfg.n_heads, PermutationFamily::HeadsAndWithin);
        let devs = backward_deviations(&weights, &z, &spec, &c).unwrap();
        assert!(!devs.is_empty());
        for (kind, dev) in devs {
            assert!(dev < BACKWARD_TOL, "{kind}: deviation {dev}");
        }
    }

    #[test]
    fn train_step_equivalence_holds_on_toy_config() {
        let hub = SeedHub::new(53);
        let mut rng = hub.stream("step");
        let cfg = ModelConfig::toy();
        let weights = TransformerWeights::random_init(cfg, &mut rng);
        let z = Tensor::randn(&mut rng, &[6, cfg.d], 1.0);
        let c = Tensor::randn(&mut rng, &[6, cfg.d], 1.0);
        let spec = sample(&mut rng, cfg.d, cfg.n_heads, PermutationFamily::HeadsAndWithin);
        let dev = train_step_deviation(&weights, &z, &spec, &c, 0.1).unwrap();
        assert!(dev < TRAIN_STEP_TOL, "deviation {dev}");
    }

    #[test]
    fn cross_head_permutation_breaks_equivariance() {
        let hub = SeedHub::new(54);
        let dev = negative_control_deviation(&hub, 5).unwrap();
        assert!(dev >= NEGATIVE_CONTROL_MIN, "cross-head deviation only {dev}");
    }

    #[test]
    fn zero_trials_is_vacuous_pass() {
        let hub = SeedHub::new(55);
        let report = run_suite(&hub, 0).unwrap();
        assert!(report.pass);
        assert_eq!(report.trials, 0);
    }
}
