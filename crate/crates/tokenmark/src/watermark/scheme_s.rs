//! Scheme S: secret-vector watermarking with a trainable decoder.
//!
//! Embedding runs an iterative three-step protocol on each batch: the shadow
//! model θ_s takes a matching step toward the frozen original θ; the decoder
//! G learns to emit the secret vector `sk` from the permuted paths of θ* and
//! θ_s while staying orthogonal to a freshly sampled wrong permutation and to
//! the original's plain path; then θ* takes a step that balances feature
//! matching against decode correlation. Every `F(Z, P(·))` term is computed
//! through the equivariance identity as `F(Z·P, ·)·P⁻¹` — weights are never
//! materially transported during training.
//!
//! Extraction feeds permuted inputs, de-permutes the output, decodes with G
//! and thresholds the cosine similarity against `sk` at ε_wm.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{cosine_slice, decode_sample, Provenance, SampleScore, WrReport};
use crate::data::SyntheticDataset;
use crate::permutation::{sample, Direction, PermutationFamily, PermutationSpec};
use crate::rng::SeedHub;
use crate::tensor::optim::Optimizer;
use crate::tensor::{Graph, NodeId, Tensor, TensorError, TensorResult};
use crate::train::mean_of;
use crate::transformer::{
    forward_backbone, forward_backbone_dropout, forward_head, BoundHead, BoundModel, Reduction,
    TaskHead, Trainability, TransformerWeights,
};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmbedConfigS {
    pub steps: usize,
    pub batch: usize,
    pub lr_backbone: f32,
    pub lr_decoder: f32,
    pub lr_shadow: f32,
    /// Dropout on each block output of θ*/θ_s forwards during embedding;
    /// 0 disables.
    pub dropout: f32,
    pub sk_dim: usize,
    pub g_hidden: usize,
    pub epsilon_wm: f32,
    /// Re-initialize the shadow every this many steps (0 = never). Each
    /// restart shows the decoder a fresh mimic trajectory, which is what
    /// makes the watermark survive extraction by substitutes the owner has
    /// never seen.
    #[serde(default = "default_shadow_restart")]
    pub shadow_restart_every: usize,
    /// Matching loss below which the shadow counts as a converged mimic and
    /// its correlation term joins L_G.
    #[serde(default = "default_shadow_ready")]
    pub shadow_ready_loss: f32,
}

fn default_shadow_ready() -> f32 {
    -0.8
}

fn default_shadow_restart() -> usize {
    250
}

impl Default for EmbedConfigS {
    fn default() -> Self {
        EmbedConfigS {
            steps: 500,
            batch: 32,
            lr_backbone: 1e-4,
            lr_decoder: 1e-4,
            lr_shadow: 1e-4,
            dropout: 0.1,
            sk_dim: 16,
            g_hidden: 32,
            epsilon_wm: 0.5,
            shadow_restart_every: default_shadow_restart(),
            shadow_ready_loss: default_shadow_ready(),
        }
    }
}

impl EmbedConfigS {
    /// Desk-scale setting that converges well inside 500 steps.
    pub fn toy_converged() -> Self {
        EmbedConfigS {
            lr_backbone: 1e-3,
            lr_decoder: 1e-3,
            lr_shadow: 2e-3,
            g_hidden: 64,
            ..EmbedConfigS::default()
        }
    }
}

/// The owner's secret material for scheme S.
pub struct BundleS {
    pub spec: PermutationSpec,
    pub family: PermutationFamily,
    /// Standard-normal secret vector.
    pub sk: Vec<f32>,
    pub sk_seed: u64,
    /// 2-layer MLP decoder; trainable during embedding, frozen afterwards.
    pub decoder: TaskHead,
    pub epsilon_wm: f32,
    pub shadow_seed: u64,
    pub embed: EmbedConfigS,
}

impl BundleS {
    pub fn generate(
        d: usize,
        n_heads: usize,
        family: PermutationFamily,
        embed: EmbedConfigS,
        hub: &SeedHub,
    ) -> Self {
        assert!(embed.epsilon_wm > 0.0 && embed.epsilon_wm < 1.0, "ε_wm in (0,1)");
        let spec = crate::permutation::sample_non_identity(
            &mut hub.stream("bundle_s.spec"),
            d,
            n_heads,
            family,
        );
        let mut sk_rng = hub.stream("bundle_s.sk");
        let sk: Vec<f32> =
            (0..embed.sk_dim).map(|_| sk_rng.sample::<f32, _>(StandardNormal)).collect();
        let decoder = TaskHead::mlp2(
            "g_s",
            d,
            embed.g_hidden,
            embed.sk_dim,
            Reduction::FirstToken,
            &mut hub.stream("bundle_s.decoder"),
        );
        BundleS {
            spec,
            family,
            sk,
            sk_seed: hub.master(),
            decoder,
            epsilon_wm: embed.epsilon_wm,
            shadow_seed: hub.master(),
            embed,
        }
    }
}

// ── Loss primitives ─────────────────────────────────────────────────────────

/// L_corr = −sim(sk, decoded): minimized when the decode aligns with sk.
pub fn loss_corr(sk: &[f32], decoded: &[f32]) -> f32 {
    -cosine_slice(sk, decoded)
}

/// L_uncorr = sim(sk, decoded)²: minimized when the decode is orthogonal.
pub fn loss_uncorr(sk: &[f32], decoded: &[f32]) -> f32 {
    let s = cosine_slice(sk, decoded);
    s * s
}

/// L_DS = −mean first-token cosine between two models over a set.
pub fn loss_ds(
    a: &TransformerWeights,
    b: &TransformerWeights,
    set: &[Vec<u16>],
) -> TensorResult<f32> {
    Ok(-super::scheme_b::mean_feature_similarity(a, b, set)?)
}

// ── Embedding session ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Default, Serialize)]
pub struct EmbedTraceS {
    pub loss_shadow: Vec<f32>,
    pub loss_decoder: Vec<f32>,
    pub loss_backbone: Vec<f32>,
}

/// Sample a wrong permutation from the family, rejecting the true spec.
pub fn sample_wrong_spec(
    rng: &mut ChaCha8Rng,
    spec: &PermutationSpec,
    family: PermutationFamily,
) -> PermutationSpec {
    loop {
        let p = sample(rng, spec.d, spec.n_heads, family);
        if p != *spec {
            return p;
        }
    }
}

struct Paths<'a> {
    fwd: Vec<usize>,
    inv: Vec<usize>,
    tokens: &'a [Vec<u16>],
}

/// First-token feature of the permuted path F(Z·P, model)·P⁻¹ for one sample.
fn permuted_feature(
    g: &Graph,
    bound: &BoundModel,
    tokens: &[u16],
    fwd: &[usize],
    inv: &[usize],
    dropout: f32,
    rng: Option<&mut ChaCha8Rng>,
) -> TensorResult<NodeId> {
    let z = bound.embed(g, tokens)?;
    let zp = g.gather_cols(z, fwd)?;
    let y = match rng {
        Some(r) if dropout > 0.0 => forward_backbone_dropout(g, bound, zp, dropout, r)?,
        _ => forward_backbone(g, bound, zp)?,
    };
    let back = g.gather_cols(y, inv)?;
    g.select_row(back, 0)
}

/// First-token feature of the plain path F(Z, model) for one sample.
fn plain_feature(
    g: &Graph,
    bound: &BoundModel,
    tokens: &[u16],
    dropout: f32,
    rng: Option<&mut ChaCha8Rng>,
) -> TensorResult<NodeId> {
    let z = bound.embed(g, tokens)?;
    let y = match rng {
        Some(r) if dropout > 0.0 => forward_backbone_dropout(g, bound, z, dropout, r)?,
        _ => forward_backbone(g, bound, z)?,
    };
    g.select_row(y, 0)
}

/// One matching step of the shadow (or any mimic): minimize
/// −mean sim(F(Z,θ), F(Z,θ_s)) over the batch, similarity taken per token
/// row — the same signal an extraction attacker trains on. Returns
/// (loss, grad norm), both taken before the optimizer update.
pub fn shadow_train_step(
    theta_s: &TransformerWeights,
    theta: &TransformerWeights,
    batch: &[Vec<u16>],
    opt: &mut Optimizer,
) -> TensorResult<(f32, f32)> {
    let g = Graph::new();
    let b_ref = BoundModel::bind(&g, theta, Trainability::Frozen);
    let b_s = BoundModel::bind(&g, theta_s, Trainability::All);
    let mut terms = Vec::with_capacity(batch.len());
    for tokens in batch {
        let y_ref = forward_backbone(&g, &b_ref, b_ref.embed(&g, tokens)?)?;
        let y_s = forward_backbone(&g, &b_s, b_s.embed(&g, tokens)?)?;
        let (rows, _) = g.shape(y_ref);
        let mut row_terms = Vec::with_capacity(rows);
        for r in 0..rows {
            let fr = g.select_row(y_ref, r)?;
            let fs = g.select_row(y_s, r)?;
            row_terms.push(g.scale(g.cosine(fr, fs)?, -1.0));
        }
        terms.push(mean_of(&g, &row_terms)?);
    }
    let loss = mean_of(&g, &terms)?;
    let value = g.value(loss);
    g.backward(loss)?;
    let norm = grad_norm(opt.params());
    opt.step()?;
    Ok((value, norm))
}

fn grad_norm(params: &crate::tensor::ParamSet) -> f32 {
    let mut total = 0.0f32;
    for p in params.iter() {
        if let Some(g) = p.borrow().grad() {
            total += g.iter().map(|v| v * v).sum::<f32>();
        }
    }
    total.sqrt()
}

/// Algorithm: initialize θ* from θ (caller provides the copy), θ_s and G
/// random; per batch update θ_s by L_S, G by L_G, θ* by L_B, one step each.
/// θ is never updated; the spec and sk never change; θ* and the decoder are
/// updated in place.
pub fn embed_s(
    theta_star: &TransformerWeights,
    theta: &TransformerWeights,
    bundle: &BundleS,
    data: &SyntheticDataset,
    hub: &SeedHub,
) -> TensorResult<EmbedTraceS> {
    let cfg = &bundle.embed;
    let map = bundle.spec.column_map();
    let fwd = map.gather_map(Direction::Forward);
    let inv = map.gather_map(Direction::Inverse);

    let mut shadow_rng = hub.stream_indexed("embed_s.shadow_init", bundle.shadow_seed);
    let theta_s = TransformerWeights::random_init(*theta.config(), &mut shadow_rng);

    let mut opt_shadow = Optimizer::adam(cfg.lr_shadow, theta_s.all_params());
    let mut opt_decoder = Optimizer::adam(cfg.lr_decoder, bundle.decoder.params());
    let mut opt_backbone = Optimizer::adam(cfg.lr_backbone, theta_star.backbone_params());

    let mut wrong_rng = hub.stream("embed_s.wrong_perm");
    let mut drop_rng = hub.stream("embed_s.dropout");
    let sk_tensor = Tensor::from_vec(&[cfg.sk_dim], bundle.sk.clone())
        .map_err(|e| TensorError::BadConstruction(e.to_string()))?;

    let mut trace = EmbedTraceS::default();
    for step in 0..cfg.steps {
        let batch: Vec<Vec<u16>> = data
            .batch_indices(cfg.batch, step)
            .into_iter()
            .map(|i| data.samples[i].tokens.clone())
            .collect();
        let paths = Paths { fwd: fwd.clone(), inv: inv.clone(), tokens: &batch };

        if cfg.shadow_restart_every > 0 && step > 0 && step % cfg.shadow_restart_every == 0 {
            let fresh = TransformerWeights::random_init(*theta.config(), &mut shadow_rng);
            theta_s.copy_from(&fresh);
            opt_shadow = Optimizer::adam(cfg.lr_shadow, theta_s.all_params());
        }

        // 1) shadow step: L_S
        let (l_s, _) = shadow_train_step(&theta_s, theta, &batch, &mut opt_shadow)?;
        trace.loss_shadow.push(l_s);

        // 2) decoder step: L_G. The shadow counts as a mimic once its
        // matching loss clears the readiness bar.
        let shadow_ready = l_s <= cfg.shadow_ready_loss;
        let l_g = decoder_step(
            theta_star,
            &theta_s,
            theta,
            bundle,
            &sk_tensor,
            &paths,
            &mut wrong_rng,
            shadow_ready,
            &mut opt_decoder,
            &mut drop_rng,
        )?;
        trace.loss_decoder.push(l_g);

        // 3) backbone step: L_B
        let l_b = backbone_step(
            theta_star,
            theta,
            bundle,
            &sk_tensor,
            &paths,
            &mut opt_backbone,
            &mut drop_rng,
        )?;
        trace.loss_backbone.push(l_b);

        if !l_s.is_finite() || !l_g.is_finite() || !l_b.is_finite() {
            return Err(TensorError::NumericFault {
                op: "embed_s",
                detail: format!("non-finite loss at iteration {step}"),
            });
        }
    }
    Ok(trace)
}

/// L_G = L_corr(sk, G(F(Z,P(θ*)))) + L_corr(sk, G(F(Z,P(θ_s))))
///     + L_uncorr(sk, G(F(Z,P̃(θ*)))) + L_uncorr(sk, G(F(Z,θ)))
///     + L_uncorr(sk, G(F(Z,P(θ)))).
///
/// The last term decorrelates the *unwatermarked* model's permuted path —
/// the path a verifier actually queries when measuring a false positive.
/// Without it, a small model's P(θ) features sit close enough to P(θ*) that
/// the decoder fires on models that were never watermarked.
///
/// The shadow-correlation term only participates while the shadow is an
/// actual mimic (`shadow_ready`); right after (re)initialization its
/// permuted path is indistinguishable from a random model's, and rewarding
/// it would teach the decoder to fire on everything. While it participates,
/// the shadow's wrong-permutation path is decorrelated alongside it, so the
/// decoder keys on the true permutation rather than on "any permuted path
/// of a mimic".
#[allow(clippy::too_many_arguments)]
fn decoder_step(
    theta_star: &TransformerWeights,
    theta_s: &TransformerWeights,
    theta: &TransformerWeights,
    bundle: &BundleS,
    sk: &Tensor,
    paths: &Paths,
    wrong_rng: &mut ChaCha8Rng,
    shadow_ready: bool,
    opt: &mut Optimizer,
    drop_rng: &mut ChaCha8Rng,
) -> TensorResult<f32> {
    let cfg = &bundle.embed;

    let g = Graph::new();
    let b_star = BoundModel::bind(&g, theta_star, Trainability::Frozen);
    let b_shadow = BoundModel::bind(&g, theta_s, Trainability::Frozen);
    let b_orig = BoundModel::bind(&g, theta, Trainability::Frozen);
    let decoder = BoundHead::bind(&g, &bundle.decoder, true);
    let sk_node = g.input(sk);

    let mut terms = Vec::new();
    for tokens in paths.tokens {
        // a fresh wrong permutation per sample: the decoder's zero region
        // must cover the whole family, not one draw per batch
        let wrong = sample_wrong_spec(wrong_rng, &bundle.spec, bundle.family);
        let wrong_map = wrong.column_map();
        let (wfwd, winv) =
            (wrong_map.gather_map(Direction::Forward), wrong_map.gather_map(Direction::Inverse));
        let f_p_star =
            permuted_feature(&g, &b_star, tokens, &paths.fwd, &paths.inv, cfg.dropout, Some(drop_rng))?;
        // shadow features carry no dropout: the mimic region the decoder
        // learns should be as tight as the real substitutes it must match
        let f_p_shadow =
            permuted_feature(&g, &b_shadow, tokens, &paths.fwd, &paths.inv, 0.0, None)?;
        let f_wrong =
            permuted_feature(&g, &b_star, tokens, &wfwd, &winv, cfg.dropout, Some(drop_rng))?;
        let f_wrong_shadow = if shadow_ready {
            Some(permuted_feature(&g, &b_shadow, tokens, &wfwd, &winv, 0.0, None)?)
        } else {
            None
        };
        let f_plain_orig = plain_feature(&g, &b_orig, tokens, 0.0, None)?;
        let f_p_orig = permuted_feature(&g, &b_orig, tokens, &paths.fwd, &paths.inv, 0.0, None)?;

        let corr_star = g.scale(g.cosine(sk_node, forward_head(&g, &decoder, f_p_star)?)?, -1.0);
        let corr_shadow = if shadow_ready {
            Some(g.scale(g.cosine(sk_node, forward_head(&g, &decoder, f_p_shadow)?)?, -1.0))
        } else {
            None
        };
        let s_wrong = g.cosine(sk_node, forward_head(&g, &decoder, f_wrong)?)?;
        let uncorr_wrong = g.mul(s_wrong, s_wrong)?;
        let s_orig = g.cosine(sk_node, forward_head(&g, &decoder, f_plain_orig)?)?;
        let uncorr_orig = g.mul(s_orig, s_orig)?;
        let s_p_orig = g.cosine(sk_node, forward_head(&g, &decoder, f_p_orig)?)?;
        let uncorr_p_orig = g.mul(s_p_orig, s_p_orig)?;

        let mut sum = g.add(
            g.add(corr_star, g.add(uncorr_wrong, uncorr_orig)?)?,
            uncorr_p_orig,
        )?;
        if let Some(cs) = corr_shadow {
            sum = g.add(sum, cs)?;
        }
        if let Some(fw) = f_wrong_shadow {
            let s = g.cosine(sk_node, forward_head(&g, &decoder, fw)?)?;
            sum = g.add(sum, g.mul(s, s)?)?;
        }
        terms.push(sum);
    }
    let loss = mean_of(&g, &terms)?;
    let value = g.value(loss);
    g.backward(loss)?;
    opt.step()?;
    Ok(value)
}

/// L_B = L_DS(θ, θ*) + L_corr(sk, G(F(Z,P(θ*)))) + L_uncorr(sk, G(F(Z,θ*))).
fn backbone_step(
    theta_star: &TransformerWeights,
    theta: &TransformerWeights,
    bundle: &BundleS,
    sk: &Tensor,
    paths: &Paths,
    opt: &mut Optimizer,
    drop_rng: &mut ChaCha8Rng,
) -> TensorResult<f32> {
    let cfg = &bundle.embed;
    let g = Graph::new();
    let b_star = BoundModel::bind(&g, theta_star, Trainability::BackboneOnly);
    let b_orig = BoundModel::bind(&g, theta, Trainability::Frozen);
    let decoder = BoundHead::bind(&g, &bundle.decoder, false);
    let sk_node = g.input(sk);

    let mut terms = Vec::new();
    for tokens in paths.tokens {
        let f_orig = plain_feature(&g, &b_orig, tokens, 0.0, None)?;
        let f_star = plain_feature(&g, &b_star, tokens, cfg.dropout, Some(drop_rng))?;
        let f_p_star =
            permuted_feature(&g, &b_star, tokens, &paths.fwd, &paths.inv, cfg.dropout, Some(drop_rng))?;

        let match_term = g.scale(g.cosine(f_orig, f_star)?, -1.0);
        let corr = g.scale(g.cosine(sk_node, forward_head(&g, &decoder, f_p_star)?)?, -1.0);
        let s_plain = g.cosine(sk_node, forward_head(&g, &decoder, f_star)?)?;
        let uncorr = g.mul(s_plain, s_plain)?;
        terms.push(g.add(g.add(match_term, corr)?, uncorr)?);
    }
    let loss = mean_of(&g, &terms)?;
    let value = g.value(loss);
    g.backward(loss)?;
    opt.step()?;
    Ok(value)
}

// ── Extraction ──────────────────────────────────────────────────────────────

/// Extraction under an arbitrary input permutation (`None` = plain inputs).
pub fn extract_s_with_spec(
    weights: &TransformerWeights,
    bundle: &BundleS,
    spec: Option<&PermutationSpec>,
    set: &[Vec<u16>],
    provenance: Provenance,
) -> TensorResult<WrReport> {
    let mut samples = Vec::with_capacity(set.len());
    for tokens in set {
        let decoded = decode_sample(weights, &bundle.decoder, tokens, spec)?;
        let sim = cosine_slice(&bundle.sk, &decoded);
        samples.push(SampleScore::Similarity { sim, hit: sim > bundle.epsilon_wm });
    }
    Ok(WrReport::from_samples("S", samples, Some(bundle.epsilon_wm), None, provenance))
}

/// WR = |{x : sim(G(F(Z·P, θ')·P⁻¹), sk) > ε_wm}| / |D|.
pub fn extract_s(
    weights: &TransformerWeights,
    bundle: &BundleS,
    set: &[Vec<u16>],
    provenance: Provenance,
) -> TensorResult<WrReport> {
    extract_s_with_spec(weights, bundle, Some(&bundle.spec), set, provenance)
}

/// Re-threshold recorded similarities: WR as a function of ε_wm.
pub fn wr_at_threshold(report: &WrReport, epsilon: f32) -> f64 {
    let hits = report
        .samples
        .iter()
        .filter(|s| match s {
            SampleScore::Similarity { sim, .. } => *sim > epsilon,
            SampleScore::Class { hit, .. } => *hit,
        })
        .count();
    hits as f64 / report.n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;
    use crate::transformer::ModelConfig;

    #[test]
    fn loss_primitive_identities() {
        let sk = vec![1.0, 0.0, 2.0];
        assert!((loss_corr(&sk, &sk) + 1.0).abs() < 1e-6);
        assert!((loss_uncorr(&sk, &sk) - 1.0).abs() < 1e-6);
        let neg: Vec<f32> = sk.iter().map(|v| -v).collect();
        assert!((loss_corr(&sk, &neg) - 1.0).abs() < 1e-6);
        assert!((loss_uncorr(&sk, &neg) - 1.0).abs() < 1e-6);
        let orth = vec![0.0, 5.0, 0.0];
        assert!(loss_corr(&sk, &orth).abs() < 1e-6);
        assert!(loss_uncorr(&sk, &orth).abs() < 1e-6);
    }

    #[test]
    fn shadow_at_optimum_has_vanishing_gradient() {
        let hub = SeedHub::new(90);
        let cfg = ModelConfig::toy();
        let theta = TransformerWeights::random_init(cfg, &mut hub.stream("m"));
        let theta_s = theta.deep_clone();
        let data = SyntheticDataset::generate(DatasetConfig::toy(), 8, &mut hub.stream("d"));
        let batch: Vec<Vec<u16>> = data.samples.iter().map(|s| s.tokens.clone()).collect();
        let mut opt = Optimizer::adam(1e-4, theta_s.all_params());
        let (loss, norm) = shadow_train_step(&theta_s, &theta, &batch, &mut opt).unwrap();
        assert!((loss + 1.0).abs() < 1e-5, "cosine of identical models is 1, loss {loss}");
        assert!(norm < 1e-3, "gradient norm at the optimum: {norm}");
    }

    #[test]
    fn shadow_matching_loss_decreases_over_steps() {
        let hub = SeedHub::new(91);
        let cfg = ModelConfig::toy();
        let theta = TransformerWeights::random_init(cfg, &mut hub.stream("m"));
        let theta_s = TransformerWeights::random_init(cfg, &mut hub.stream("s"));
        let data = SyntheticDataset::generate(DatasetConfig::toy(), 64, &mut hub.stream("d"));
        let mut opt = Optimizer::adam(1e-3, theta_s.all_params());
        let mut rng = hub.stream("rng");
        let mut losses = Vec::new();
        for step in 0..50 {
            let batch: Vec<Vec<u16>> = data
                .batch_indices(16, step)
                .into_iter()
                .map(|i| data.samples[i].tokens.clone())
                .collect();
            let (l, _) = shadow_train_step(&theta_s, &theta, &batch, &mut opt).unwrap();
            losses.push(l);
            assert!(l > -1.0, "cosine loss is bounded below by −1, got {l}");
        }
        let head: f32 = losses[..10].iter().sum::<f32>() / 10.0;
        let tail: f32 = losses[40..].iter().sum::<f32>() / 10.0;
        assert!(tail < head, "matching loss should trend down: {head} → {tail}");
        // allow some non-monotone steps, but not a majority
        let ups = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(ups < 25, "{ups} of 49 steps went up");
    }

    #[test]
    fn wrong_spec_sampler_never_returns_the_true_spec() {
        let hub = SeedHub::new(92);
        let mut rng = hub.stream("w");
        let spec = sample(&mut rng, 16, 2, PermutationFamily::HeadsAndWithin);
        for _ in 0..100 {
            let w = sample_wrong_spec(&mut rng, &spec, PermutationFamily::HeadsAndWithin);
            assert_ne!(w, spec);
        }
    }

    #[test]
    fn wr_threshold_resweep_counts_correctly() {
        let samples = vec![
            SampleScore::Similarity { sim: 0.9, hit: true },
            SampleScore::Similarity { sim: 0.4, hit: false },
            SampleScore::Similarity { sim: 0.95, hit: true },
        ];
        let report =
            WrReport::from_samples("S", samples, Some(0.5), None, Provenance::default());
        assert_eq!(report.wr, 2.0 / 3.0);
        assert_eq!(wr_at_threshold(&report, 0.3), 1.0);
        assert_eq!(wr_at_threshold(&report, 0.92), 1.0 / 3.0);
        assert_eq!(wr_at_threshold(&report, 0.99), 0.0);
    }

    #[test]
    fn short_embedding_runs_and_moves_decoder() {
        let hub = SeedHub::new(93);
        let cfg = ModelConfig::toy();
        let theta = TransformerWeights::random_init(cfg, &mut hub.stream("m"));
        let theta_star = theta.deep_clone();
        let embed = EmbedConfigS { steps: 3, batch: 4, ..EmbedConfigS::default() };
        let bundle =
            BundleS::generate(cfg.d, cfg.n_heads, PermutationFamily::HeadsAndWithin, embed, &hub);
        let before: Vec<Vec<f32>> =
            bundle.decoder.params().iter().map(|p| p.borrow().data().to_vec()).collect();
        let data = SyntheticDataset::generate(DatasetConfig::toy(), 32, &mut hub.stream("d"));
        let trace = embed_s(&theta_star, &theta, &bundle, &data, &hub).unwrap();
        assert_eq!(trace.loss_backbone.len(), 3);
        let after: Vec<Vec<f32>> =
            bundle.decoder.params().iter().map(|p| p.borrow().data().to_vec()).collect();
        assert_ne!(before, after, "decoder must train");
        assert!(theta.max_abs_diff(&theta_star) > 0.0, "θ* must move");
    }
}
