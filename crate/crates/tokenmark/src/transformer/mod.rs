//! A small encoder-only Transformer backbone with task heads.
//!
//! The backbone is a stack of pre-LN blocks: layernorm → multi-head
//! self-attention → residual, then layernorm → MLP → residual. The multi-head
//! split is contiguous feature blocks of size d/n_heads, which makes the
//! head-constrained permutation family well defined. Linear layers follow the
//! `y = x·Wᵀ + b` convention with `W: [out, in]`.
//!
//! Heads are kept outside the backbone weight set: the downstream classifier
//! and the watermark decoder never participate in permutation transport.

mod forward;
pub mod io;

pub use forward::{forward_backbone, forward_backbone_dropout, forward_head, BoundHead, BoundModel, Trainability};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Param, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, d=16, 2 heads, MLP 32, vocab 64, seq 16.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 2,
            d: 16,
            n_heads: 2,
            d_mlp: 32,
            vocab_size: 64,
            max_seq_len: 16,
            activation: Activation::Relu,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(format!("d = {} must divide into {} heads", self.d, self.n_heads));
        }
        if self.d_mlp < self.d {
            return Err(format!("d_mlp = {} must be ≥ d = {}", self.d_mlp, self.d));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err("n_layers, vocab_size and max_seq_len must be positive".into());
        }
        Ok(())
    }
}

// ── Weights ─────────────────────────────────────────────────────────────────

/// One encoder block: θ = {W_Q, W_K, W_V, W_a, W_1, W_2, biases, γ, β}.
#[derive(Clone)]
pub struct LayerWeights {
    pub w_q: Param,
    pub b_q: Param,
    pub w_k: Param,
    pub b_k: Param,
    pub w_v: Param,
    pub b_v: Param,
    pub w_a: Param,
    pub b_a: Param,
    pub ln1_gamma: Param,
    pub ln1_beta: Param,
    pub w_1: Param,
    pub b_1: Param,
    pub w_2: Param,
    pub b_2: Param,
    pub ln2_gamma: Param,
    pub ln2_beta: Param,
}

impl LayerWeights {
    fn random_init(idx: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d;
        let dm = cfg.d_mlp;
        let attn_std = 1.0 / (d as f32).sqrt();
        let mlp_in_std = 1.0 / (d as f32).sqrt();
        let mlp_out_std = 1.0 / (dm as f32).sqrt();
        let p = |name: String, t: Tensor| Param::new(name, t);
        let pre = format!("layer{idx}");
        LayerWeights {
            w_q: p(format!("{pre}.attn.w_q"), Tensor::randn(rng, &[d, d], attn_std)),
            b_q: p(format!("{pre}.attn.b_q"), Tensor::zeros(&[d])),
            w_k: p(format!("{pre}.attn.w_k"), Tensor::randn(rng, &[d, d], attn_std)),
            b_k: p(format!("{pre}.attn.b_k"), Tensor::zeros(&[d])),
            w_v: p(format!("{pre}.attn.w_v"), Tensor::randn(rng, &[d, d], attn_std)),
            b_v: p(format!("{pre}.attn.b_v"), Tensor::zeros(&[d])),
            w_a: p(format!("{pre}.attn.w_a"), Tensor::randn(rng, &[d, d], attn_std)),
            b_a: p(format!("{pre}.attn.b_a"), Tensor::zeros(&[d])),
            ln1_gamma: p(format!("{pre}.ln1.gamma"), ones(d)),
            ln1_beta: p(format!("{pre}.ln1.beta"), Tensor::zeros(&[d])),
            w_1: p(format!("{pre}.mlp.w_1"), Tensor::randn(rng, &[dm, d], mlp_in_std)),
            b_1: p(format!("{pre}.mlp.b_1"), Tensor::zeros(&[dm])),
            w_2: p(format!("{pre}.mlp.w_2"), Tensor::randn(rng, &[d, dm], mlp_out_std)),
            b_2: p(format!("{pre}.mlp.b_2"), Tensor::zeros(&[d])),
            ln2_gamma: p(format!("{pre}.ln2.gamma"), ones(d)),
            ln2_beta: p(format!("{pre}.ln2.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![
            self.w_q.clone(),
            self.b_q.clone(),
            self.w_k.clone(),
            self.b_k.clone(),
            self.w_v.clone(),
            self.b_v.clone(),
            self.w_a.clone(),
            self.b_a.clone(),
            self.ln1_gamma.clone(),
            self.ln1_beta.clone(),
            self.w_1.clone(),
            self.b_1.clone(),
            self.w_2.clone(),
            self.b_2.clone(),
            self.ln2_gamma.clone(),
            self.ln2_beta.clone(),
        ]
    }

    fn deep_clone(&self) -> Self {
        LayerWeights {
            w_q: self.w_q.deep_clone(),
            b_q: self.b_q.deep_clone(),
            w_k: self.w_k.deep_clone(),
            b_k: self.b_k.deep_clone(),
            w_v: self.w_v.deep_clone(),
            b_v: self.b_v.deep_clone(),
            w_a: self.w_a.deep_clone(),
            b_a: self.b_a.deep_clone(),
            ln1_gamma: self.ln1_gamma.deep_clone(),
            ln1_beta: self.ln1_beta.deep_clone(),
            w_1: self.w_1.deep_clone(),
            b_1: self.b_1.deep_clone(),
            w_2: self.w_2.deep_clone(),
            b_2: self.b_2.deep_clone(),
            ln2_gamma: self.ln2_gamma.deep_clone(),
            ln2_beta: self.ln2_beta.deep_clone(),
        }
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::from_vec(&[n], vec![1.0; n]).expect("length matches")
}

/// The full weight set: embedding tables plus the encoder stack.
#[derive(Clone)]
pub struct TransformerWeights {
    config: ModelConfig,
    pub token_table: Param,
    pub pos_table: Param,
    layers: Vec<LayerWeights>,
}

impl TransformerWeights {
    pub fn random_init(config: ModelConfig, rng: &mut impl Rng) -> Self {
        config.validate().expect("valid model config");
        let token_table = Param::new(
            "embed.token",
            Tensor::randn(rng, &[config.vocab_size, config.d], 0.5),
        );
        let pos_table = Param::new(
            "embed.pos",
            Tensor::randn(rng, &[config.max_seq_len, config.d], 0.5),
        );
        let layers =
            (0..config.n_layers).map(|i| LayerWeights::random_init(i, &config, rng)).collect();
        TransformerWeights { config, token_table, pos_table, layers }
    }

    /// All-zero weights (γ = 1) of the given shape; used by the container
    /// reader and by hand-traced tests.
    pub fn zeros(config: ModelConfig) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let w = TransformerWeights::random_init(config, &mut rng);
        for p in w.all_params().iter() {
            let mut t = p.borrow_mut();
            let is_gamma = p.name().ends_with("gamma");
            for v in t.data_mut() {
                *v = if is_gamma { 1.0 } else { 0.0 };
            }
        }
        w
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// Encoder parameters only — the set the permutation transport acts on
    /// and the set updated by watermark embedding.
    pub fn backbone_params(&self) -> ParamSet {
        let mut set = ParamSet::default();
        for l in &self.layers {
            for p in l.params() {
                set.push(p);
            }
        }
        set
    }

    pub fn embedding_params(&self) -> ParamSet {
        ParamSet::new(vec![self.token_table.clone(), self.pos_table.clone()])
    }

    pub fn all_params(&self) -> ParamSet {
        let mut set = self.embedding_params();
        set.extend(&self.backbone_params());
        set
    }

    pub fn deep_clone(&self) -> Self {
        TransformerWeights {
            config: self.config,
            token_table: self.token_table.deep_clone(),
            pos_table: self.pos_table.deep_clone(),
            layers: self.layers.iter().map(LayerWeights::deep_clone).collect(),
        }
    }

    /// Copy all values from another weight set of identical config.
    pub fn copy_from(&self, other: &TransformerWeights) {
        assert_eq!(self.config, other.config, "copy_from config mismatch");
        for (dst, src) in self.all_params().iter().zip(other.all_params().iter()) {
            dst.copy_from(src);
        }
    }

    /// Canonical (name, param) listing; serialization order.
    pub fn named_tensors(&self) -> Vec<(String, Param)> {
        self.all_params().iter().map(|p| (p.name().to_string(), p.clone())).collect()
    }

    /// Max |a−b| over all parameters.
    pub fn max_abs_diff(&self, other: &TransformerWeights) -> f32 {
        let mut worst = 0.0f32;
        for (a, b) in self.all_params().iter().zip(other.all_params().iter()) {
            let (ta, tb) = (a.borrow(), b.borrow());
            for (x, y) in ta.data().iter().zip(tb.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

// ── Task heads ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    FirstToken,
    MeanPool,
}

#[derive(Clone)]
pub enum HeadKind {
    Identity,
    Linear { w: Param, b: Param },
    /// Two linear layers with a ReLU between.
    Mlp2 { w1: Param, b1: Param, w2: Param, b2: Param },
}

/// A head applied to reduced backbone features: the downstream classifier
/// `DS`, the watermark decoder `G`, or a bare identity for probing.
#[derive(Clone)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub reduction: Reduction,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl TaskHead {
    pub fn identity(dim: usize, reduction: Reduction) -> Self {
        TaskHead { kind: HeadKind::Identity, reduction, in_dim: dim, out_dim: dim }
    }

    pub fn linear(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        reduction: Reduction,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Param::new(format!("{name}.w"), Tensor::randn(rng, &[out_dim, in_dim], 1.0 / (in_dim as f32).sqrt()));
        let b = Param::new(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        TaskHead { kind: HeadKind::Linear { w, b }, reduction, in_dim, out_dim }
    }

    pub fn mlp2(
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        reduction: Reduction,
        rng: &mut impl Rng,
    ) -> Self {
        let w1 = Param::new(format!("{name}.w1"), Tensor::randn(rng, &[hidden, in_dim], 1.0 / (in_dim as f32).sqrt()));
        let b1 = Param::new(format!("{name}.b1"), Tensor::zeros(&[hidden]));
        let w2 = Param::new(format!("{name}.w2"), Tensor::randn(rng, &[out_dim, hidden], 1.0 / (hidden as f32).sqrt()));
        let b2 = Param::new(format!("{name}.b2"), Tensor::zeros(&[out_dim]));
        TaskHead { kind: HeadKind::Mlp2 { w1, b1, w2, b2 }, reduction, in_dim, out_dim }
    }

    pub fn params(&self) -> ParamSet {
        match &self.kind {
            HeadKind::Identity => ParamSet::default(),
            HeadKind::Linear { w, b } => ParamSet::new(vec![w.clone(), b.clone()]),
            HeadKind::Mlp2 { w1, b1, w2, b2 } => {
                ParamSet::new(vec![w1.clone(), b1.clone(), w2.clone(), b2.clone()])
            }
        }
    }

    pub fn deep_clone(&self) -> Self {
        let kind = match &self.kind {
            HeadKind::Identity => HeadKind::Identity,
            HeadKind::Linear { w, b } => {
                HeadKind::Linear { w: w.deep_clone(), b: b.deep_clone() }
            }
            HeadKind::Mlp2 { w1, b1, w2, b2 } => HeadKind::Mlp2 {
                w1: w1.deep_clone(),
                b1: b1.deep_clone(),
                w2: w2.deep_clone(),
                b2: b2.deep_clone(),
            },
        };
        TaskHead { kind, reduction: self.reduction, in_dim: self.in_dim, out_dim: self.out_dim }
    }

    pub fn named_tensors(&self) -> Vec<(String, Param)> {
        self.params().iter().map(|p| (p.name().to_string(), p.clone())).collect()
    }
}
