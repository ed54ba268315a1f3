//! Graph-side forward passes for the backbone and heads.
//!
//! Weights are bound onto a graph once per pass via [`BoundModel::bind`];
//! the same binding can serve several forward calls on that graph, and
//! gradients accumulate into the shared parameters on backward.

use rand::RngCore;

use super::{Activation, HeadKind, ModelConfig, Reduction, TaskHead, TransformerWeights};
use crate::tensor::{Graph, NodeId, TensorError, TensorResult};

/// Which parameters of a bound model receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainability {
    Frozen,
    /// Encoder layers train, embedding tables stay fixed (watermark embedding).
    BackboneOnly,
    /// Everything trains (main-task training, fine-tuning attacks).
    All,
}

pub struct BoundLayer {
    w_q: NodeId,
    b_q: NodeId,
    w_k: NodeId,
    b_k: NodeId,
    w_v: NodeId,
    b_v: NodeId,
    w_a: NodeId,
    b_a: NodeId,
    ln1_gamma: NodeId,
    ln1_beta: NodeId,
    w_1: NodeId,
    b_1: NodeId,
    w_2: NodeId,
    b_2: NodeId,
    ln2_gamma: NodeId,
    ln2_beta: NodeId,
}

pub struct BoundModel {
    pub config: ModelConfig,
    token_table: NodeId,
    pos_table: NodeId,
    layers: Vec<BoundLayer>,
}

impl BoundModel {
    pub fn bind(g: &Graph, w: &TransformerWeights, mode: Trainability) -> Self {
        let bind_embed = |p| match mode {
            Trainability::All => g.param(p),
            _ => g.frozen(p),
        };
        let bind_layer = |p| match mode {
            Trainability::Frozen => g.frozen(p),
            _ => g.param(p),
        };
        let layers = w
            .layers()
            .iter()
            .map(|l| BoundLayer {
                w_q: bind_layer(&l.w_q),
                b_q: bind_layer(&l.b_q),
                w_k: bind_layer(&l.w_k),
                b_k: bind_layer(&l.b_k),
                w_v: bind_layer(&l.w_v),
                b_v: bind_layer(&l.b_v),
                w_a: bind_layer(&l.w_a),
                b_a: bind_layer(&l.b_a),
                ln1_gamma: bind_layer(&l.ln1_gamma),
                ln1_beta: bind_layer(&l.ln1_beta),
                w_1: bind_layer(&l.w_1),
                b_1: bind_layer(&l.b_1),
                w_2: bind_layer(&l.w_2),
                b_2: bind_layer(&l.b_2),
                ln2_gamma: bind_layer(&l.ln2_gamma),
                ln2_beta: bind_layer(&l.ln2_beta),
            })
            .collect();
        BoundModel {
            config: *w.config(),
            token_table: bind_embed(&w.token_table),
            pos_table: bind_embed(&w.pos_table),
            layers,
        }
    }

    /// Z = token embedding + absolute position embedding, row i ↔ position i.
    pub fn embed(&self, g: &Graph, tokens: &[u16]) -> TensorResult<NodeId> {
        if tokens.len() > self.config.max_seq_len {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                detail: format!("{} tokens > max_seq_len {}", tokens.len(), self.config.max_seq_len),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| (t as usize) >= self.config.vocab_size) {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                detail: format!("token id {} ≥ vocab_size {}", bad, self.config.vocab_size),
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = g.gather_rows(self.token_table, &ids)?;
        let pos = g.gather_rows(self.pos_table, &(0..tokens.len()).collect::<Vec<_>>())?;
        g.add(tok, pos)
    }
}

/// F(Z, θ): run the encoder stack. Any non-finite block output aborts with a
/// numeric fault naming the offending layer.
pub fn forward_backbone(g: &Graph, model: &BoundModel, z: NodeId) -> TensorResult<NodeId> {
    forward_inner(g, model, z, None)
}

/// Same as [`forward_backbone`] with dropout (inverted, given rate) applied
/// to each block output; used only during scheme-S embedding.
pub fn forward_backbone_dropout(
    g: &Graph,
    model: &BoundModel,
    z: NodeId,
    rate: f32,
    rng: &mut dyn RngCore,
) -> TensorResult<NodeId> {
    forward_inner(g, model, z, Some((rate, rng)))
}

fn forward_inner(
    g: &Graph,
    model: &BoundModel,
    z: NodeId,
    mut dropout: Option<(f32, &mut dyn RngCore)>,
) -> TensorResult<NodeId> {
    let cfg = &model.config;
    let (_, cols) = g.shape(z);
    if cols != cfg.d {
        return Err(TensorError::ShapeMismatch {
            op: "forward_backbone",
            detail: format!("input has {} columns, model d = {}", cols, cfg.d),
        });
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut x = z;
    for (li, layer) in model.layers.iter().enumerate() {
        // attention sublayer, pre-LN
        let h = g.layernorm(x, layer.ln1_gamma, layer.ln1_beta)?;
        let q = g.add_bias(g.matmul(h, g.transpose(layer.w_q))?, layer.b_q)?;
        let k = g.add_bias(g.matmul(h, g.transpose(layer.w_k))?, layer.b_k)?;
        let v = g.add_bias(g.matmul(h, g.transpose(layer.w_v))?, layer.b_v)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hi in 0..cfg.n_heads {
            let qh = g.slice_cols(q, hi * dh, dh)?;
            let kh = g.slice_cols(k, hi * dh, dh)?;
            let vh = g.slice_cols(v, hi * dh, dh)?;
            let scores = g.scale(g.matmul(qh, g.transpose(kh))?, scale);
            let probs = g.softmax_rows(scores);
            heads.push(g.matmul(probs, vh)?);
        }
        let merged = g.concat_cols(&heads)?;
        let attn = g.add_bias(g.matmul(merged, g.transpose(layer.w_a))?, layer.b_a)?;
        x = g.add(x, attn)?;

        // MLP sublayer, pre-LN
        let h2 = g.layernorm(x, layer.ln2_gamma, layer.ln2_beta)?;
        let a1 = g.add_bias(g.matmul(h2, g.transpose(layer.w_1))?, layer.b_1)?;
        let act = match cfg.activation {
            Activation::Relu => g.relu(a1),
            Activation::Gelu => g.gelu(a1),
        };
        let a2 = g.add_bias(g.matmul(act, g.transpose(layer.w_2))?, layer.b_2)?;
        x = g.add(x, a2)?;

        if let Some((rate, rng)) = dropout.as_mut() {
            x = g.dropout(x, *rate, rng);
        }
        if !g.is_finite(x) {
            return Err(TensorError::NumericFault {
                op: "forward_backbone",
                detail: format!("non-finite activation in layer {li} output"),
            });
        }
    }
    Ok(x)
}

// ── Heads ───────────────────────────────────────────────────────────────────

pub struct BoundHead {
    reduction: Reduction,
    kind: BoundHeadKind,
}

enum BoundHeadKind {
    Identity,
    Linear { w: NodeId, b: NodeId },
    Mlp2 { w1: NodeId, b1: NodeId, w2: NodeId, b2: NodeId },
}

impl BoundHead {
    pub fn bind(g: &Graph, head: &TaskHead, trainable: bool) -> Self {
        let bind = |p| if trainable { g.param(p) } else { g.frozen(p) };
        let kind = match &head.kind {
            HeadKind::Identity => BoundHeadKind::Identity,
            HeadKind::Linear { w, b } => BoundHeadKind::Linear { w: bind(w), b: bind(b) },
            HeadKind::Mlp2 { w1, b1, w2, b2 } => BoundHeadKind::Mlp2 {
                w1: bind(w1),
                b1: bind(b1),
                w2: bind(w2),
                b2: bind(b2),
            },
        };
        BoundHead { reduction: head.reduction, kind }
    }
}

/// Reduce the n×d feature matrix per the head's reduction, then apply its
/// layers. Output is a 1×out_dim row.
pub fn forward_head(g: &Graph, head: &BoundHead, features: NodeId) -> TensorResult<NodeId> {
    let reduced = match head.reduction {
        Reduction::FirstToken => g.select_row(features, 0)?,
        Reduction::MeanPool => g.mean_rows(features),
    };
    match &head.kind {
        BoundHeadKind::Identity => Ok(reduced),
        BoundHeadKind::Linear { w, b } => {
            g.add_bias(g.matmul(reduced, g.transpose(*w))?, *b)
        }
        BoundHeadKind::Mlp2 { w1, b1, w2, b2 } => {
            let h = g.relu(g.add_bias(g.matmul(reduced, g.transpose(*w1))?, *b1)?);
            g.add_bias(g.matmul(h, g.transpose(*w2))?, *b2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedHub;
    use crate::tensor::Tensor;

    fn toy_model(seed: u64) -> TransformerWeights {
        let hub = SeedHub::new(seed);
        TransformerWeights::random_init(ModelConfig::toy(), &mut hub.stream("model"))
    }

    #[test]
    fn embed_zero_tables_gives_zero_features() {
        let w = TransformerWeights::zeros(ModelConfig::toy());
        let g = Graph::inference();
        let bound = BoundModel::bind(&g, &w, Trainability::Frozen);
        let z = bound.embed(&g, &[1, 2, 3]).unwrap();
        assert!(g.data(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_one_hot_rows_reproduced() {
        let mut cfg = ModelConfig::toy();
        cfg.vocab_size = 16; // one-hot fits exactly in d
        let w = TransformerWeights::zeros(cfg);
        {
            let mut table = w.token_table.borrow_mut();
            let d = cfg.d;
            for i in 0..cfg.vocab_size {
                table.data_mut()[i * d + i] = 1.0;
            }
        }
        let g = Graph::inference();
        let bound = BoundModel::bind(&g, &w, Trainability::Frozen);
        let z = bound.embed(&g, &[3, 7]).unwrap();
        let data = g.data(z);
        assert_eq!(data[3], 1.0);
        assert_eq!(data[cfg.d + 7], 1.0);
        assert_eq!(data.iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn positions_distinguish_repeated_tokens() {
        let w = toy_model(21);
        let g = Graph::inference();
        let bound = BoundModel::bind(&g, &w, Trainability::Frozen);
        let z = bound.embed(&g, &[5, 5]).unwrap();
        let data = g.data(z);
        let d = w.config().d;
        assert_ne!(&data[..d], &data[d..], "nonzero position table separates rows");
    }

    #[test]
    fn embed_rejects_out_of_vocab() {
        let w = toy_model(22);
        let g = Graph::inference();
        let bound = BoundModel::bind(&g, &w, Trainability::Frozen);
        assert!(bound.embed(&g, &[64]).is_err());
        assert!(bound.embed(&g, &[0; 17]).is_err());
    }

    #[test]
    fn zero_weight_layer_propagates_residual_stream() {
        // With all-zero layer weights and γ=1 β=0, attention and MLP outputs
        // are exactly zero, so the residual stream carries Z through.
        let mut cfg = ModelConfig::toy();
        cfg.n_layers = 1;
        let w = TransformerWeights::zeros(cfg);
        let hub = SeedHub::new(23);
        let z0 = Tensor::randn(&mut hub.stream("z"), &[4, cfg.d], 1.0);
        let g = Graph::inference();
        let bound = BoundModel::bind(&g, &w, Trainability::Frozen);
        let z = g.input(&z0);
        let y = forward_backbone(&g, &bound, z).unwrap();
        assert_eq!(g.data(y), z0.data(), "zero blocks are identity through residuals");
    }

    #[test]
    fn identity_head_first_token_returns_row_zero() {
        let head = TaskHead::identity(4, Reduction::FirstToken);
        let g = Graph::inference();
        let feats = g.input(&Tensor::from_vec(&[2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let bound = BoundHead::bind(&g, &head, false);
        let out = forward_head(&g, &bound, feats).unwrap();
        assert_eq!(g.data(out), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn one_hot_linear_head_selects_coordinates() {
        let hub = SeedHub::new(24);
        let mut head = TaskHead::linear("h", 4, 2, Reduction::FirstToken, &mut hub.stream("head"));
        if let HeadKind::Linear { w, .. } = &mut head.kind {
            let mut t = w.borrow_mut();
            t.data_mut().copy_from_slice(&[0., 0., 1., 0., 1., 0., 0., 0.]);
        }
        let g = Graph::inference();
        let feats = g.input(&Tensor::from_vec(&[1, 4], vec![10., 20., 30., 40.]).unwrap());
        let bound = BoundHead::bind(&g, &head, false);
        let out = forward_head(&g, &bound, feats).unwrap();
        assert_eq!(g.data(out), vec![30., 10.]);
    }

    #[test]
    fn mlp2_head_output_dim_matches_secret_dim() {
        let hub = SeedHub::new(25);
        let head = TaskHead::mlp2("g", 16, 32, 16, Reduction::FirstToken, &mut hub.stream("g"));
        let g = Graph::inference();
        let feats = g.input(&Tensor::randn(&mut hub.stream("f"), &[3, 16], 1.0));
        let bound = BoundHead::bind(&g, &head, false);
        let out = forward_head(&g, &bound, feats).unwrap();
        assert_eq!(g.shape(out), (1, 16));
    }

    #[test]
    fn forward_is_deterministic() {
        let w = toy_model(26);
        let hub = SeedHub::new(26);
        let z0 = Tensor::randn(&mut hub.stream("z"), &[8, 16], 1.0);
        let run = || {
            let g = Graph::inference();
            let bound = BoundModel::bind(&g, &w, Trainability::Frozen);
            let y = forward_backbone(&g, &bound, g.input(&z0)).unwrap();
            g.data(y)
        };
        assert_eq!(run(), run());
    }
}
