//! Watermark embedding and extraction.
//!
//! Scheme B turns permuted inputs into a secret target label through a
//! frozen random linear decoder; scheme S aligns a trainable MLP decoder's
//! output with a secret vector under the secret permutation while pushing
//! every other path toward zero similarity. Both report extraction as a
//! watermark rate over an arbitrary extraction set, with per-sample scores.

pub mod bundle;
pub mod scheme_b;
pub mod scheme_s;

use serde::{Deserialize, Serialize};

use crate::permutation::{Direction, PermutationSpec};
use crate::tensor::{Graph, TensorResult};
use crate::transformer::{
    forward_backbone, forward_head, BoundHead, BoundModel, TaskHead, Trainability,
    TransformerWeights,
};

/// Per-sample decode outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleScore {
    /// Scheme B / trigger baseline: full decoder logits and the argmax.
    Class { logits: Vec<f32>, decoded: usize, hit: bool },
    /// Scheme S: cosine similarity against the secret vector.
    Similarity { sim: f32, hit: bool },
}

impl SampleScore {
    pub fn hit(&self) -> bool {
        match self {
            SampleScore::Class { hit, .. } => *hit,
            SampleScore::Similarity { hit, .. } => *hit,
        }
    }
}

/// Where a watermark-rate measurement came from.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub bundle: String,
    pub extraction_set: String,
    pub seed: u64,
}

/// Watermark rate over an extraction set, with per-sample evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WrReport {
    pub scheme: String,
    pub wr: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_label: Option<usize>,
    pub samples: Vec<SampleScore>,
    pub provenance: Provenance,
}

impl WrReport {
    pub fn from_samples(
        scheme: &str,
        samples: Vec<SampleScore>,
        threshold: Option<f32>,
        target_label: Option<usize>,
        provenance: Provenance,
    ) -> Self {
        let n = samples.len();
        let hits = samples.iter().filter(|s| s.hit()).count();
        WrReport {
            scheme: scheme.to_string(),
            wr: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            n,
            threshold,
            target_label,
            samples,
            provenance,
        }
    }
}

/// Decode one sample: embed, permute (when given), run the backbone,
/// de-permute, reduce and apply the decoder head. The permute/de-permute
/// bracket is exactly the extraction procedure; `None` runs the plain path.
pub fn decode_sample(
    weights: &TransformerWeights,
    decoder: &TaskHead,
    tokens: &[u16],
    spec: Option<&PermutationSpec>,
) -> TensorResult<Vec<f32>> {
    let g = Graph::inference();
    let bound = BoundModel::bind(&g, weights, Trainability::Frozen);
    let mut z = bound.embed(&g, tokens)?;
    let map = spec.map(|s| s.column_map());
    if let Some(m) = &map {
        z = g.gather_cols(z, &m.gather_map(Direction::Forward))?;
    }
    let mut y = forward_backbone(&g, &bound, z)?;
    if let Some(m) = &map {
        y = g.gather_cols(y, &m.gather_map(Direction::Inverse))?;
    }
    let head = BoundHead::bind(&g, decoder, false);
    Ok(g.data(forward_head(&g, &head, y)?))
}

/// First-token backbone feature of one sample (the representation that
/// extraction-style attacks can observe).
pub fn first_token_feature(
    weights: &TransformerWeights,
    tokens: &[u16],
) -> TensorResult<Vec<f32>> {
    let id = TaskHead::identity(weights.config().d, crate::transformer::Reduction::FirstToken);
    decode_sample(weights, &id, tokens, None)
}

pub fn cosine_slice(u: &[f32], v: &[f32]) -> f32 {
    let dot: f32 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f32 = u.iter().map(|a| a * a).sum::<f32>().sqrt();
    let nv: f32 = v.iter().map(|a| a * a).sum::<f32>().sqrt();
    dot / (nu * nv)
}
