//! Overwriting: embed a second watermark over an existing one.
//!
//! The adversary repeats the owner's embedding procedure on the stolen model
//! with its own fresh secret material (a different permutation). The guard
//! rejects a second embedding under the very same permutation — that would
//! be re-embedding, not overwriting.

use super::{AttackError, AttackResult};
use crate::data::SyntheticDataset;
use crate::permutation::PermutationSpec;
use crate::rng::SeedHub;
use crate::watermark::scheme_b::{embed_b, BundleB, EmbedTraceB};
use crate::watermark::scheme_s::{embed_s, BundleS, EmbedTraceS};
use crate::transformer::{TaskHead, TransformerWeights};

/// Scheme-B overwrite: run `embed_b` on the stolen model with the adversary's
/// bundle, anchoring on the published downstream head. `original_spec` is
/// only used by the guard.
pub fn attack_overwrite_b(
    stolen: &TransformerWeights,
    adversary_bundle: &BundleB,
    original_spec: &PermutationSpec,
    ds_head: &TaskHead,
    data: &SyntheticDataset,
    hub: &SeedHub,
) -> AttackResult<EmbedTraceB> {
    if adversary_bundle.spec == *original_spec {
        return Err(AttackError::Precondition(
            "overwrite requires a permutation different from the embedded one".into(),
        ));
    }
    Ok(embed_b(stolen, adversary_bundle, ds_head, data, hub)?)
}

/// Scheme-S overwrite: the adversary snapshots the stolen model as its own
/// frozen reference and runs the full three-loss protocol with new secrets.
pub fn attack_overwrite_s(
    stolen: &TransformerWeights,
    adversary_bundle: &BundleS,
    original_spec: &PermutationSpec,
    data: &SyntheticDataset,
    hub: &SeedHub,
) -> AttackResult<EmbedTraceS> {
    if adversary_bundle.spec == *original_spec {
        return Err(AttackError::Precondition(
            "overwrite requires a permutation different from the embedded one".into(),
        ));
    }
    let reference = stolen.deep_clone();
    Ok(embed_s(stolen, &reference, adversary_bundle, data, hub)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;
    use crate::permutation::PermutationFamily;
    use crate::transformer::ModelConfig;
    use crate::watermark::scheme_b::EmbedConfigB;

    #[test]
    fn same_spec_overwrite_is_rejected() {
        let hub = SeedHub::new(130);
        let cfg = ModelConfig::toy();
        let weights = TransformerWeights::random_init(cfg, &mut hub.stream("m"));
        let bundle = BundleB::generate(
            cfg.d,
            cfg.n_heads,
            PermutationFamily::HeadsAndWithin,
            10,
            0,
            EmbedConfigB::default(),
            &hub,
        );
        let data = SyntheticDataset::generate(DatasetConfig::toy(), 32, &mut hub.stream("d"));
        let head = TaskHead::linear(
            "head.ds",
            cfg.d,
            10,
            crate::transformer::Reduction::FirstToken,
            &mut hub.stream("h"),
        );
        let spec = bundle.spec.clone();
        let err = attack_overwrite_b(&weights, &bundle, &spec, &head, &data, &hub).unwrap_err();
        assert!(matches!(err, AttackError::Precondition(_)));
    }
}
