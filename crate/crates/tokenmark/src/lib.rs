//! tokenmark — a desk-scale laboratory for permutation-equivariance
//! watermarking of Transformer encoders.
//!
//! A Transformer backbone is permutation-equivariant along the token feature
//! dimension: feeding column-permuted features `Z·P` and inverse-permuting the
//! output equals running the original features through a correspondingly
//! permuted weight set `P(θ)`. The same identity holds for gradients, so a
//! model fine-tuned on permuted inputs acquires a *second* set of weights that
//! only activates under the secret permutation. This crate implements that
//! machinery end to end:
//!
//! - [`tensor`] — dense fp32 tensors with reverse-mode autodiff and optimizers
//! - [`permutation`] — head-constrained permutation specs, weight transport,
//!   sampling, counting, overlap
//! - [`transformer`] — a small encoder backbone, task heads, weight container
//! - [`equivariance`] — runtime verification of the forward/backward/training
//!   equivariance identities
//! - [`data`] — synthetic token-classification datasets
//! - [`watermark`] — scheme B (target-label) and scheme S (secret-vector)
//!   embedding and extraction, plus a patch-trigger baseline
//! - [`attacks`] — fine-tuning, pruning, quantization, black-box extraction,
//!   overwriting, and adaptive permutation search/removal
//! - [`harness`] — config-driven experiment commands with reproducible
//!   reports (the CLI binary is a thin wrapper around these)
//!
//! Every randomized component draws from a seedable, stream-split RNG
//! ([`rng::SeedHub`]); identical configs and seeds reproduce identical
//! numeric outputs bit for bit.
//!
//! The `examples/` directory is the guided tour: each example is a runnable
//! demonstration of one capability (equivariance checks, each watermark
//! scheme, each attack family, permutation-space accounting).

pub mod attacks;
pub mod data;
pub mod equivariance;
pub mod harness;
pub mod permutation;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod watermark;

pub use tensor::{Graph, NodeId, Param, ParamSet, Tensor, TensorError};
