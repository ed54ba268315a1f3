//! Watermark bundle files: the owner's secret material on disk.
//!
//! One file per bundle: a little-endian u32 length, a JSON envelope (scheme
//! tag, permutation spec, secrets, embedding config, head descriptor), then
//! the decoder weights in the same named-tensor binary section the model
//! container uses. The secret vector travels inside the JSON as base64 fp32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::scheme_b::{BundleB, EmbedConfigB, TriggerBundle};
use super::scheme_s::{BundleS, EmbedConfigS};
use crate::permutation::{PermutationFamily, PermutationSpec};
use crate::tensor::{Param, Tensor};
use crate::transformer::io::{read_named_tensors, write_named_tensors, ContainerError, ContainerResult};
use crate::transformer::{HeadKind, Reduction, TaskHead};

#[derive(Debug, Serialize, Deserialize)]
struct HeadDescriptor {
    kind: String,
    reduction: Reduction,
    in_dim: usize,
    out_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
}

impl HeadDescriptor {
    fn of(head: &TaskHead) -> Self {
        let (kind, hidden) = match &head.kind {
            HeadKind::Identity => ("identity", None),
            HeadKind::Linear { .. } => ("linear", None),
            HeadKind::Mlp2 { w1, .. } => ("mlp2", Some(w1.borrow().dims2().0)),
        };
        HeadDescriptor {
            kind: kind.to_string(),
            reduction: head.reduction,
            in_dim: head.in_dim,
            out_dim: head.out_dim,
            hidden,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "scheme")]
enum Envelope {
    B {
        spec: PermutationSpec,
        y_t: usize,
        classes: usize,
        decoder_seed: u64,
        embed: EmbedConfigB,
        head: HeadDescriptor,
    },
    S {
        spec: PermutationSpec,
        family: PermutationFamily,
        sk: String,
        sk_seed: u64,
        epsilon_wm: f32,
        shadow_seed: u64,
        embed: EmbedConfigS,
        head: HeadDescriptor,
    },
    T {
        trigger: Vec<u16>,
        y_t: usize,
        head: HeadDescriptor,
    },
}

/// Any on-disk bundle; extraction dispatches on the variant.
pub enum Bundle {
    B(BundleB),
    S(BundleS),
    Trigger(TriggerBundle),
}

impl Bundle {
    pub fn scheme(&self) -> &'static str {
        match self {
            Bundle::B(_) => "B",
            Bundle::S(_) => "S",
            Bundle::Trigger(_) => "T",
        }
    }
}

fn head_tensors(head: &TaskHead) -> Vec<(String, Tensor)> {
    head.named_tensors().into_iter().map(|(n, p)| (n, p.borrow().clone())).collect()
}

fn head_from_parts(
    desc: &HeadDescriptor,
    tensors: &[(String, Tensor)],
) -> ContainerResult<TaskHead> {
    let param = |i: usize| -> ContainerResult<Param> {
        let (name, t) = tensors
            .get(i)
            .ok_or_else(|| ContainerError::Format(format!("missing head tensor {i}")))?;
        Ok(Param::new(name.clone(), t.clone()))
    };
    let kind = match desc.kind.as_str() {
        "identity" => HeadKind::Identity,
        "linear" => HeadKind::Linear { w: param(0)?, b: param(1)? },
        "mlp2" => HeadKind::Mlp2 { w1: param(0)?, b1: param(1)?, w2: param(2)?, b2: param(3)? },
        other => return Err(ContainerError::Format(format!("unknown head kind '{other}'"))),
    };
    Ok(TaskHead { kind, reduction: desc.reduction, in_dim: desc.in_dim, out_dim: desc.out_dim })
}

fn encode_sk(sk: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(sk.len() * 4);
    for v in sk {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_sk(s: &str) -> ContainerResult<Vec<f32>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| ContainerError::Format(format!("bad sk base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(ContainerError::Format("sk byte length not a multiple of 4".into()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_bundle(w: &mut impl Write, bundle: &Bundle) -> ContainerResult<()> {
    let (envelope, tensors) = match bundle {
        Bundle::B(b) => (
            Envelope::B {
                spec: b.spec.clone(),
                y_t: b.y_t,
                classes: b.classes,
                decoder_seed: b.decoder_seed,
                embed: b.embed,
                head: HeadDescriptor::of(&b.decoder),
            },
            head_tensors(&b.decoder),
        ),
        Bundle::S(s) => (
            Envelope::S {
                spec: s.spec.clone(),
                family: s.family,
                sk: encode_sk(&s.sk),
                sk_seed: s.sk_seed,
                epsilon_wm: s.epsilon_wm,
                shadow_seed: s.shadow_seed,
                embed: s.embed,
                head: HeadDescriptor::of(&s.decoder),
            },
            head_tensors(&s.decoder),
        ),
        Bundle::Trigger(t) => (
            Envelope::T {
                trigger: t.trigger.clone(),
                y_t: t.y_t,
                head: HeadDescriptor::of(&t.head),
            },
            head_tensors(&t.head),
        ),
    };
    let json = serde_json::to_vec(&envelope)
        .map_err(|e| ContainerError::Format(format!("envelope serialization: {e}")))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    write_named_tensors(w, &tensors)
}

pub fn read_bundle(r: &mut impl Read) -> ContainerResult<Bundle> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let envelope: Envelope = serde_json::from_slice(&json)
        .map_err(|e| ContainerError::Format(format!("envelope parse: {e}")))?;
    let tensors = read_named_tensors(r)?;
    match envelope {
        Envelope::B { spec, y_t, classes, decoder_seed, embed, head } => {
            spec.validate().map_err(|e| ContainerError::Format(e.to_string()))?;
            Ok(Bundle::B(BundleB {
                spec,
                y_t,
                classes,
                decoder_seed,
                embed,
                decoder: head_from_parts(&head, &tensors)?,
            }))
        }
        Envelope::S { spec, family, sk, sk_seed, epsilon_wm, shadow_seed, embed, head } => {
            spec.validate().map_err(|e| ContainerError::Format(e.to_string()))?;
            Ok(Bundle::S(BundleS {
                spec,
                family,
                sk: decode_sk(&sk)?,
                sk_seed,
                epsilon_wm,
                shadow_seed,
                embed,
                decoder: head_from_parts(&head, &tensors)?,
            }))
        }
        Envelope::T { trigger, y_t, head } => Ok(Bundle::Trigger(TriggerBundle {
            trigger,
            y_t,
            head: head_from_parts(&head, &tensors)?,
        })),
    }
}

pub fn save_bundle(path: &Path, bundle: &Bundle) -> ContainerResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bundle(&mut w, bundle)?;
    w.flush()?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> ContainerResult<Bundle> {
    read_bundle(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedHub;
    use crate::transformer::ModelConfig;

    #[test]
    fn bundle_b_round_trip() {
        let hub = SeedHub::new(100);
        let cfg = ModelConfig::toy();
        let b = BundleB::generate(
            cfg.d,
            cfg.n_heads,
            PermutationFamily::HeadsAndWithin,
            10,
            3,
            EmbedConfigB::default(),
            &hub,
        );
        let mut buf = Vec::new();
        write_bundle(&mut buf, &Bundle::B(b)).unwrap();
        let back = read_bundle(&mut buf.as_slice()).unwrap();
        match back {
            Bundle::B(b2) => {
                assert_eq!(b2.y_t, 3);
                assert_eq!(b2.spec.d, 16);
                assert_eq!(b2.decoder.out_dim, 10);
            }
            _ => panic!("wrong scheme"),
        }
        // byte-stable on rewrite
        let back2 = read_bundle(&mut buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write_bundle(&mut buf2, &back2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn bundle_s_round_trip_preserves_secret_bits() {
        let hub = SeedHub::new(101);
        let cfg = ModelConfig::toy();
        let s = BundleS::generate(
            cfg.d,
            cfg.n_heads,
            PermutationFamily::HeadsAndWithin,
            EmbedConfigS::default(),
            &hub,
        );
        let sk = s.sk.clone();
        let mut buf = Vec::new();
        write_bundle(&mut buf, &Bundle::S(s)).unwrap();
        match read_bundle(&mut buf.as_slice()).unwrap() {
            Bundle::S(s2) => {
                assert_eq!(s2.sk, sk, "sk must survive base64 bit-for-bit");
                assert_eq!(s2.epsilon_wm, 0.5);
                assert_eq!(s2.decoder.out_dim, 16);
            }
            _ => panic!("wrong scheme"),
        }
    }

    #[test]
    fn trigger_bundle_round_trip() {
        let hub = SeedHub::new(102);
        let head = TaskHead::linear("head.ds", 16, 10, Reduction::MeanPool, &mut hub.stream("h"));
        let t = TriggerBundle { trigger: vec![7, 8, 9], y_t: 2, head };
        let mut buf = Vec::new();
        write_bundle(&mut buf, &Bundle::Trigger(t)).unwrap();
        match read_bundle(&mut buf.as_slice()).unwrap() {
            Bundle::Trigger(t2) => {
                assert_eq!(t2.trigger, vec![7, 8, 9]);
                assert_eq!(t2.y_t, 2);
            }
            _ => panic!("wrong scheme"),
        }
    }
}
