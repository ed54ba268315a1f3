//! Sectioned binary weight container.
//!
//! Layout (all integers little-endian u32, payloads little-endian f32):
//!
//! ```text
//! magic "TKMK" | version | n_layers d n_heads d_mlp vocab_size max_seq_len activation
//! tensor_count | { name_len | name utf-8 | ndim | dims… | payload… } …
//! ```
//!
//! Writing then reading reproduces every payload bit for bit. The same
//! named-tensor section encodes head weights inside watermark bundle files.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Activation, ModelConfig, TransformerWeights};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TKMK";
const VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad container format: {0}")]
    Format(String),
}

pub type ContainerResult<T> = Result<T, ContainerError>;

// ── Primitives ──────────────────────────────────────────────────────────────

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> ContainerResult<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Named-tensor section: count then (name, shape, payload) records.
pub fn write_named_tensors(
    w: &mut impl Write,
    tensors: &[(String, Tensor)],
) -> ContainerResult<()> {
    put_u32(w, tensors.len() as u32)?;
    for (name, t) in tensors {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len() as u32)?;
        for &dim in t.shape() {
            put_u32(w, dim as u32)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_named_tensors(r: &mut impl Read) -> ContainerResult<Vec<(String, Tensor)>> {
    let count = get_u32(r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = get_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| ContainerError::Format(format!("tensor name not utf-8: {e}")))?;
        let ndim = get_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(get_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(&shape, data)
            .map_err(|e| ContainerError::Format(format!("tensor '{name}': {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

fn write_config(w: &mut impl Write, cfg: &ModelConfig) -> ContainerResult<()> {
    for v in [
        cfg.n_layers,
        cfg.d,
        cfg.n_heads,
        cfg.d_mlp,
        cfg.vocab_size,
        cfg.max_seq_len,
        match cfg.activation {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        },
    ] {
        put_u32(w, v as u32)?;
    }
    Ok(())
}

fn read_config(r: &mut impl Read) -> ContainerResult<ModelConfig> {
    let mut vals = [0u32; 7];
    for v in vals.iter_mut() {
        *v = get_u32(r)?;
    }
    let activation = match vals[6] {
        0 => Activation::Relu,
        1 => Activation::Gelu,
        other => return Err(ContainerError::Format(format!("unknown activation code {other}"))),
    };
    Ok(ModelConfig {
        n_layers: vals[0] as usize,
        d: vals[1] as usize,
        n_heads: vals[2] as usize,
        d_mlp: vals[3] as usize,
        vocab_size: vals[4] as usize,
        max_seq_len: vals[5] as usize,
        activation,
    })
}

// ── Model container ─────────────────────────────────────────────────────────

/// Write the model plus any extra named tensors (e.g. a saved task head).
pub fn write_model(
    w: &mut impl Write,
    weights: &TransformerWeights,
    extra: &[(String, Tensor)],
) -> ContainerResult<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    write_config(w, weights.config())?;
    let mut tensors: Vec<(String, Tensor)> = weights
        .named_tensors()
        .into_iter()
        .map(|(name, p)| (name, p.borrow().clone()))
        .collect();
    tensors.extend(extra.iter().cloned());
    write_named_tensors(w, &tensors)
}

/// Read a model container; returns the weights and any extra tensors that
/// are not part of the backbone/embedding set.
pub fn read_model(
    r: &mut impl Read,
) -> ContainerResult<(TransformerWeights, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(ContainerError::Format(format!("unsupported version {version}")));
    }
    let config = read_config(r)?;
    config.validate().map_err(ContainerError::Format)?;
    let tensors = read_named_tensors(r)?;

    let weights = TransformerWeights::zeros(config);
    let mut extra = Vec::new();
    let expected: std::collections::BTreeMap<String, crate::tensor::Param> =
        weights.named_tensors().into_iter().collect();
    let mut filled = std::collections::BTreeSet::new();
    for (name, t) in tensors {
        match expected.get(&name) {
            Some(p) => {
                {
                    let mut dst = p.borrow_mut();
                    if dst.shape() != t.shape() {
                        return Err(ContainerError::Format(format!(
                            "tensor '{name}' has shape {:?}, expected {:?}",
                            t.shape(),
                            dst.shape()
                        )));
                    }
                    dst.data_mut().copy_from_slice(t.data());
                }
                filled.insert(name);
            }
            None => extra.push((name, t)),
        }
    }
    if filled.len() != expected.len() {
        let missing: Vec<&String> =
            expected.keys().filter(|k| !filled.contains(*k)).collect();
        return Err(ContainerError::Format(format!("missing tensors: {missing:?}")));
    }
    Ok((weights, extra))
}

pub fn save_model(
    path: &Path,
    weights: &TransformerWeights,
    extra: &[(String, Tensor)],
) -> ContainerResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, weights, extra)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> ContainerResult<(TransformerWeights, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_model(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedHub;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let hub = SeedHub::new(40);
        let w = TransformerWeights::random_init(ModelConfig::toy(), &mut hub.stream("m"));
        let extra = vec![(
            "head.ds.w".to_string(),
            Tensor::randn(&mut hub.stream("h"), &[10, 16], 0.3),
        )];
        let mut buf = Vec::new();
        write_model(&mut buf, &w, &extra).unwrap();
        let (w2, extra2) = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(w.max_abs_diff(&w2), 0.0);
        assert_eq!(extra2.len(), 1);
        assert_eq!(extra2[0].0, "head.ds.w");
        assert_eq!(extra2[0].1.data(), extra[0].1.data());
        // identical bytes when re-written
        let mut buf2 = Vec::new();
        write_model(&mut buf2, &w2, &extra2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncated_and_corrupt_containers_are_rejected() {
        let hub = SeedHub::new(41);
        let w = TransformerWeights::random_init(ModelConfig::toy(), &mut hub.stream("m"));
        let mut buf = Vec::new();
        write_model(&mut buf, &w, &[]).unwrap();
        assert!(read_model(&mut &buf[..buf.len() / 2]).is_err(), "truncation detected");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_model(&mut bad.as_slice()).is_err(), "magic checked");
    }
}
