//! Single-file model checkpoints.
//!
//! Layout: the 5-byte magic `GDLB1`, a little-endian u32 header length, a
//! UTF-8 JSON header, then raw little-endian f32 tensor payloads concatenated
//! in the header's directory order. The header carries the model config, a
//! provenance tag for the pipeline stage that wrote the file, the RNG seed
//! recorded at save time, and one directory entry (name, shape, element
//! offset, element count) per parameter tensor.

use super::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::util::Rng64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"GDLB1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

fn format_err<T>(msg: impl Into<String>) -> Result<T, CheckpointError> {
    Err(CheckpointError::Format(msg.into()))
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stage: String,
    seed: u64,
    tensors: Vec<DirEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    /// element (not byte) offset into the payload
    offset: u64,
    /// element count
    len: u64,
}

/// A loaded checkpoint: the model plus the provenance recorded with it.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub stage: String,
    pub seed: u64,
}

pub fn save_checkpoint(
    model: &Model<f32>,
    stage: &str,
    seed: u64,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut entries = Vec::new();
    let mut tensors: Vec<&Tensor<f32>> = Vec::new();
    let mut offset = 0u64;
    model.visit(&mut |name, t| {
        entries.push(DirEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len() as u64,
        });
        offset += t.len() as u64;
        tensors.push(t);
    });
    let header = Header {
        config: model.config.clone(),
        stage: stage.to_string(),
        seed,
        tensors: entries,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if header_bytes.len() > u32::MAX as usize {
        return format_err("header too large");
    }

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header_bytes.len() + offset as usize * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors {
        for &v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 4 {
        return format_err("file shorter than header prelude");
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return format_err(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..MAGIC.len()],
            MAGIC
        ));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let payload_start = MAGIC.len() + 4 + hlen;
    if bytes.len() < payload_start {
        return format_err("header length exceeds file size");
    }
    let header: Header = serde_json::from_slice(&bytes[MAGIC.len() + 4..payload_start])
        .map_err(|e| CheckpointError::Format(format!("header parse: {e}")))?;
    header.config.validate()?;

    // directory must be dense and in order: offsets strictly sequential
    let mut expect_offset = 0u64;
    for e in &header.tensors {
        if e.offset != expect_offset {
            return format_err(format!("tensor {} at offset {}, expected {expect_offset}", e.name, e.offset));
        }
        let n: usize = e.shape.iter().product();
        if n as u64 != e.len {
            return format_err(format!("tensor {} shape {:?} disagrees with len {}", e.name, e.shape, e.len));
        }
        expect_offset += e.len;
    }
    let payload = &bytes[payload_start..];
    if payload.len() as u64 != expect_offset * 4 {
        return format_err(format!(
            "payload is {} bytes, directory wants {}",
            payload.len(),
            expect_offset * 4
        ));
    }

    let mut by_name: HashMap<&str, &DirEntry> = HashMap::new();
    for e in &header.tensors {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return format_err(format!("duplicate tensor {}", e.name));
        }
    }

    // build a skeleton of the right shape, then swap in the stored values
    let skeleton: Model<f32> = Model::fresh(&header.config, &mut Rng64::seed_from(0))?;
    let mut missing = Vec::new();
    let mut used = 0usize;
    let loaded = skeleton.map(&mut |name, current| {
        let Some(e) = by_name.get(name) else {
            missing.push(name.to_string());
            return current.clone();
        };
        used += 1;
        if e.shape != current.shape() {
            missing.push(format!("{name} (shape {:?} vs {:?})", e.shape, current.shape()));
            return current.clone();
        }
        let start = payload_start + e.offset as usize * 4;
        let data: Vec<f32> = (0..e.len as usize)
            .map(|i| {
                let b = &bytes[start + i * 4..start + i * 4 + 4];
                f32::from_le_bytes(b.try_into().expect("4 bytes"))
            })
            .collect();
        Tensor::from_vec(data, current.shape()).expect("shape checked")
    });
    if !missing.is_empty() {
        return format_err(format!("missing or mismatched tensors: {missing:?}"));
    }
    if used != header.tensors.len() {
        let expected: Vec<String> = {
            let mut v = Vec::new();
            skeleton.visit(&mut |n, _| v.push(n.to_string()));
            v
        };
        let extra: Vec<&str> = header
            .tensors
            .iter()
            .map(|e| e.name.as_str())
            .filter(|n| !expected.iter().any(|x| x == n))
            .collect();
        return format_err(format!("unexpected tensors in file: {extra:?}"));
    }
    Ok(Checkpoint {
        model: loaded,
        stage: header.stage,
        seed: header.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::super::build_teacher;
    use super::*;

    #[test]
    fn header_parse_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        std::fs::write(&path, b"GD").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn save_then_load_preserves_every_tensor() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_q_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            mlp_dim: 12,
            vocab_size: 17,
            rope_theta: 1e4,
            rmsnorm_eps: 1e-6,
            tie_embeddings: true,
            mixer_kinds: vec![crate::mixers::MixerKind::Attention; 2],
        };
        let model: Model<f32> = build_teacher(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&model, "teacher", 9, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.stage, "teacher");
        assert_eq!(ck.seed, 9);
        let mut pairs: Vec<(String, Vec<f32>)> = Vec::new();
        model.visit(&mut |n, t| pairs.push((n.to_string(), t.data().to_vec())));
        let mut i = 0;
        ck.model.visit(&mut |n, t| {
            assert_eq!(n, pairs[i].0);
            assert_eq!(t.data(), &pairs[i].1[..]);
            i += 1;
        });
        assert_eq!(i, pairs.len());
    }
}
