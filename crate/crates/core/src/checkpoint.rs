//! Single-file checkpoints: `SECR` magic, format version, a JSON metadata
//! block, then 64-byte aligned little-endian `f32` tensors.
//!
//! ```text
//! 0      4        8            16                 payload_start (64-aligned)
//! "SECR" version  meta_len u64 metadata JSON ...  tensor 0 | pad | tensor 1 ...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::params::ParamGroup;

pub const MAGIC: &[u8; 4] = b"SECR";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub version: u32,
    pub model: ModelConfig,
    /// Resolved run configuration that produced this checkpoint, if any.
    pub run_config: Option<serde_json::Value>,
    pub stages: Vec<u8>,
    pub seed: u64,
    pub checksums: BTreeMap<ParamGroup, String>,
    pub frozen: BTreeMap<ParamGroup, String>,
    pub tensors: Vec<TensorEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes the bundle to bytes.
pub fn to_bytes(model: &ModelBundle<f32>, run_config: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        let length = p.value.numel() * 4;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            dtype: "f32".into(),
            shape: p.value.shape().to_vec(),
            offset,
            length,
        });
        offset = align_up(offset + length);
    }
    let meta = Metadata {
        version: VERSION,
        model: model.cfg.clone(),
        run_config,
        stages: model.stages.clone(),
        seed: model.seed,
        checksums: model.store.checksums(),
        frozen: model.frozen.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&meta)?;
    let header = 4 + 4 + 8 + json.len();
    let payload_start = align_up(header);
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(payload_start, 0);
    for ((_, p), e) in model.store.iter().zip(&meta.tensors) {
        out.resize(payload_start + e.offset, 0);
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(model: &ModelBundle<f32>, run_config: Option<serde_json::Value>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, run_config)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Parses the header and metadata only.
pub fn read_metadata(bytes: &[u8]) -> Result<(Metadata, usize)> {
    if bytes.len() < 16 {
        return Err(corrupt("file too short for a header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic (not a checkpoint file)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let meta_end = 16usize.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated metadata"))?;
    let meta: Metadata =
        serde_json::from_slice(&bytes[16..meta_end]).map_err(|e| corrupt(format!("malformed metadata: {e}")))?;
    if meta.version != version {
        return Err(corrupt("metadata version disagrees with header"));
    }
    Ok((meta, align_up(meta_end)))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelBundle<f32>, Metadata)> {
    let (meta, payload_start) = read_metadata(bytes)?;
    let mut model = ModelBundle::<f32>::new(&meta.model, meta.seed)?;
    if meta.tensors.len() != model.store.len() {
        return Err(corrupt(format!("index lists {} tensors, model has {}", meta.tensors.len(), model.store.len())));
    }
    let payload = bytes.get(payload_start..).ok_or_else(|| corrupt("truncated payload"))?;
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for (id, e) in ids.into_iter().zip(&meta.tensors) {
        let p = model.store.param(id);
        if p.name != e.name || p.group != e.group || p.value.shape() != e.shape.as_slice() || e.dtype != "f32" {
            return Err(corrupt(format!("tensor {:?} does not match the model layout", e.name)));
        }
        if e.length != p.value.numel() * 4 || e.offset % ALIGN != 0 {
            return Err(corrupt(format!("tensor {:?} has an invalid extent", e.name)));
        }
        let end = e.offset.checked_add(e.length).ok_or_else(|| corrupt("extent overflow"))?;
        if end > payload.len() {
            return Err(corrupt(format!("tensor {:?} extends past the payload ({} > {})", e.name, end, payload.len())));
        }
        let dst = model.store.get_mut(id).data_mut();
        for (d, chunk) in dst.iter_mut().zip(payload[e.offset..end].chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    for (g, sum) in &meta.checksums {
        let now = model.store.checksum(*g);
        if &now != sum {
            return Err(corrupt(format!("checksum mismatch for group {g}: payload is corrupted")));
        }
    }
    model.stages = meta.stages.clone();
    model.frozen = meta.frozen.clone();
    model.check_frozen()?;
    Ok((model, meta))
}

pub fn load(path: &Path) -> Result<(ModelBundle<f32>, Metadata)> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.vision.layers = 2;
        c.vision.d_v = 16;
        c.lm.d_lm = 16;
        c.lm.layers = 1;
        c.recon.d_dec = 16;
        c.deeplens.fusion_blocks = 1;
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = ModelBundle::<f32>::new(&tiny(), 3).unwrap();
        let bytes = to_bytes(&m, None).unwrap();
        let (back, meta) = from_bytes(&bytes).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(to_bytes(&back, None).unwrap(), bytes);
        let (_, start) = read_metadata(&bytes).unwrap();
        assert_eq!(start % ALIGN, 0);
        assert!(meta.tensors.iter().all(|t| t.offset % ALIGN == 0));
    }

    #[test]
    fn corruption_is_rejected() {
        let m = ModelBundle::<f32>::new(&tiny(), 3).unwrap();
        let bytes = to_bytes(&m, None).unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        let err = from_bytes(&flipped).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).unwrap_err().to_string().contains("magic"));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(from_bytes(&bad_version).unwrap_err().to_string().contains("version"));

        let truncated = &bytes[..bytes.len() - 100];
        assert!(from_bytes(truncated).unwrap_err().to_string().contains("past the payload"));
    }
}
