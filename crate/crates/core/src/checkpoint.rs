//! Single-file checkpoint format and dense materialisation.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LRLENS\0" | u32 version | u64 header_len | JSON header | f64 payload
//! ```
//!
//! The header carries the model config, method, step, seed, a SHA-256 of
//! the payload, and a directory of `(name, shape, offset)` entries. Tensors
//! are stored row-major and contiguously in directory order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{LayerKind, ModelConfig, ParamKey, ParamSet, Part, Role, TinyLm};
use crate::train::Method;

pub const MAGIC: &[u8; 7] = b"LRLENS\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = MAGIC.len() + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub method: Method,
    pub step: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: ParamKey,
    pub shape: [usize; 2],
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub payload_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn payload_len(&self) -> u64 {
        self.tensors.iter().map(|t| (t.shape[0] * t.shape[1] * 8) as u64).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

/// Serialises `params` with `meta`; the parameters must match the model schema.
pub fn encode(params: &ParamSet, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    params.validate(&meta.model)?;
    let mut payload = Vec::with_capacity(params.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for (key, m) in params.iter() {
        tensors.push(TensorEntry { name: *key, shape: [m.rows(), m.cols()], offset: payload.len() as u64 });
        for v in m.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Checks magic and version; returns the header length. `total` is the file size.
fn parse_prefix(prefix: &[u8], total: u64) -> Result<u64> {
    if prefix.len() < MAGIC.len() || &prefix[..MAGIC.len()] != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    if prefix.len() < PREFIX_LEN {
        return Err(format_err(prefix.len(), "truncated prefix"));
    }
    let version = u32::from_le_bytes(prefix[7..11].try_into().expect("4 bytes"));
    if version == 0 || version > FORMAT_VERSION {
        return Err(format_err(7, format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(prefix[11..19].try_into().expect("8 bytes"));
    if (PREFIX_LEN as u64).checked_add(header_len).is_none_or(|e| e > total) {
        return Err(format_err(11, format!("header length {header_len} exceeds file size {total}")));
    }
    Ok(header_len)
}

fn parse_header(json: &[u8]) -> Result<CheckpointHeader> {
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| {
        // The header is written on one line, so the column is a byte position.
        format_err(PREFIX_LEN + e.column().saturating_sub(1), format!("header: {e}"))
    })?;
    check_directory(&header, PREFIX_LEN)?;
    Ok(header)
}

fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let prefix = &bytes[..bytes.len().min(PREFIX_LEN)];
    let end = PREFIX_LEN + parse_prefix(prefix, bytes.len() as u64)? as usize;
    Ok((parse_header(&bytes[PREFIX_LEN..end])?, end))
}

fn check_directory(header: &CheckpointHeader, at: usize) -> Result<()> {
    let mut expected = 0u64;
    for t in &header.tensors {
        if t.offset != expected {
            return Err(format_err(at, format!("tensor `{}` at offset {} (expected {expected})", t.name, t.offset)));
        }
        expected += (t.shape[0] * t.shape[1] * 8) as u64;
    }
    Ok(())
}

/// Inverse of [`encode`]. Every failure is a [`Error::Format`] with the byte offset.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, start) = decode_header(bytes)?;
    let payload = &bytes[start..];
    let want = header.payload_len();
    if (payload.len() as u64) < want {
        return Err(format_err(bytes.len(), format!("payload truncated: {} of {want} bytes", payload.len())));
    }
    if payload.len() as u64 > want {
        return Err(format_err(start + want as usize, "trailing bytes after payload"));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(format_err(start, "payload checksum mismatch"));
    }
    let mut params = ParamSet::new();
    for t in &header.tensors {
        let off = t.offset as usize;
        let n = t.shape[0] * t.shape[1];
        let data: Vec<f64> = payload[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::new(t.shape[0], t.shape[1], data)
            .map_err(|e| format_err(start + off, format!("tensor `{}`: {e}", t.name)))?;
        if params.insert(t.name, m).is_some() {
            return Err(format_err(PREFIX_LEN, format!("duplicate tensor `{}`", t.name)));
        }
    }
    params.validate(&header.meta.model).map_err(|e| format_err(PREFIX_LEN, e.to_string()))?;
    Ok(Checkpoint { meta: header.meta, params })
}

/// Writes atomically: the file appears complete or not at all.
pub fn save(path: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(params, meta)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads the header only; the payload is not touched.
pub fn inspect(path: &Path) -> Result<CheckpointHeader> {
    let io = |e| Error::io(path, e);
    let mut f = fs::File::open(path).map_err(io)?;
    let total = f.metadata().map_err(io)?.len();
    let mut prefix = Vec::with_capacity(PREFIX_LEN);
    (&mut f).take(PREFIX_LEN as u64).read_to_end(&mut prefix).map_err(io)?;
    let header_len = parse_prefix(&prefix, total)?;
    let mut json = Vec::with_capacity(header_len as usize);
    f.take(header_len).read_to_end(&mut json).map_err(io)?;
    parse_header(&json)
}

/// Parameters in the dense layer schema, with the matching dense config.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseView {
    pub model: ModelConfig,
    pub params: ParamSet,
}

/// Materialises a checkpoint into dense per-projection weights.
///
/// Adapter weights become `W + B·A` and SLTrain weights `B·A + mask ⊙ S`;
/// all other tensors pass through unchanged.
pub fn materialize_dense(model: &ModelConfig, params: &ParamSet) -> Result<DenseView> {
    let dense_cfg = model.with_kind(LayerKind::Dense);
    let out = match model.layer_kind {
        LayerKind::Dense => params.clone(),
        LayerKind::Cola => {
            return Err(Error::UnsupportedMethod(
                "We exclude CoLA in the cross-method interpolation: B·σ(A·x) has no equivalent dense weight".into(),
            ))
        }
        LayerKind::Adapter | LayerKind::Sltrain => {
            let lm = TinyLm::new(model.clone())?;
            let mut out: ParamSet = params
                .iter()
                .filter(|(k, _)| !k.role.is_projection())
                .map(|(k, m)| (*k, m.clone()))
                .collect();
            for l in 0..model.n_layers {
                for role in Role::PROJECTIONS {
                    let key = |part| ParamKey::layer(l, role, part);
                    let w = if model.layer_kind == LayerKind::Adapter {
                        let ba = params.tensor(&key(Part::B))?.matmul(params.tensor(&key(Part::A))?)?;
                        params.tensor(&key(Part::Weight))?.add(&ba)?
                    } else {
                        lm.sltrain_weight(params, l, role)?
                    };
                    out.insert(key(Part::Weight), w);
                }
            }
            out
        }
    };
    out.validate(&dense_cfg)?;
    Ok(DenseView { model: dense_cfg, params: out })
}

impl Checkpoint {
    pub fn materialize_dense(&self) -> Result<DenseView> {
        materialize_dense(&self.meta.model, &self.params)
    }
}
