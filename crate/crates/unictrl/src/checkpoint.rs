//! Binary model checkpoints.
//!
//! ```text
//! "UCTL" | version: u32 LE | header_len: u32 LE | header JSON
//!        | payload_len: u64 LE | payload (f32 LE)
//! ```
//!
//! The header echoes the model configuration and lists every parameter's
//! name, shape and byte offset; the offsets must tile the payload exactly.
//! A SHA-256 of the payload guards against silent corruption.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unictrl_core::denoiser::{Denoiser, DenoiserConfig};
use unictrl_core::Tensor;

pub const MAGIC: &[u8; 4] = b"UCTL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    NotACheckpoint,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("malformed checkpoint header: {0}")]
    Malformed(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl CheckpointError {
    pub fn category(&self) -> &'static str {
        match self {
            Self::NotACheckpoint => "not-a-checkpoint",
            Self::VersionMismatch { .. } => "version-mismatch",
            Self::Truncated(_) => "truncated",
            Self::Integrity(_) => "integrity",
            Self::Malformed(_) => "malformed",
            Self::Io { .. } => "io",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

/// Training provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub seed: u64,
    pub final_loss: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: DenoiserConfig,
    pub params: Vec<ParamEntry>,
    /// Hex SHA-256 of the payload.
    pub payload_sha256: String,
    #[serde(default)]
    pub training: TrainingMeta,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(model: &Denoiser, training: &TrainingMeta) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.scalar_count() * 4);
    let mut params = Vec::with_capacity(model.param_count());
    for (name, t) in model.parameters() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        config: model.config().clone(),
        params,
        payload_sha256: hex(&Sha256::digest(&payload)),
        training: training.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(24 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Truncated(format!("{what}: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Checks that parameter offsets and shapes tile `payload_len` bytes with
/// no gaps or overlaps.
pub fn check_tiling(params: &[ParamEntry], payload_len: u64) -> Result<(), CheckpointError> {
    let mut spans: Vec<(u64, u64, &str)> = params
        .iter()
        .map(|p| (p.offset, p.shape.iter().product::<usize>() as u64 * 4, p.name.as_str()))
        .collect();
    spans.sort();
    let mut cursor = 0u64;
    for (offset, len, name) in spans {
        if offset != cursor {
            let kind = if offset < cursor { "overlaps the previous entry" } else { "leaves a gap" };
            return Err(CheckpointError::Integrity(format!("parameter {name} at byte {offset} {kind} (expected {cursor})")));
        }
        cursor += len;
    }
    if cursor != payload_len {
        return Err(CheckpointError::Integrity(format!(
            "parameters cover {cursor} bytes, payload has {payload_len}"
        )));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<(Denoiser, CheckpointHeader), CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::NotACheckpoint);
    }
    c.pos = 4;
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(c.take(4, "header length")?.try_into().unwrap()) as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(c.take(header_len, "header")?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let payload_len = u64::from_le_bytes(c.take(8, "payload length")?.try_into().unwrap());
    check_tiling(&header.params, payload_len)?;
    let payload = c.take(payload_len as usize, "payload")?;
    if c.pos != bytes.len() {
        return Err(CheckpointError::Integrity(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let digest = hex(&Sha256::digest(payload));
    if digest != header.payload_sha256 {
        return Err(CheckpointError::Integrity("payload digest mismatch".into()));
    }
    let mut named = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let start = p.offset as usize;
        let n: usize = p.shape.iter().product();
        let data: Vec<f32> = payload[start..start + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&p.shape, data).map_err(|e| CheckpointError::Integrity(format!("{}: {e}", p.name)))?;
        named.push((p.name.clone(), t));
    }
    let model = Denoiser::from_parameters(header.config.clone(), named)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok((model, header))
}

pub fn save_checkpoint(model: &Denoiser, training: &TrainingMeta, path: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, encode(model, training)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, CheckpointHeader), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Hex SHA-256 of a file's bytes, used to pin the checkpoint in manifests.
pub fn file_digest(path: &Path) -> io::Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}
