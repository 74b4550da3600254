//! On-disk model snapshots: a fixed prelude (magic + format version +
//! header length), a JSON header describing the model, and the raw
//! little-endian f32 parameter payload in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SrModel};

pub const MAGIC: &[u8; 4] = b"CSRK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub param_names: Vec<String>,
    pub param_shapes: Vec<Vec<usize>>,
    pub dtype: String,
    pub step: u64,
    /// Master seed; together with `step` it pins the training RNG stream,
    /// which is derived per step rather than carried as mutable state.
    pub rng_seed: u64,
}

impl CheckpointHeader {
    pub fn total_scalars(&self) -> usize {
        self.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// All parameters concatenated in `param_names` order.
    pub payload: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &SrModel<f32>, step: u64, rng_seed: u64) -> Checkpoint {
        let mut payload = Vec::with_capacity(model.params.total_scalars());
        for t in model.params.tensors() {
            payload.extend_from_slice(t.data());
        }
        Checkpoint {
            header: CheckpointHeader {
                model: model.cfg.clone(),
                param_names: model.params.names().to_vec(),
                param_shapes: model.params.tensors().iter().map(|t| t.shape().to_vec()).collect(),
                dtype: "f32".to_string(),
                step,
                rng_seed,
            },
            payload,
        }
    }

    /// Rebuild the model this snapshot was taken from; the header must match
    /// what the config actually constructs.
    pub fn into_model(&self) -> Result<SrModel<f32>> {
        let mut model: SrModel<f32> = SrModel::build(self.header.model.clone(), self.header.rng_seed);
        if model.params.names() != self.header.param_names.as_slice() {
            return Err(Error::InvalidArg(
                "checkpoint parameter names do not match the model its config builds".to_string(),
            ));
        }
        let mut offset = 0usize;
        for (i, t) in model.params.tensors_mut().iter_mut().enumerate() {
            if t.shape() != self.header.param_shapes[i].as_slice() {
                return Err(Error::InvalidArg(format!(
                    "checkpoint shape mismatch for `{}`: header {:?}, model {:?}",
                    self.header.param_names[i],
                    self.header.param_shapes[i],
                    t.shape()
                )));
            }
            let n = t.numel();
            t.data_mut().copy_from_slice(&self.payload[offset..offset + n]);
            offset += n;
        }
        debug_assert_eq!(offset, self.payload.len());
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    assert_eq!(
        ckpt.payload.len(),
        ckpt.header.total_scalars(),
        "payload/header size mismatch at save time is a construction bug"
    );
    let header = serde_json::to_string(&ckpt.header)
        .map_err(|e| Error::checkpoint(path, format!("header serialization failed: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + 4 * ckpt.payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in &ckpt.payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::checkpoint(path, "shorter than the fixed prelude"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::checkpoint(path, "bad magic — not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::checkpoint(
            path,
            format!("unsupported format version {version} (this build reads {VERSION})"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let Some(header_bytes) = bytes.get(16..16 + header_len) else {
        return Err(Error::checkpoint(path, "truncated header"));
    };
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::checkpoint(path, format!("corrupt header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::checkpoint(path, format!("unsupported dtype {:?}", header.dtype)));
    }
    let body = &bytes[16 + header_len..];
    let want = header.total_scalars() * 4;
    if body.len() != want {
        return Err(Error::checkpoint(
            path,
            format!("payload holds {} bytes but the header shapes require {want}", body.len()),
        ));
    }
    let payload =
        body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Checkpoint { header, payload })
}
