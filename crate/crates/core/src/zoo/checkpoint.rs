//! Single-file checkpoints: magic, a JSON header, then raw little-endian f32
//! tensors in header order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{set_param, Architecture, ModelError, ModelHandle, Result, TransferMode};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RBNCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: String,
    num_classes: usize,
    pretrained: bool,
    mode: TransferMode,
    tensors: Vec<(String, Vec<usize>)>,
}

pub(super) fn save(h: &ModelHandle, path: &Path) -> Result<()> {
    let header = Header {
        architecture: h.spec.name.clone(),
        num_classes: h.num_classes,
        pretrained: h.pretrained,
        mode: h.mode,
        tensors: h.params.iter().map(|p| (p.name.clone(), p.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in &h.params {
        for v in p.var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(super) fn load(path: &Path) -> Result<ModelHandle> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing RBNCKPT1 header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    let arch: Architecture = header.architecture.parse()?;
    let handle = ModelHandle::construct(arch, header.num_classes, header.pretrained, header.mode, 0)?;
    if header.tensors.len() != handle.params.len() {
        return Err(bad("tensor count does not match the architecture"));
    }
    let mut offset = 16 + len;
    for ((name, dims), p) in header.tensors.iter().zip(&handle.params) {
        if *name != p.name {
            return Err(bad(&format!("expected tensor `{}`, found `{name}`", p.name)));
        }
        let n: usize = dims.iter().product();
        let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        set_param(p, &Tensor::from_vec(data, dims.as_slice(), &handle.device)?)?;
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(handle)
}
