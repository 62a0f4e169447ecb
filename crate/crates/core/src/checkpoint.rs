//! Model checkpoint container.
//!
//! Layout: `b"CEDM"`, a little-endian `u32` metadata length, UTF-8 JSON
//! metadata, then every parameter tensor as raw little-endian `f64` in the
//! order listed by the metadata.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{id_hex, Arch, FinetunedEncoder, ModelParams};

const MAGIC: &[u8; 4] = b"CEDM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    arch: Arch,
    lambda: f64,
    model_id: String,
    encoder_id: String,
    decoder_id: String,
    finetuned_lambda: Option<f64>,
    /// Element count of each tensor in storage order.
    tensors: Vec<usize>,
}

fn all_params(model: &ModelParams) -> Vec<&Vec<f64>> {
    let mut p = model.encoder.params();
    p.extend(model.decoder.params());
    if let Some(ft) = &model.finetuned {
        p.extend(ft.encoder.params());
    }
    p
}

pub fn to_bytes(model: &ModelParams) -> Result<Vec<u8>> {
    let params = all_params(model);
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        arch: model.arch,
        lambda: model.lambda,
        model_id: id_hex(&model.model_id()),
        encoder_id: id_hex(&model.encoder_id()),
        decoder_id: id_hex(&model.decoder_id()),
        finetuned_lambda: model.finetuned.as_ref().map(|f| f.lambda),
        tensors: params.iter().map(|p| p.len()).collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let n: usize = params.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            offset: bytes.len(),
            what: "checkpoint preamble",
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let json_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(8..8 + json_len).ok_or(Error::Truncated {
        offset: bytes.len(),
        what: "checkpoint metadata",
    })?;
    let meta: Metadata = serde_json::from_slice(json).map_err(|e| Error::Format(e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            meta.format_version
        )));
    }
    // Structure comes from a fresh model of the same architecture; its
    // values are then overwritten.
    let mut model = ModelParams::new(meta.arch, meta.lambda, 0)?;
    if let Some(lambda) = meta.finetuned_lambda {
        model.finetuned = Some(FinetunedEncoder {
            encoder: model.encoder.clone(),
            lambda,
        });
    }
    let mut offset = 8 + json_len;
    {
        let mut params = model.encoder.params_mut();
        params.extend(model.decoder.params_mut());
        if let Some(ft) = model.finetuned.as_mut() {
            params.extend(ft.encoder.params_mut());
        }
        if params.len() != meta.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, architecture has {}",
                meta.tensors.len(),
                params.len()
            )));
        }
        for (p, &n) in params.into_iter().zip(&meta.tensors) {
            if p.len() != n {
                return Err(Error::Format(format!("tensor of {n} elements, expected {}", p.len())));
            }
            let raw = bytes.get(offset..offset + 8 * n).ok_or(Error::Truncated {
                offset: bytes.len(),
                what: "checkpoint tensor data",
            })?;
            for (v, chunk) in p.iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            offset += 8 * n;
        }
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint data",
            bytes.len() - offset
        )));
    }
    if id_hex(&model.model_id()) != meta.model_id {
        return Err(Error::Format("checkpoint model_id does not match its parameters".into()));
    }
    Ok(model)
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    f.sync_all().map_err(|e| Error::io(tmp, e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}
