//! Model persistence.
//!
//! Layout: a UTF-8 header of lines
//!
//! ```text
//! format 1
//! config {"image_height":8,...}
//! blocks.0.attn.bk 32 0
//! ...
//! ```
//!
//! where each manifest line is `name dims... byte_offset`, sorted by name,
//! then an empty line, then the little-endian f32 payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vit::{ViTConfig, ViTModel};

pub const FORMAT_VERSION: u32 = 1;

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Serialized bytes of `model`.
pub fn encode(model: &ViTModel) -> Result<Vec<u8>> {
    let config = serde_json::to_string(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = model.named_params();
    params.sort_by(|a, b| a.0.cmp(&b.0));
    let mut header = format!("format {FORMAT_VERSION}\nconfig {config}\n");
    let mut payload = Vec::new();
    for (name, t) in &params {
        header.push_str(name);
        for d in t.shape() {
            header.push_str(&format!(" {d}"));
        }
        header.push_str(&format!(" {}\n", payload.len()));
        payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.extend(payload);
    Ok(out)
}

pub fn save_checkpoint(model: &ViTModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| ckpt_err(path, format!("cannot write checkpoint: {e}")))
}

/// Loads a checkpoint, rebuilding the model from its stored config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ViTModel> {
    load(path.as_ref(), None)
}

/// Loads a checkpoint into a model built from `config`; every stored tensor
/// must match one of that model's parameters in name and shape.
pub fn load_checkpoint_with_config(path: impl AsRef<Path>, config: &ViTConfig) -> Result<ViTModel> {
    load(path.as_ref(), Some(config))
}

fn load(path: &Path, expected: Option<&ViTConfig>) -> Result<ViTModel> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, format!("cannot read checkpoint: {e}")))?;
    decode(&bytes, expected).map_err(|e| match e {
        Error::Checkpoint(msg) => ckpt_err(path, msg),
        other => other,
    })
}

/// Inverse of [`encode`].
pub fn decode(bytes: &[u8], expected: Option<&ViTConfig>) -> Result<ViTModel> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("missing header terminator (blank line)".into()))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not valid UTF-8".into()))?;
    let payload = &bytes[split + 2..];
    let mut lines = header.lines();

    let version = lines
        .next()
        .and_then(|l| l.strip_prefix("format "))
        .ok_or_else(|| bad("first line must be `format <version>`".into()))?;
    if version.trim() != FORMAT_VERSION.to_string() {
        return Err(bad(format!("unknown format version {version} (supported: {FORMAT_VERSION})")));
    }
    let stored: ViTConfig = lines
        .next()
        .and_then(|l| l.strip_prefix("config "))
        .ok_or_else(|| bad("second line must be `config <json>`".into()))
        .and_then(|json| serde_json::from_str(json).map_err(|e| bad(format!("bad config snapshot: {e}"))))?;

    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<Vec<usize>> = tokens.get(1..).and_then(|t| t.iter().map(|s| s.parse().ok()).collect());
        match (tokens.first(), parsed) {
            (Some(name), Some(mut nums)) if !nums.is_empty() => {
                let offset = nums.pop().unwrap();
                entries.push(Entry { name: name.to_string(), shape: nums, offset });
            }
            _ => return Err(bad(format!("malformed manifest line {}: {line:?}", i + 3))),
        }
    }
    for pair in entries.windows(2) {
        if pair[0].name >= pair[1].name {
            return Err(bad(format!("manifest names not sorted and unique at {:?}", pair[1].name)));
        }
    }

    let config = expected.cloned().unwrap_or(stored);
    let mut model = ViTModel::new(config, 0)?;

    let stored_names: BTreeSet<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    let model_names: BTreeSet<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let unexpected: Vec<&str> = stored_names.iter().copied().filter(|n| !model_names.contains(*n)).collect();
    if !unexpected.is_empty() {
        return Err(bad(format!("unexpected tensors for this config: {}", unexpected.join(", "))));
    }
    let missing: Vec<&str> = model_names.iter().map(String::as_str).filter(|n| !stored_names.contains(n)).collect();
    if !missing.is_empty() {
        return Err(bad(format!("missing tensors: {}", missing.join(", "))));
    }

    let mut by_offset: Vec<&Entry> = entries.iter().collect();
    by_offset.sort_by_key(|e| e.offset);
    let mut expected_offset = 0;
    for e in &by_offset {
        let size = 4 * e.shape.iter().product::<usize>();
        if e.offset != expected_offset {
            return Err(bad(format!("tensor {} starts at byte {}, expected {expected_offset}", e.name, e.offset)));
        }
        if e.offset + size > payload.len() {
            return Err(bad(format!(
                "truncated payload: tensor {} needs bytes {}..{} but payload has {}",
                e.name,
                e.offset,
                e.offset + size,
                payload.len()
            )));
        }
        expected_offset += size;
    }
    if expected_offset != payload.len() {
        return Err(bad(format!("{} trailing payload bytes", payload.len() - expected_offset)));
    }

    let lookup: BTreeMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    for (name, t) in model.named_params_mut() {
        let e = lookup[name.as_str()];
        if e.shape != t.shape() {
            return Err(bad(format!(
                "shape mismatch for {name}: stored {:?}, config expects {:?}",
                e.shape,
                t.shape()
            )));
        }
        let raw = &payload[e.offset..e.offset + 4 * t.len()];
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(model)
}
