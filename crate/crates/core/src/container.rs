//! The `PFPM` on-disk container.
//!
//! ```text
//! offset  size  content
//! 0       4     magic "PFPM"
//! 4       4     header length H, u32 little-endian
//! 8       H     UTF-8 JSON header (a serialized ModelDescriptor)
//! 8+H     ...   data blob, little-endian f32, addressed by tensor byte offsets
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{validate_descriptor, Model, ModelDescriptor};

pub const MAGIC: &[u8; 4] = b"PFPM";

/// Serializes a model. The model is not validated.
pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&model.descriptor)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Argument(format!("header of {} bytes does not fit a u32 length", header.len())))?;
    let mut out = Vec::with_capacity(8 + header.len() + 4 * model.blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for v in &model.blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses container bytes without running descriptor validation.
///
/// Still rejects framing problems: bad magic, truncated header, unaligned blob,
/// or tensors that reach past the blob.
pub fn decode_unchecked(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing PFPM magic bytes".into()));
    }
    if bytes.len() < 8 {
        return Err(Error::Corruption("file ends inside the header length field".into()));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if header_len > body.len() {
        return Err(Error::Corruption(format!(
            "header length {header_len} exceeds the {} bytes remaining",
            body.len()
        )));
    }
    let (header, data) = body.split_at(header_len);
    let descriptor: ModelDescriptor =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("malformed JSON header: {e}")))?;
    if data.len() % 4 != 0 {
        return Err(Error::Corruption(format!(
            "data blob of {} bytes is not a whole number of f32 values",
            data.len()
        )));
    }
    for spec in &descriptor.tensors {
        let end = spec.element_count.checked_mul(4).and_then(|n| n.checked_add(spec.byte_offset));
        if end.is_none_or(|end| end > data.len() as u64) {
            return Err(Error::Corruption(format!(
                "tensor `{}` (offset {}, {} elements) extends past the {}-byte data blob",
                spec.name,
                spec.byte_offset,
                spec.element_count,
                data.len()
            )));
        }
    }
    let blob = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Model { descriptor, blob })
}

/// Parses and validates container bytes.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    decode_unchecked(bytes)?.validated()
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode(&std::fs::read(path)?)
}

/// Writes a model after checking that it is valid.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let violations = validate_descriptor(model);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    std::fs::write(path, encode(model)?)?;
    Ok(())
}
