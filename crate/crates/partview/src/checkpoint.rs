//! Parameter checkpoint files.
//!
//! Layout: the 8-byte magic `P4FCKPT1`, a JSON index mapping parameter name
//! to `{shape, offset}` (offset in bytes from the start of the payload
//! region), then the concatenated little-endian 64-bit float payloads.
//! Values round-trip bit-exactly and the index is key-sorted so identical
//! states serialize to identical bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

const MAGIC: &[u8; 8] = b"P4FCKPT1";

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    shape: Vec<usize>,
    offset: u64,
}

pub fn save(path: &Path, params: &[Parameter]) -> Result<()> {
    let mut index: BTreeMap<String, IndexEntry> = BTreeMap::new();
    let mut offset = 0u64;
    // Payload order follows the sorted index so the file is a pure function
    // of its contents.
    let mut by_name: BTreeMap<&str, &Parameter> = BTreeMap::new();
    for p in params {
        if by_name.insert(&p.name, p).is_some() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("duplicate parameter name {:?}", p.name),
            });
        }
    }
    for (name, p) in &by_name {
        index.insert(
            name.to_string(),
            IndexEntry {
                shape: p.tensor.shape(),
                offset,
            },
        );
        offset += (p.tensor.numel() * 8) as u64;
    }

    let mut buf = Vec::with_capacity(8 + offset as usize);
    buf.extend_from_slice(MAGIC);
    serde_json::to_writer(&mut buf, &index).map_err(|e| Error::json(path, e))?;
    for (_, p) in &by_name {
        for v in p.tensor.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads every parameter in the file.
pub fn load(path: &Path) -> Result<Vec<Parameter>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: "missing P4FCKPT1 magic".into(),
        });
    }
    // The JSON index is self-delimiting; find where it ends.
    let mut stream = serde_json::Deserializer::from_slice(&bytes[8..]).into_iter::<BTreeMap<String, IndexEntry>>();
    let index = match stream.next() {
        Some(Ok(v)) => v,
        Some(Err(e)) => return Err(Error::json(path, e)),
        None => {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: "empty index".into(),
            })
        }
    };
    let payload_start = 8 + stream.byte_offset();
    let payload = &bytes[payload_start..];

    let mut params = Vec::with_capacity(index.len());
    for (name, entry) in index {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("payload for {name:?} out of bounds"),
            });
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(entry.shape, data).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        params.push(Parameter::new(name, tensor));
    }
    Ok(params)
}
