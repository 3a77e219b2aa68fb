//! Named-tensor container: the on-disk format for checkpoints and feature
//! files. Layout is fixed little-endian with a JSON header, so round-trips
//! are bitwise:
//!
//! ```text
//! "XTRD" | version: u32 | header_len: u64 | header JSON | payloads...
//! ```
//!
//! The header carries an arbitrary `meta` JSON value plus the tensor index
//! (name, dtype, dims); payloads follow in index order. Writes go through a
//! temp file and a rename, so a crash never leaves a half-written file at
//! the target path.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"XTRD";
pub const VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct IndexEntry {
    name: String,
    dtype: Dtype,
    dims: Vec<usize>,
}

pub fn write_container<T: Scalar>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, Tensor<T>)],
) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| IndexEntry {
                name: name.clone(),
                dtype: T::DTYPE,
                dims: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for (_, t) in tensors {
            for &x in t.data() {
                f.write_all(&x.to_le_bytes_vec())?;
            }
        }
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container<T: Scalar>(
    path: &Path,
) -> Result<(serde_json::Value, Vec<(String, Tensor<T>)>)> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    read_exact(&mut f, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut v4 = [0u8; 4];
    read_exact(&mut f, &mut v4, "version")?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("version {version} unsupported, expected {VERSION}")));
    }
    let mut l8 = [0u8; 8];
    read_exact(&mut f, &mut l8, "header length")?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut f, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;

    let width = T::DTYPE.byte_width();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' stored as {:?}, requested {:?}",
                entry.name, entry.dtype, T::DTYPE
            )));
        }
        let n: usize = entry.dims.iter().product();
        let mut bytes = vec![0u8; n * width];
        read_exact(&mut f, &mut bytes, &format!("payload of '{}'", entry.name))?;
        let data = bytes.chunks_exact(width).map(T::from_le_slice).collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.dims.clone(), data)?));
    }
    Ok((header.meta, tensors))
}

fn read_exact(f: &mut fs::File, buf: &mut [u8], what: &str) -> Result<()> {
    f.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint(format!("truncated file while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

/// Feature files are containers holding the single tensor "frames".
pub fn write_feature_file<T: Scalar>(path: &Path, frames: &Tensor<T>) -> Result<()> {
    let meta = serde_json::json!({ "kind": "features" });
    write_container(path, &meta, &[("frames".to_string(), frames.clone())])
}

pub fn read_feature_file<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let (_, tensors) = read_container::<T>(path)?;
    match tensors.into_iter().find(|(name, _)| name == "frames") {
        Some((_, t)) => Ok(t),
        None => Err(Error::Checkpoint("feature file has no 'frames' tensor".into())),
    }
}
