//! Externally produced embeddings in the `MMTE` binary format.
//!
//! Layout (little-endian): magic `MMTE`, u32 version (1), u32 D, then
//! records of u32 id length, id bytes (UTF-8), u32 T, and T*D f32 values.

use std::path::Path;

use indexmap::IndexMap;

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMTE";
pub const VERSION: u32 = 1;

pub fn encode_external_embeddings(dim: usize, seqs: &IndexMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (id, t) in seqs {
        if t.rank() != 2 || t.shape()[1] != dim {
            return Err(Error::shape("external embedding", t.shape(), &[0, dim]));
        }
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(t.shape()[0] as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_external_embeddings(path: &Path, dim: usize, seqs: &IndexMap<String, Tensor<f32>>) -> Result<()> {
    let bytes = encode_external_embeddings(dim, seqs)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_external_embeddings(bytes: &[u8], expected_dim: usize, path: &Path) -> Result<IndexMap<String, Tensor<f32>>> {
    let mut r = Reader::new(bytes, path);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "offset 0", "bad magic, expected MMTE"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, "offset 4", format!("unsupported version {version}")));
    }
    let dim = r.u32("dimension")? as usize;
    if dim != expected_dim {
        return Err(Error::format(
            path,
            "offset 8",
            format!("embedding dimension {dim} does not match configured {expected_dim}"),
        ));
    }
    let mut out = IndexMap::new();
    while r.pos < bytes.len() {
        let at = r.pos;
        let n = r.u32("id length")? as usize;
        let id = std::str::from_utf8(r.take(n, "id")?)
            .map_err(|_| Error::format(path, format!("offset {}", at + 4), "id is not UTF-8"))?
            .to_string();
        let t = r.u32("token count")? as usize;
        if t == 0 {
            return Err(Error::format(path, format!("offset {}", r.pos - 4), format!("record `{id}` has no tokens")));
        }
        let data = r.f32s(t * dim, "embedding values")?;
        if out.insert(id.clone(), Tensor::new(&[t, dim], data)?).is_some() {
            return Err(Error::format(path, format!("offset {at}"), format!("duplicate id `{id}`")));
        }
    }
    Ok(out)
}

/// Reads an `MMTE` file, rejecting a dimension other than `expected_dim`.
pub fn load_external_embeddings(path: &Path, expected_dim: usize) -> Result<IndexMap<String, Tensor<f32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_external_embeddings(&bytes, expected_dim, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let mut m = IndexMap::new();
        m.insert("000001".to_string(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0));
        let bytes = encode_external_embeddings(3, &m).unwrap();
        let p = Path::new("emb.bin");
        let back = decode_external_embeddings(&bytes, 3, p).unwrap();
        assert_eq!(back.len(), 1);
        assert!(back["000001"].bit_eq(&m["000001"]));
        let e = decode_external_embeddings(&bytes, 4, p).unwrap_err().to_string();
        assert!(e.contains("dimension"), "{e}");
        let e = decode_external_embeddings(&bytes[..bytes.len() - 2], 3, p).unwrap_err().to_string();
        assert!(e.contains("offset"), "{e}");
        assert!(decode_external_embeddings(b"MMTX\x01\0\0\0\x03\0\0\0", 3, p).is_err());
    }
}
