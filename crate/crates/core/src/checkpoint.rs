//! Binary checkpoint format.
//!
//! Layout: magic, format version, length-prefixed canonical config text,
//! tensor payload (count, then per tensor: UTF-8 name, rank, dims,
//! little-endian f32 row-major data), and a trailing SHA-256 digest of
//! everything before it. Round trips are bit-exact.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 10] = b"FRUITASSOC";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ParamStore, config_text: &str, path: &Path) -> Result<()> {
    let bytes = encode(params, config_text);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn encode(params: &ParamStore, config_text: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &dim in &tensor.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &value in &tensor.data {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, String)> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint("file too short for header and digest".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expected = Sha256::digest(body);
    if digest != expected.as_slice() {
        return Err(Error::Checkpoint("content digest mismatch".into()));
    }

    let mut cursor = Reader { bytes: body, at: 0 };
    let magic = cursor.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic string".into()));
    }
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version mismatch: file has {version}, expected {VERSION}"
        )));
    }
    let config_len = cursor.u64()? as usize;
    let config_text = String::from_utf8(cursor.take(config_len)?.to_vec())
        .map_err(|e| Error::Checkpoint(format!("config text not UTF-8: {e}")))?;

    let count = cursor.u64()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = cursor.u64()? as usize;
        let name = String::from_utf8(cursor.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?;
        let rank = cursor.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cursor.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(&name, shape, data);
    }
    if cursor.at != body.len() {
        return Err(Error::Checkpoint(format!(
            "trailing bytes after tensor payload: {} of {}",
            cursor.at,
            body.len()
        )));
    }
    Ok((params, config_text))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("matcher/w", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.5]);
        store.insert("pos_mlp/b", vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let store = sample_store();
        save_checkpoint(&store, "seed = 7\n", &path).unwrap();
        let (loaded, config) = load_checkpoint(&path).unwrap();
        assert_eq!(config, "seed = 7\n");
        assert_eq!(loaded, store);

        // save -> load -> save produces byte-identical files.
        let path2 = dir.path().join("b.bin");
        save_checkpoint(&loaded, &config, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_digest_error_not_a_crash() {
        let bytes = encode(&sample_store(), "x = 1\n");
        let cut = &bytes[..bytes.len() - 7];
        let err = decode(cut).unwrap_err().to_string();
        assert!(err.contains("digest"), "{err}");
    }

    #[test]
    fn corrupted_byte_fails_digest() {
        let mut bytes = encode(&sample_store(), "x = 1\n");
        bytes[MAGIC.len() + 10] ^= 0x40;
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("digest"), "{err}");
    }

    #[test]
    fn version_mismatch_is_distinct_error() {
        let mut bytes = encode(&sample_store(), "x = 1\n");
        // Patch the version field and re-digest so only the version differs.
        bytes[10] = 99;
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
