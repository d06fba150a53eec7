//! Versioned checkpoint files for parameter stores.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "LVAE"
//! version u32      currently 1
//! meta    u32 length + UTF-8 JSON blob (model configuration; "{}" for a
//!                                       bare store)
//! count   u32      number of parameter records
//! record  u16 name length + UTF-8 name
//!         u8 rank + rank * u32 dims
//!         product(dims) * f64 raw payload
//! ```
//!
//! Records are sorted by name (byte-wise), so a checkpoint's bytes are a
//! deterministic function of the weights and metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::array::NumArray;
use super::params::ParamStore;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LVAE";
pub const VERSION: u32 = 1;

/// Writes `store` weights plus a JSON metadata blob.
pub fn write_checkpoint(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for slot in store.slots_by_name() {
        let name = store.name(slot).as_bytes();
        let value = store.value(slot);
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[value.shape().len() as u8])?;
        for &d in value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a fresh store (zeroed gradients and
/// moments) plus its metadata blob.
pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "header magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, not a checkpoint file",
            magic
        )));
    }
    let version = read_u32(&mut r, "format version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let meta_len = read_u32(&mut r, "metadata length")? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta_bytes, "metadata blob")?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("metadata is not valid JSON: {e}")))?;

    let count = read_u32(&mut r, "record count")? as usize;
    let mut store = ParamStore::new();
    let mut prev_name: Option<String> = None;
    for idx in 0..count {
        let mut len_bytes = [0u8; 2];
        read_exact(&mut r, &mut len_bytes, &format!("record {idx} name length"))?;
        let name_len = u16::from_le_bytes(len_bytes) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, &format!("record {idx} name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("record {idx} name is not UTF-8")))?;
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(Error::Checkpoint(format!(
                    "records out of order at {name:?} (after {prev:?})"
                )));
            }
        }

        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, &format!("record {name:?} rank"))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, &format!("record {name:?} dims"))? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        let mut chunk = [0u8; 8];
        for v in data.iter_mut() {
            read_exact(&mut r, &mut chunk, &format!("record {name:?} payload"))?;
            *v = f64::from_le_bytes(chunk);
        }
        let value = match shape.len() {
            1 => NumArray::vector(data),
            2 => NumArray::matrix(shape[0], shape[1], data)?,
            n => {
                return Err(Error::Checkpoint(format!(
                    "record {name:?} has unsupported rank {n}"
                )))
            }
        };
        store.add(&name, value)?;
        prev_name = Some(name);
    }
    Ok((store, meta))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_weights_and_meta() {
        let dir = std::env::temp_dir().join("lvae-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.lvae");

        let mut store = ParamStore::new();
        store
            .add("z.w", NumArray::matrix(2, 3, vec![0.5; 6]).unwrap())
            .unwrap();
        store.add("a.b", NumArray::vector(vec![1.0, -2.0])).unwrap();
        let meta = serde_json::json!({"kind": "test", "latent": 32});
        write_checkpoint(&path, &store, &meta).unwrap();

        let (loaded, meta2) = read_checkpoint(&path).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(loaded.len(), 2);
        let slot = loaded.slot("z.w").unwrap();
        assert_eq!(loaded.value(slot).shape(), &[2, 3]);
        assert_eq!(
            loaded.value(slot).data(),
            store.value(store.slot("z.w").unwrap()).data()
        );
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = std::env::temp_dir().join("lvae-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("truncated.lvae");

        let mut store = ParamStore::new();
        store.add("w", NumArray::vector(vec![1.0; 16])).unwrap();
        write_checkpoint(&path, &store, &serde_json::json!({})).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();

        let err = match read_checkpoint(&path) {
            Err(e) => e,
            Ok(_) => panic!("truncated checkpoint should not load"),
        };
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "unexpected error: {msg}");
        assert!(msg.contains("\"w\""), "error should name the record: {msg}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("lvae-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("magic.lvae");
        std::fs::write(&path, b"NOPE____________").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
