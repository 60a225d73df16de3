//! Checkpoint container: a JSON manifest (name, shape, dtype, frozen flag,
//! kind, offsets) followed by raw little-endian arrays.
//!
//! Layout: magic `EMCK` · u32 version · u64 manifest byte length · manifest
//! JSON · payload. Entries of any scalar width can be loaded into any model
//! scalar type; values round-trip bitwise within the same dtype.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use emstack_tensor::{Dtype, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ModelError, Result};

const MAGIC: &[u8; 4] = b"EMCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    Buffer,
    Optim,
    Bank,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    frozen: bool,
    kind: EntryKind,
    offset: u64,
    elements: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: BTreeMap<String, String>,
    entries: Vec<EntryMeta>,
}

/// One named array headed for a checkpoint.
pub struct OwnedEntry<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub frozen: bool,
    pub kind: EntryKind,
}

impl<T: Scalar> OwnedEntry<T> {
    pub fn new(
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<T>,
        frozen: bool,
        kind: EntryKind,
    ) -> Self {
        OwnedEntry {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            frozen,
            kind,
        }
    }

    pub fn tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&self.shape, self.data.clone()).expect("entry shape")
    }
}

pub struct Checkpoint<T: Scalar> {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<OwnedEntry<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn find(&self, name: &str) -> Option<&OwnedEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    meta: &BTreeMap<String, String>,
    entries: &[OwnedEntry<T>],
) -> Result<()> {
    let mut manifest = Manifest {
        meta: meta.clone(),
        entries: Vec::with_capacity(entries.len()),
    };
    let mut payload: Vec<u8> = Vec::new();
    for e in entries {
        let offset = payload.len() as u64;
        for &v in &e.data {
            v.to_le_bytes(&mut payload);
        }
        manifest.entries.push(EntryMeta {
            name: e.name.clone(),
            shape: e.shape.clone(),
            dtype: T::DTYPE.name().to_string(),
            frozen: e.frozen,
            kind: e.kind,
            offset,
            elements: e.data.len() as u64,
        });
    }
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| ModelError::Checkpoint(format!("manifest encode: {e}")))?;
    let mut file = std::fs::File::create(path)
        .map_err(|e| ModelError::Checkpoint(format!("create {}: {e}", path.display())))?;
    let write = |file: &mut std::fs::File, bytes: &[u8]| {
        file.write_all(bytes)
            .map_err(|e| ModelError::Checkpoint(format!("write {}: {e}", path.display())))
    };
    write(&mut file, MAGIC)?;
    write(&mut file, &VERSION.to_le_bytes())?;
    write(&mut file, &(manifest_json.len() as u64).to_le_bytes())?;
    write(&mut file, &manifest_json)?;
    write(&mut file, &payload)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelError::Checkpoint(format!("read {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(ModelError::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| ModelError::Checkpoint(format!("manifest decode: {e}")))?;
    let payload = &bytes[16 + mlen..];
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for m in &manifest.entries {
        let dtype = Dtype::parse(&m.dtype)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown dtype {}", m.dtype)))?;
        let width = dtype.byte_width();
        let start = m.offset as usize;
        let end = start + m.elements as usize * width;
        if end > payload.len() {
            return Err(ModelError::Checkpoint(format!(
                "entry {} runs past the payload",
                m.name
            )));
        }
        let raw = &payload[start..end];
        let data: Vec<T> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_slice(c) as f64))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_slice(c)))
                .collect(),
        };
        entries.push(OwnedEntry {
            name: m.name.clone(),
            shape: m.shape.clone(),
            data,
            frozen: m.frozen,
            kind: m.kind,
        });
    }
    Ok(Checkpoint {
        meta: manifest.meta,
        entries,
    })
}

/// Hex SHA-256 of a file, recorded in run manifests.
pub fn file_sha256_hex(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| ModelError::Checkpoint(format!("open {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| ModelError::Checkpoint(format!("read {}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_within_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut meta = BTreeMap::new();
        meta.insert("step".to_string(), "42".to_string());
        let entries = vec![
            OwnedEntry::new("a.weight", &[2, 3], vec![1.5f64, -2.25, 0.1, 0.0, 9.0, -0.5], true, EntryKind::Param),
            OwnedEntry::new("b.bias", &[2], vec![0.25f64, f64::MIN_POSITIVE], false, EntryKind::Param),
        ];
        save_checkpoint(&path, &meta, &entries).unwrap();
        let loaded: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.get("step").unwrap(), "42");
        assert_eq!(loaded.entries.len(), 2);
        assert_eq!(loaded.entries[0].data, entries[0].data);
        assert_eq!(loaded.entries[0].shape, vec![2, 3]);
        assert!(loaded.entries[0].frozen);
        assert_eq!(loaded.entries[1].data, entries[1].data);
    }

    #[test]
    fn cross_dtype_load_converts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let entries = vec![OwnedEntry::new(
            "w",
            &[3],
            vec![0.5f32, -1.0, 2.0],
            false,
            EntryKind::Param,
        )];
        save_checkpoint(&path, &BTreeMap::new(), &entries).unwrap();
        let loaded: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.entries[0].data, vec![0.5f64, -1.0, 2.0]);
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let entries = vec![OwnedEntry::new("w", &[2], vec![1.0f64, 2.0], false, EntryKind::Param)];
        let meta = BTreeMap::from([("k".to_string(), "v".to_string())]);
        save_checkpoint(&p1, &meta, &entries).unwrap();
        save_checkpoint(&p2, &meta, &entries).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(file_sha256_hex(&p1).unwrap(), file_sha256_hex(&p2).unwrap());
    }

    #[test]
    fn rejects_non_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"hello world, definitely not a checkpoint").unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }
}
