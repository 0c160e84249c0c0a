//! Checkpoint directories: `manifest.json` plus `params.bin`, a plain
//! concatenation of CDT1 tensor blobs indexed by the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use diffcd::numerics::{blob, ParamSet};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the CDT1 blob inside `params.bin`.
    pub offset: u64,
    /// Encoded length in bytes.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// `diffusion` or `cd`.
    pub kind: String,
    pub versions: BTreeMap<String, String>,
    pub config: RunConfig,
    /// Kind-specific facts such as the alignment mode or the training trace.
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: RunConfig,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: ParamSet,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl Checkpoint {
    pub fn new(kind: &str, config: RunConfig, params: ParamSet) -> Self {
        Self {
            kind: kind.into(),
            config,
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let offset = bytes.len() as u64;
            bytes.extend_from_slice(&blob::encode(t));
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: bytes.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            versions: BTreeMap::from([("diffcd".to_string(), env!("CARGO_PKG_VERSION").to_string())]),
            config: self.config.clone(),
            meta: self.meta.clone(),
            params: entries,
        };
        let blob_path = dir.join(BLOB);
        fs::write(&blob_path, &bytes).map_err(|e| io_err(&blob_path, e))?;
        let man_path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&man_path, text).map_err(|e| io_err(&man_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let man_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&man_path).map_err(|e| io_err(&man_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| io_err(&man_path, format!("corrupt manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(io_err(
                &man_path,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let blob_path = dir.join(BLOB);
        let bytes = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
        let mut params = ParamSet::new();
        let mut covered = 0u64;
        for entry in &manifest.params {
            let end = entry.offset.checked_add(entry.len).filter(|&e| e <= bytes.len() as u64);
            let Some(end) = end else {
                return Err(io_err(&blob_path, format!("entry {} runs past the end", entry.name)));
            };
            if entry.len != blob::encoded_len(&entry.shape) as u64 {
                return Err(io_err(&blob_path, format!("entry {} has a size inconsistent with its shape", entry.name)));
            }
            let slice = &bytes[entry.offset as usize..end as usize];
            let (t, used) = blob::decode(slice).map_err(|e| io_err(&blob_path, format!("{}: {e}", entry.name)))?;
            if used as u64 != entry.len || t.shape() != entry.shape.as_slice() {
                return Err(io_err(&blob_path, format!("entry {} disagrees with its blob", entry.name)));
            }
            covered += entry.len;
            params.insert(entry.name.clone(), t);
        }
        if covered != bytes.len() as u64 {
            return Err(io_err(&blob_path, "blob holds bytes not listed in the manifest"));
        }
        manifest.config.validate()?;
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            meta: manifest.meta,
            params,
        })
    }

    /// Loads and checks the checkpoint kind.
    pub fn load_kind(dir: &Path, kind: &str) -> Result<Self, CliError> {
        let ck = Self::load(dir)?;
        if ck.kind != kind {
            return Err(CliError::Usage(format!(
                "{} holds a `{}` checkpoint, expected `{kind}`",
                dir.display(),
                ck.kind
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcd::numerics::{gaussian, Rng, Tensor};

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(3);
        let mut params = ParamSet::new();
        params.insert("a.w", gaussian(&mut rng, &[2, 3, 3, 3]).unwrap());
        params.insert("b", Tensor::scalar(-0.0));
        params.insert("c", Tensor::new(vec![3], vec![f64::MIN_POSITIVE, 1e300, -7.25]).unwrap());
        let mut ck = Checkpoint::new("diffusion", RunConfig::default(), params);
        ck.meta.insert("note".into(), serde_json::json!({"steps": 3}));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.kind, ck.kind);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.meta, ck.meta);
        for ((n1, a), (n2, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{n1}");
        }
    }

    #[test]
    fn manifest_offsets_tile_the_blob() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
        let mut next = 0;
        for e in &m.params {
            assert_eq!(e.offset, next);
            next += e.len;
        }
        assert_eq!(next, fs::metadata(dir.path().join(BLOB)).unwrap().len());
    }

    #[test]
    fn truncated_blob_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let p = dir.path().join(BLOB);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(CliError::Io(_))));
    }

    #[test]
    fn missing_directory_names_the_path() {
        let err = Checkpoint::load(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert!(matches!(err, CliError::Io(_)));
        assert!(err.to_string().contains("/nonexistent/ckpt"));
    }

    #[test]
    fn kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        assert!(Checkpoint::load_kind(dir.path(), "cd").is_err());
        assert!(Checkpoint::load_kind(dir.path(), "diffusion").is_ok());
    }
}
