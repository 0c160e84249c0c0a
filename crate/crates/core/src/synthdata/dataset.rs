//! Dataset directories: `A_{i}.pgm`, `B_{i}.pgm`, `M_{i}.pgm` per sample and a
//! `manifest.json` describing them.
//!
//! Manifest schema:
//!
//! ```text
//! {
//!   "format": "diffcd-synth/1",
//!   "config": SceneConfig,
//!   "first_index": u64,
//!   "count": usize,
//!   "samples": [ { "index", "a", "b", "mask", "meta": SampleMeta } ]
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_pair, pgm, SampleMeta, SamplePair, SceneConfig};
use crate::{Error, Result};

pub const FORMAT: &str = "diffcd-synth/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub index: u64,
    pub a: String,
    pub b: String,
    pub mask: String,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub config: SceneConfig,
    pub first_index: u64,
    pub count: usize,
    pub samples: Vec<SampleEntry>,
}

/// Generates samples `first_index..first_index + count` into `out_dir`.
pub fn write_dataset(cfg: &SceneConfig, first_index: u64, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut samples = Vec::with_capacity(count);
    for index in first_index..first_index + count as u64 {
        let pair = generate_pair(cfg, index)?;
        let entry = SampleEntry {
            index,
            a: format!("A_{index}.pgm"),
            b: format!("B_{index}.pgm"),
            mask: format!("M_{index}.pgm"),
            meta: pair.meta,
        };
        pgm::write_image(&out_dir.join(&entry.a), &pair.img_a)?;
        pgm::write_image(&out_dir.join(&entry.b), &pair.img_b)?;
        pgm::write_mask(&out_dir.join(&entry.mask), &pair.mask)?;
        samples.push(entry);
    }
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        config: cfg.clone(),
        first_index,
        count,
        samples,
    };
    let path = out_dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn count_files(dir: &Path, prefix: &str) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for entry in entries {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if name.starts_with(prefix) && name.ends_with(".pgm") {
            n += 1;
        }
    }
    Ok(n)
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SamplePair>)> {
    let path = dir.join(MANIFEST);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::load(dir, "no manifest.json; not a dataset directory"));
        }
        Err(e) => return Err(Error::io(&path, e)),
    };
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::load(&path, format!("unknown format {:?}", manifest.format)));
    }
    if manifest.count != manifest.samples.len() {
        return Err(Error::load(
            &path,
            format!("count {} but {} sample entries", manifest.count, manifest.samples.len()),
        ));
    }
    for prefix in ["A_", "B_", "M_"] {
        let on_disk = count_files(dir, prefix)?;
        if on_disk != manifest.count {
            return Err(Error::load(
                dir,
                format!("manifest lists {} samples but {on_disk} {prefix}*.pgm files exist", manifest.count),
            ));
        }
    }
    let size = manifest.config.size;
    let mut pairs = Vec::with_capacity(manifest.count);
    for s in &manifest.samples {
        let img_a = pgm::read_image(&dir.join(&s.a))?;
        let img_b = pgm::read_image(&dir.join(&s.b))?;
        let mask = pgm::read_mask(&dir.join(&s.mask))?;
        for (name, t) in [(&s.a, &img_a), (&s.b, &img_b), (&s.mask, &mask)] {
            if t.shape() != [1, size, size] {
                return Err(Error::load(
                    dir.join(name),
                    format!("extent {:?} disagrees with configured size {size}", &t.shape()[1..]),
                ));
            }
        }
        pairs.push(SamplePair {
            img_a,
            img_b,
            mask,
            meta: s.meta.clone(),
        });
    }
    Ok((manifest, pairs))
}
