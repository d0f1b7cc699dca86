//! JSON shard manifests: `{"dimension": d, "shards": [{"shard_id", "path"}]}`.
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::store::{read_vectors, write_vectors, ShardId, ShardIndex, VectorFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub shard_id: ShardId,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dimension: usize,
    pub shards: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| {
            serde_json::to_writer_pretty(&mut *w, self)?;
            std::io::Write::write_all(w, b"\n").map_err(|e| Error::io(path, e))
        })
    }

    pub fn resolve(&self, manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(&entry.path)
        }
    }
}

/// Load every shard listed in a manifest, validating dimensions.
pub fn import_shards(manifest_path: &Path) -> Result<Vec<ShardIndex>> {
    let manifest = Manifest::read(manifest_path)?;
    if manifest.shards.is_empty() {
        return Err(Error::malformed(manifest_path, "manifest lists no shards"));
    }
    let mut ids: Vec<ShardId> = manifest.shards.iter().map(|e| e.shard_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::malformed(manifest_path, "duplicate shard_id"));
    }
    manifest
        .shards
        .par_iter()
        .map(|entry| {
            let path = manifest.resolve(manifest_path, entry);
            let file = read_vectors(&path)?;
            if file.dim != manifest.dimension {
                return Err(Error::malformed(
                    &path,
                    format!("dimension {} but manifest says {}", file.dim, manifest.dimension),
                ));
            }
            ShardIndex::from_flat(entry.shard_id, file.dim, file.ids, file.data)
        })
        .collect()
}

/// Write each shard as `shard_XX.fvr` plus `manifest.json` into `dir`;
/// returns the manifest path.
pub fn export_shards(dir: &Path, shards: &[ShardIndex]) -> Result<PathBuf> {
    let dimension = shards
        .first()
        .map(ShardIndex::dim)
        .ok_or_else(|| Error::InvalidArgument("no shards to export".into()))?;
    let mut entries = Vec::with_capacity(shards.len());
    for shard in shards {
        let name = PathBuf::from(format!("shard_{:02}.fvr", shard.shard_id()));
        write_vectors(
            &dir.join(&name),
            &VectorFile {
                dim: shard.dim(),
                ids: shard.ids().to_vec(),
                data: shard.data().to_vec(),
            },
        )?;
        entries.push(ManifestEntry {
            shard_id: shard.shard_id(),
            path: name,
        });
    }
    let path = dir.join("manifest.json");
    Manifest {
        dimension,
        shards: entries,
    }
    .write(&path)?;
    Ok(path)
}
