//! Offline, parallel importance-map generation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::oracle::OracleNet;
use crate::sage::{run_sage, SageConfig};

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapEntry {
    pub image_id: String,
    pub file: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapFailure {
    pub image_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapIndex {
    pub oracle_id: String,
    pub oracle_hash: String,
    pub sage: SageConfig,
    pub entries: Vec<MapEntry>,
    pub failures: Vec<MapFailure>,
}

/// A directory of KCW1 files plus `index.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapArchive {
    pub dir: PathBuf,
    pub index: MapIndex,
}

impl MapArchive {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index = serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
        Ok(MapArchive { dir, index })
    }

    /// The map for `image_id`, if the archive has one.
    pub fn load(&self, image_id: &str) -> Result<Option<ImportanceMap>> {
        match self.index.entries.iter().find(|e| e.image_id == image_id) {
            Some(e) => ImportanceMap::load(self.dir.join(&e.file)).map(Some),
            None => Ok(None),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.index.failures.is_empty()
    }
}

/// Runs SAGE on every manifest entry with `workers` threads and writes one
/// KCW1 per image under `out`. Output bytes do not depend on `workers`.
pub fn generate_maps(
    manifest: &DatasetManifest,
    oracle: &OracleNet,
    cfg: &SageConfig,
    workers: usize,
    out: &Path,
) -> Result<MapArchive> {
    cfg.validate()?;
    if !oracle.is_frozen() {
        return Err(Error::NotFrozen);
    }
    if workers == 0 {
        return Err(Error::invalid("generate_maps", "need at least one worker"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid("generate_maps", e.to_string()))?;
    let one = |i: usize| -> std::result::Result<MapEntry, MapFailure> {
        let id = manifest.entries[i].image_id.clone();
        let fail = |e: Error| MapFailure {
            image_id: id.clone(),
            error: e.to_string(),
        };
        let sample = manifest.load_sample(i).map_err(fail)?;
        let image_cfg = SageConfig {
            seed: cfg.image_seed(&id),
            ..cfg.clone()
        };
        let map = run_sage(oracle, &sample.image, &sample.labels, &image_cfg, &id).map_err(fail)?;
        let file = PathBuf::from(format!("{id}.kcw"));
        map.save(out.join(&file)).map_err(fail)?;
        Ok(MapEntry { image_id: id.clone(), file })
    };
    let results: Vec<_> = pool.install(|| (0..manifest.len()).into_par_iter().map(one).collect());
    let mut index = MapIndex {
        oracle_id: oracle.id().to_string(),
        oracle_hash: oracle.weights_hash(),
        sage: cfg.clone(),
        entries: Vec::new(),
        failures: Vec::new(),
    };
    for r in results {
        match r {
            Ok(e) => index.entries.push(e),
            Err(f) => index.failures.push(f),
        }
    }
    let path = out.join(INDEX_FILE);
    let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(MapArchive {
        dir: out.to_path_buf(),
        index,
    })
}
