//! Dataset manifests and sample loading.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::netpbm::Netpbm;
use crate::segmentation::LabelMap;
use crate::tensor::{io as kct, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    /// KCT1 tensor (`C×H×W` or `H×W`) or 8-bit PGM; relative to the manifest.
    pub image: PathBuf,
    /// PGM whose bytes are class indices.
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    /// Pixel spacing in millimetres, `(row, column)`.
    #[serde(default = "unit_spacing")]
    pub spacing: (f64, f64),
    /// Tokens where the synthetic generator planted the decisive evidence.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub core_tokens: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_size: Option<usize>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

fn unit_spacing() -> (f64, f64) {
    (1.0, 1.0)
}

/// One decoded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub labels: LabelMap,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::Data(format!("num_classes {} outside 2..=256", self.num_classes)));
        }
        if !(self.spacing.0 > 0.0 && self.spacing.1 > 0.0) {
            return Err(Error::Data(format!("spacing {:?} must be positive", self.spacing)));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.image_id) {
                return Err(Error::Data(format!("duplicate image id {:?}", e.image_id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let e = &self.entries[index];
        let image = load_image(&self.resolve(&e.image))?;
        let labels = load_labels(&self.resolve(&e.labels))?;
        if (image.shape()[1], image.shape()[2]) != labels.dims() {
            return Err(Error::Data(format!(
                "{}: image {:?} and labels {:?} disagree",
                e.image_id,
                image.shape(),
                labels.dims()
            )));
        }
        labels
            .check_classes(self.num_classes)
            .map_err(|err| Error::Data(format!("{}: {err}", e.image_id)))?;
        Ok(Sample {
            id: e.image_id.clone(),
            image,
            labels,
        })
    }

    /// Loads and checks every sample.
    pub fn load_all(&self) -> Result<Vec<Sample>> {
        let samples: Vec<Sample> = (0..self.len()).map(|i| self.load_sample(i)).collect::<Result<_>>()?;
        if let Some(first) = samples.first() {
            if let Some(s) = samples.iter().find(|s| s.image.shape()[0] != first.image.shape()[0]) {
                return Err(Error::Data(format!("{}: channel count differs from {}", s.id, first.id)));
            }
        }
        Ok(samples)
    }

    pub fn load_entry_map(&self, index: usize) -> Result<Option<ImportanceMap>> {
        match &self.entries[index].map {
            Some(p) => ImportanceMap::load(self.resolve(p)).map(Some),
            None => Ok(None),
        }
    }
}

/// Reads a `C×H×W` image from KCT1 (rank 2 or 3) or 8-bit PGM.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = if bytes.starts_with(b"P5") {
        let pgm = Netpbm::from_bytes(&bytes)?;
        let scale = pgm.maxval as f64;
        Tensor::new(
            &[1, pgm.height, pgm.width],
            pgm.pixels.iter().map(|&b| b as f64 / scale).collect(),
        )?
    } else {
        let t = kct::from_bytes(&bytes)?;
        match *t.shape() {
            [h, w] => t.reshape(&[1, h, w])?,
            [_, _, _] => t,
            _ => return Err(Error::Data(format!("{}: image tensor must be H×W or C×H×W", path.display()))),
        }
    };
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("{}: intensity {v} outside [0, 1]", path.display())));
    }
    Ok(t)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let pgm = Netpbm::load(path)?;
    if pgm.channels != 1 {
        return Err(Error::Data(format!("{}: label map must be a PGM", path.display())));
    }
    LabelMap::new(pgm.height, pgm.width, pgm.pixels)
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    Netpbm::gray(labels.width(), labels.height(), labels.data().to_vec())?.save(path)
}

/// Deterministic train/validation/test partition of sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Self> {
        let n_test = (n as f64 * test_fraction).floor() as usize;
        let n_val = (n as f64 * val_fraction).floor() as usize;
        if n_test + n_val >= n {
            return Err(Error::Data(format!("{n} samples leave nothing to train on")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let sorted = |s: &[usize]| {
            let mut v = s.to_vec();
            v.sort_unstable();
            v
        };
        Ok(Split {
            test: sorted(&order[..n_test]),
            val: sorted(&order[n_test..n_test + n_val]),
            train: sorted(&order[n_test + n_val..]),
        })
    }
}
