//! Synthetic segmentation task with planted core evidence.
//!
//! Each image holds a bright, textured elliptical blob on a dark background.
//! The blob always overlaps the designated core token, and inside that token
//! its contrast against the background is only `texture_contrast`. A trained
//! network therefore separates foreground from background with the smallest
//! margin there, which makes the core token the most attackable one.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{save_labels, DatasetManifest, ManifestEntry, Sample};
use super::derive_seed;
use crate::error::{Error, Result};
use crate::segmentation::LabelMap;
use crate::tensor::{io as kct, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub seed: u64,
    pub image_size: usize,
    pub token_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// `(row, col)` of the token carrying the faint foreground.
    pub core_token: (usize, usize),
    /// Foreground-over-background intensity step inside the core token.
    pub texture_contrast: f64,
    /// Samples produced by `synth` when no count is given.
    pub count: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            seed: 0,
            image_size: 64,
            token_size: 16,
            channels: 1,
            num_classes: 2,
            core_token: (1, 1),
            texture_contrast: 0.12,
            count: 40,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("SyntheticTask", msg));
        let t = self.token_size;
        if t == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(t) {
            return bad(format!("image size {} is not a multiple of token size {t}", self.image_size));
        }
        let g = self.image_size / t;
        if self.core_token.0 >= g || self.core_token.1 >= g {
            return bad(format!("core token {:?} outside the {g}×{g} grid", self.core_token));
        }
        if !(2..=8).contains(&self.num_classes) || self.channels == 0 || self.channels > 4 {
            return bad("need 2–8 classes and 1–4 channels".into());
        }
        if !(self.texture_contrast > 0.0 && self.texture_contrast < 0.5) {
            return bad(format!("texture_contrast {} outside (0, 0.5)", self.texture_contrast));
        }
        Ok(())
    }

    fn in_core(&self, y: usize, x: usize) -> bool {
        (y / self.token_size, x / self.token_size) == self.core_token
    }

    /// Sample `index`, a pure function of the task and the index.
    pub fn sample(&self, index: usize) -> Result<Sample> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["sample", &index.to_string()]));
        let (s, t) = (self.image_size, self.token_size);
        let tf = t as f64;
        let noise = Normal::new(0.0, 0.015).expect("positive std");

        let bg = rng.random_range(0.10..0.15);
        let fg = bg + rng.random_range(0.55..0.7);
        let cy = (self.core_token.0 as f64 + 0.5) * tf + rng.random_range(-0.4..0.4) * tf;
        let cx = (self.core_token.1 as f64 + 0.5) * tf + rng.random_range(-0.4..0.4) * tf;
        let ry = rng.random_range(0.7..1.3) * tf;
        let rx = rng.random_range(0.7..1.3) * tf;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        let freq = rng.random_range(0.3..0.6);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);

        let mut plane = vec![0.0; s * s];
        let mut labels = vec![0u8; s * s];
        for y in 0..s {
            for x in 0..s {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = (cos * dx + sin * dy) / rx;
                let v = (-sin * dx + cos * dy) / ry;
                let p = y * s + x;
                if u * u + v * v <= 1.0 {
                    labels[p] = 1;
                    plane[p] = if self.in_core(y, x) {
                        bg + self.texture_contrast
                    } else {
                        fg + 0.05 * (freq * x as f64 + phase).sin() * (freq * y as f64).cos()
                    };
                } else {
                    plane[p] = bg;
                }
            }
        }
        // Extra classes are small discs away from the core token.
        for class in 2..self.num_classes {
            let r = tf / 3.0;
            let (dy, dx) = loop {
                let dy = rng.random_range(r..s as f64 - r);
                let dx = rng.random_range(r..s as f64 - r);
                if !self.in_core(dy as usize, dx as usize) {
                    break (dy, dx);
                }
            };
            let level = bg + 0.25 + 0.25 * (class - 1) as f64 / (self.num_classes - 1) as f64;
            for y in 0..s {
                for x in 0..s {
                    let (ey, ex) = (y as f64 + 0.5 - dy, x as f64 + 0.5 - dx);
                    if ey * ey + ex * ex <= r * r && !self.in_core(y, x) {
                        labels[y * s + x] = class as u8;
                        plane[y * s + x] = level;
                    }
                }
            }
        }
        let mut data = Vec::with_capacity(self.channels * s * s);
        for c in 0..self.channels {
            let gain = 1.0 - 0.1 * c as f64 / self.channels as f64;
            data.extend(plane.iter().map(|v| (gain * v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
        }
        Ok(Sample {
            id: format!("s{index:04}"),
            image: Tensor::new(&[self.channels, s, s], data)?,
            labels: LabelMap::new(s, s, labels)?,
        })
    }
}

/// Writes `n` samples plus `manifest.json` under `out`.
pub fn synth_dataset(task: &SyntheticTask, n: usize, out: &Path) -> Result<DatasetManifest> {
    task.validate()?;
    if n == 0 {
        return Err(Error::invalid("synth_dataset", "need at least one sample"));
    }
    for dir in ["images", "labels"] {
        let d = out.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let sample = task.sample(i)?;
        let image = Path::new("images").join(format!("{}.kct", sample.id));
        let labels = Path::new("labels").join(format!("{}.pgm", sample.id));
        kct::save(&sample.image, out.join(&image))?;
        save_labels(&sample.labels, &out.join(&labels))?;
        entries.push(ManifestEntry {
            image_id: sample.id,
            image,
            labels,
            map: None,
        });
    }
    let manifest = DatasetManifest {
        num_classes: task.num_classes,
        spacing: (1.0, 1.0),
        core_tokens: vec![task.core_token],
        token_size: Some(task.token_size),
        entries,
        root: out.to_path_buf(),
    };
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}
