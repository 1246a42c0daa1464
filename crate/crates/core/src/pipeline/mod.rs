//! End-to-end plumbing: datasets, the synthetic task, training, offline map
//! generation and rendering. Everything here is seeded from a single
//! top-level seed.

pub mod config;
pub mod dataset;
pub mod maps;
pub mod render;
pub mod synth;
pub mod train;

pub use config::{OracleSection, RunConfig, TrainingConfig};
pub use dataset::{DatasetManifest, ManifestEntry, Sample, Split};
pub use maps::{generate_maps, MapArchive};
pub use render::render_map;
pub use synth::{synth_dataset, SyntheticTask};
pub use train::{cosine_lr, evaluate, train_oracle, train_with_keep, Mode, TrainReport};

use sha2::{Digest, Sha256};

/// Derives an independent stream seed from a base seed and a path of labels.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes"))
}
